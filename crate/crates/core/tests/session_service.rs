use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use serde_json::Value;

use sonomyo_core::report::records_from_ticks;
use sonomyo_core::service::{Server, ServiceConfig};
use sonomyo_core::session::{
    replay_inputs, LogEvent, LogSink, ServerMessage, Session, SessionConfig, StateName, TickMessage, TickPhase,
};
use sonomyo_core::storage::{read_jsonl, to_jsonl};
use sonomyo_core::taskengine::{compute_metrics, fitts_analysis, TaskConfig};
use sonomyo_core::training::PhaseKind;

fn small_config(auto_train: bool) -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.session_id = "wire".into();
    cfg.phantom.width = 16;
    cfg.phantom.height = 16;
    cfg.phantom.motions.truncate(2);
    cfg.training.schedule.repetitions = 3;
    cfg.training.auto_train = auto_train;
    cfg.calibration_s = 3.0;
    cfg.task = TaskConfig {
        n_positions: 3,
        hold_time_s: 2.0,
        trials_per_level: 2,
        ..TaskConfig::extended()
    };
    cfg
}

/// A client that speaks only JSON lines, as a remote UI would.
struct WireClient {
    session: Session,
    received: Vec<String>,
}

impl WireClient {
    fn send(&mut self, line: &str) {
        let out = self.session.handle_line(line);
        self.keep(out);
    }

    fn keep(&mut self, out: Vec<ServerMessage>) {
        self.received.extend(out.iter().map(|m| serde_json::to_string(m).unwrap()));
    }

    fn tick(&mut self) -> Vec<Value> {
        let out = self.session.advance();
        let lines: Vec<String> = out.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        self.keep(out);
        lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    fn last_state(&self) -> Option<Value> {
        self.received
            .iter()
            .rev()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .find(|v| v["type"] == "session_state")
    }
}

fn activation(a: f64) -> String {
    format!(r#"{{"type":"activation_input","a":{a}}}"#)
}

/// Runs training, calibration and the task through the wire format only.
fn wire_session() -> WireClient {
    let mut c = WireClient {
        session: Session::new(LogSink::Memory(Vec::new())),
        received: Vec::new(),
    };
    c.send(r#"{"type":"hello","protocol_version":1,"client":"test"}"#);
    let cfg = serde_json::to_string(&small_config(false)).unwrap();
    c.send(&format!(r#"{{"type":"configure_session","config":{cfg}}}"#));
    assert_eq!(c.last_state().unwrap()["state"], "ready");

    c.send(r#"{"type":"start_training","motion":"PG"}"#);
    let mut a = 0.0;
    loop {
        c.send(&activation(a));
        let msgs = c.tick();
        if let Some(t) = msgs.iter().find(|m| m["type"] == "tick") {
            let cue: Option<PhaseKind> = serde_json::from_value(t["cue"].clone()).unwrap();
            let step = 1.0 / 90.0;
            a = match cue {
                Some(PhaseKind::ToEndState) => (a + step).min(1.0),
                Some(PhaseKind::HoldEndState) => 1.0,
                Some(PhaseKind::ToRest) => (a - step).max(0.0),
                _ => 0.0,
            };
        }
        if msgs.iter().any(|m| m["type"] == "session_state" && m["state"] == "ready") {
            break;
        }
        assert!(c.session.tick() < 10_000, "training never finished");
    }
    assert_eq!(c.session.database().unwrap().entries("PG").len(), 3);

    c.send(r#"{"type":"start_calibration"}"#);
    let mut target = 0.0;
    loop {
        c.send(&activation(target));
        let msgs = c.tick();
        if let Some(t) = msgs.iter().find(|m| m["type"] == "tick") {
            target = t["target"].as_f64().unwrap_or(0.0);
        }
        if let Some(s) = msgs.iter().find(|m| m["type"] == "session_state" && m["state"] == "ready") {
            assert_eq!(s["detail"], "calibrated");
            break;
        }
        assert!(c.session.tick() < 20_000, "calibration never finished");
    }

    c.send(r#"{"type":"start_task"}"#);
    let mut a = 0.0f64;
    loop {
        c.send(&activation(a));
        let msgs = c.tick();
        // the tick that ends the last trial has no target
        if let Some(t) = msgs.iter().find(|m| m["type"] == "tick" && !m["target"].is_null()) {
            let (p, target) = (t["p"].as_f64().unwrap(), t["target"].as_f64().unwrap());
            a = (a + 0.15 * (target - p)).clamp(0.0, 1.0);
        }
        if c.session.state() == StateName::Done {
            break;
        }
        assert_ne!(c.session.state(), StateName::Aborted);
        assert!(c.session.tick() < 40_000, "task never finished");
    }
    c
}

#[test]
fn wire_ticks_carry_the_documented_fields() {
    let c = wire_session();
    let tick: Value = c
        .received
        .iter()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|v| v["type"] == "tick" && v["phase"] == "task")
        .unwrap();
    for key in ["t", "c", "l", "u", "p", "target", "band_q", "phase", "time_remaining"] {
        assert!(!tick[key].is_null(), "{key} missing from {tick}");
    }
    assert_eq!(tick["band_q"].as_f64().unwrap(), 0.25);
}

#[test]
fn metrics_rebuilt_from_wire_ticks_equal_the_server_metrics() {
    let c = wire_session();
    let cfg = small_config(false).task;
    let mut ticks: Vec<TickMessage> = Vec::new();
    let mut server = None;
    for line in &c.received {
        match serde_json::from_str::<ServerMessage>(line).unwrap() {
            ServerMessage::Tick(t) => ticks.push(t),
            ServerMessage::SessionMetrics { metrics, fitts } => server = Some((metrics, fitts)),
            _ => {}
        }
    }
    let (metrics, fitts) = server.expect("session_metrics message");
    assert_eq!(metrics.overall.n_trials, 6);
    let records = records_from_ticks(&ticks, &cfg);
    assert_eq!(compute_metrics(&records, &cfg).unwrap(), metrics);
    assert_eq!(fitts_analysis(&records, &cfg).ok(), fitts);
    assert!(ticks.iter().any(|t| t.phase == TickPhase::Training));
}

#[test]
fn replaying_client_inputs_reproduces_the_log() {
    let mut c = wire_session();
    // a malformed line after the session is done must be replayed as well
    c.send("{not json");
    assert_eq!(c.session.state(), StateName::Aborted);
    let LogSink::Memory(original) = c.session.close().unwrap() else { unreachable!() };
    assert!(original.iter().any(|e| matches!(e, LogEvent::Rejected { .. })));

    let replayed = replay_inputs(&original, LogSink::Memory(Vec::new())).unwrap();
    let LogSink::Memory(again) = replayed.close().unwrap() else { unreachable!() };
    assert_eq!(to_jsonl(&again), to_jsonl(&original));
}

#[test]
fn configure_is_refused_once_a_task_has_run() {
    let mut c = wire_session();
    let cfg = serde_json::to_string(&small_config(true)).unwrap();
    let before = c.received.len();
    c.send(&format!(r#"{{"type":"configure_session","config":{cfg}}}"#));
    let replies: Vec<Value> = c.received[before..].iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(replies.iter().any(|v| v["type"] == "error" && v["code"] == "ProtocolViolation" && v["fatal"] == true));
    assert_eq!(c.session.state(), StateName::Aborted);
}

fn read_until(reader: &mut impl BufRead, mut pred: impl FnMut(&Value) -> bool) -> Vec<Value> {
    let mut seen = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        assert!(reader.read_line(&mut line).unwrap() > 0, "server closed early");
        let v: Value = serde_json::from_str(&line).unwrap();
        let done = pred(&v);
        seen.push(v);
        if done {
            return seen;
        }
    }
}

#[test]
fn tcp_service_streams_ticks_and_logs_a_replayable_session() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::bind(ServiceConfig {
        addr: "127.0.0.1:0".into(),
        speed: 20.0,
        heartbeat_s: 0.05,
        log_dir: Some(dir.path().to_path_buf()),
        max_connections: Some(1),
    })
    .unwrap();
    let addr = server.local_addr().unwrap();
    let handle = thread::spawn(move || server.run());

    let stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let cfg = serde_json::to_string(&small_config(true)).unwrap();
    writeln!(w, r#"{{"type":"hello","protocol_version":1}}"#).unwrap();
    writeln!(w, r#"{{"type":"configure_session","config":{cfg}}}"#).unwrap();
    read_until(&mut r, |v| v["type"] == "session_state" && v["state"] == "ready");
    writeln!(w, r#"{{"type":"select_motion","motion":"WP"}}"#).unwrap();
    writeln!(w, r#"{{"type":"start_calibration"}}"#).unwrap();
    let seen = read_until(&mut r, |v| v["type"] == "tick" && v["phase"] == "calibration" && v["tick"].as_u64().unwrap() > 20);
    let calib: Vec<&Value> = seen.iter().filter(|v| v["type"] == "tick").collect();
    assert!(calib.iter().all(|t| t["motion"] == "WP" && !t["target"].is_null()));
    assert!(calib.windows(2).all(|w| w[1]["tick"].as_u64() == w[0]["tick"].as_u64().map(|t| t + 1)));
    writeln!(w, r#"{{"type":"abort"}}"#).unwrap();
    read_until(&mut r, |v| v["type"] == "session_state" && v["state"] == "aborted");
    drop(w);
    drop(r);
    handle.join().unwrap().unwrap();

    let events: Vec<LogEvent> = read_jsonl(&dir.path().join("session-0.jsonl")).unwrap();
    assert!(matches!(events.last(), Some(LogEvent::Closed { .. })));
    // heartbeats are transport traffic and never reach the log
    let states = events
        .iter()
        .filter(|e| matches!(e, LogEvent::Sent { message: ServerMessage::SessionState { .. }, .. }))
        .count();
    assert!(states <= 6, "{states} logged session_state messages");
    let replayed = replay_inputs(&events, LogSink::Memory(Vec::new())).unwrap();
    let LogSink::Memory(again) = replayed.close().unwrap() else { unreachable!() };
    assert_eq!(to_jsonl(&again), to_jsonl(&events));
}
