use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn sonomyo() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sonomyo"));
    cmd.env_remove("SONOMYO_OUT");
    cmd
}

fn run_ok(args: &[&str], out: &Path) -> String {
    let o = sonomyo().args(args).arg("--out").arg(out).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().expect("error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn field(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {stdout}"))
        .to_string()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_writes_33_trial_rows_and_report_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let live = dir.path().join("live");
    let stdout = run_ok(&["run", "--n-positions", "11", "--trials", "3"], &live);
    assert_eq!(field(&stdout, "trials"), "33");

    let trials = String::from_utf8(read(&live.join("trials.csv"))).unwrap();
    assert_eq!(trials.lines().count(), 1 + 33);
    assert!(live.join("session.jsonl").exists());
    assert!(!live.join("session.jsonl.partial").exists());

    let offline = dir.path().join("offline");
    let log = live.join("session.jsonl");
    run_ok(&["report", log.to_str().unwrap()], &offline);
    for f in ["trials.csv", "summary.csv", "fitts.csv"] {
        assert_eq!(read(&live.join(f)), read(&offline.join(f)), "{f}");
    }
    // report is idempotent
    run_ok(&["report", log.to_str().unwrap()], &offline);
    for f in ["trials.csv", "summary.csv", "fitts.csv"] {
        assert_eq!(read(&live.join(f)), read(&offline.join(f)), "{f}");
    }
}

#[test]
fn runs_are_deterministic_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["run", "--seed", "17", "--n-positions", "5", "--trials", "1", "--hold-time", "4"];
    run_ok(&args, &dir.path().join("a"));
    run_ok(&args, &dir.path().join("b"));
    for f in ["session.jsonl", "trials.csv", "summary.csv"] {
        assert_eq!(read(&dir.path().join("a").join(f)), read(&dir.path().join("b").join(f)), "{f}");
    }
    run_ok(&["run", "--seed", "18", "--n-positions", "5", "--trials", "1", "--hold-time", "4"], &dir.path().join("c"));
    assert_ne!(read(&dir.path().join("a/session.jsonl")), read(&dir.path().join("c/session.jsonl")));
}

#[test]
fn invalid_flags_exit_2_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = sonomyo()
        .args(["run", "--n-positions", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");
    assert!(!out.exists());

    let o = sonomyo().args(["run", "--motions", "XX", "--out"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("XX"));
    assert!(!out.exists());

    let o = sonomyo().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");
}

#[test]
fn io_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = sonomyo()
        .arg("report")
        .arg(dir.path().join("missing.jsonl"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "io");

    let cfg = dir.path().join("absent.toml");
    let o = sonomyo().args(["crossval", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "colour = 3\n").unwrap();
    let o = sonomyo().args(["crossval", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("colour"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "out = \"ignored\"\n[session.task]\nn_positions = 5\nhold_time_s = 4.0\ntrials_per_level = 2\nhold_mode = \"on_presentation\"\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let stdout = run_ok(&["run", "--config", cfg.to_str().unwrap(), "--trials", "1"], &out);
    assert_eq!(field(&stdout, "trials"), "5");
    assert!(out.join("trials.csv").exists());

    let stdout = run_ok(&["run", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(field(&stdout, "trials"), "10");
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let o = sonomyo()
        .env("SONOMYO_OUT", &out)
        .args(["run", "--n-positions", "3", "--trials", "1", "--hold-time", "3"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trials.csv").exists());
}

#[test]
fn crossval_reports_both_rest_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(&["crossval", "--rest-jitter"], dir.path());
    let exclude: f64 = field(&stdout, "exclude_rest_accuracy_pct").parse().unwrap();
    let include: f64 = field(&stdout, "include_rest_accuracy_pct").parse().unwrap();
    assert!(exclude >= 95.0, "{exclude}");
    assert!(include <= exclude);
    assert!(stdout.contains("# confusion exclude_rest\ntrue\\predicted,KG,PG,Po,Tr,WP\n"));
    assert!(stdout.contains("# confusion include_rest\ntrue\\predicted,KG,PG,Po,Tr,WP,rest\n"));
}

#[test]
fn synth_then_train_matches_the_in_memory_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(&["synth", "--seed", "4"], dir.path());
    let files: Vec<&str> = stdout.lines().collect();
    assert_eq!(files.len(), 5);

    let mut args = vec!["train", "--seed", "4"];
    args.extend(files.iter().copied());
    let trained = run_ok(&args, dir.path());
    assert!(dir.path().join("db/manifest.json").exists());

    let db = dir.path().join("db");
    let reloaded = run_ok(&["crossval", "--db", db.to_str().unwrap()], dir.path());
    let fixture = run_ok(&["crossval", "--seed", "4"], dir.path());
    for key in ["exclude_rest_accuracy_pct", "include_rest_accuracy_pct"] {
        assert_eq!(field(&trained, key), field(&reloaded, key));
        assert_eq!(field(&reloaded, key), field(&fixture, key));
    }
    assert_eq!(reloaded, fixture);
}

#[test]
fn train_rejects_a_corrupt_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.smgf");
    std::fs::write(&bad, b"not a frame sequence at all, definitely not").unwrap();
    let o = sonomyo()
        .arg("train")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "data");
    assert!(!dir.path().join("db").exists());
}

#[test]
fn serve_hosts_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = sonomyo()
        .args(["serve", "--addr", "127.0.0.1:0", "--speed", "20", "--max-connections", "1", "--out"])
        .arg(dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening=").expect("listening line").to_string();

    let stream = TcpStream::connect(&addr).unwrap();
    let mut writer = stream.try_clone().unwrap();
    writeln!(writer, r#"{{"type":"hello","protocol_version":1}}"#).unwrap();
    writeln!(
        writer,
        r#"{{"type":"configure_session","config":{{"phantom":{{"width":16,"height":16}},"training":{{"auto_train":false}}}}}}"#
    )
    .unwrap();
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    let mut ready = false;
    for _ in 0..200 {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        if v["type"] == "session_state" && v["state"] == "ready" {
            ready = true;
            break;
        }
    }
    assert!(ready, "never reached ready");
    writeln!(writer, r#"{{"type":"abort"}}"#).unwrap();
    drop(writer);
    drop(reader);

    let status = child.wait().unwrap();
    assert!(status.success());
    let log = dir.path().join("sessions/session-0.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().any(|l| l.contains(r#""event":"closed""#)));
}
