//! Offline reconstruction of task results and the headless scripted session.

use thiserror::Error;

use crate::session::{
    ClientMessage, ErrorCode, LogEvent, LogSink, ServerMessage, Session, SessionConfig, SessionError, StateName,
    TickMessage, TickPhase, PROTOCOL_VERSION,
};
use crate::synthsim::{mix_seed, ClosedLoopSubject, CompletionMap, Phantom, ScriptedSubject, SynthError};
use crate::taskengine::{
    compute_metrics, fitts_analysis, FittsAnalysis, SessionMetrics, TaskConfig, TaskError, TaskRunner, TrialRecord,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("log contains no task block")]
    NoTask,
    #[error("task tick at {tick} outside any task block")]
    OrphanTick { tick: u64 },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("session reported {code:?}: {message}")]
    Rejected { code: ErrorCode, message: String },
    #[error("session did not finish within {0} ticks")]
    TickLimit(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub config: TaskConfig,
    pub records: Vec<TrialRecord>,
    pub metrics: SessionMetrics,
    pub fitts: Option<FittsAnalysis>,
}

/// Re-runs every task block in a session log through a fresh
/// [`TaskRunner`], using the logged `(t, p)` of each task tick.
pub fn replay_log(events: &[LogEvent]) -> Result<Replay, ReportError> {
    let mut config = None;
    let mut runner: Option<TaskRunner> = None;
    let mut records = Vec::new();
    for event in events {
        match event {
            LogEvent::TaskStarted {
                motion,
                config: cfg,
                schedule,
                ..
            } => {
                if let Some(r) = runner.take() {
                    records.extend(r.records().iter().cloned());
                }
                runner = Some(TaskRunner::new(cfg.clone(), schedule.clone(), motion)?);
                config.get_or_insert_with(|| cfg.clone());
            }
            LogEvent::TrialRestarted { tick, t } => {
                runner
                    .as_mut()
                    .ok_or(ReportError::OrphanTick { tick: *tick })?
                    .restart_current(*t);
            }
            LogEvent::Sent {
                message: ServerMessage::Tick(tick),
                ..
            } if tick.phase == TickPhase::Task => {
                let p = tick.p.expect("task ticks carry p");
                runner
                    .as_mut()
                    .ok_or(ReportError::OrphanTick { tick: tick.tick })?
                    .step(tick.t, p);
            }
            _ => {}
        }
    }
    if let Some(r) = runner {
        records.extend(r.records().iter().cloned());
    }
    let config = config.ok_or(ReportError::NoTask)?;
    let metrics = compute_metrics(&records, &config)?;
    let fitts = fitts_analysis(&records, &config).ok();
    Ok(Replay {
        config,
        records,
        metrics,
        fitts,
    })
}

/// Rebuilds trial records from the tick stream a client receives. A trial
/// counts once a later task tick shows a different trial (or none); a run of
/// non-task ticks followed by the same trial means it was restarted.
pub fn records_from_ticks(ticks: &[TickMessage], cfg: &TaskConfig) -> Vec<TrialRecord> {
    let span = cfg.n_positions as f64 - 1.0;
    let mut out: Vec<TrialRecord> = Vec::new();
    let mut current: Option<TrialRecord> = None;
    let mut interrupted = false;
    let mut last_level: Option<(String, usize)> = None;
    for tick in ticks {
        if tick.phase != TickPhase::Task {
            interrupted = true;
            continue;
        }
        let same = current
            .as_ref()
            .is_some_and(|r| Some(r.trial) == tick.trial && r.motion == tick.motion);
        if same && interrupted {
            let r = current.as_mut().expect("checked");
            r.presented_at = tick.t;
            r.cursor_trace.clear();
        } else if !same {
            if let Some(mut r) = current.take() {
                r.ended_at = tick.t;
                r.finalize(cfg.band());
                last_level = Some((r.motion.clone(), r.level));
                out.push(r);
            }
            if let (Some(trial), Some(target)) = (tick.trial, tick.target) {
                let level = (target * span).round() as usize;
                let previous_level = match (&last_level, trial) {
                    (_, 0) => None,
                    (Some((m, l)), _) if *m == tick.motion => Some(*l),
                    _ => None,
                };
                current = Some(TrialRecord {
                    trial,
                    motion: tick.motion.clone(),
                    level,
                    target,
                    previous_level,
                    presented_at: tick.t,
                    ended_at: tick.t,
                    first_entry_at: None,
                    cursor_trace: Vec::new(),
                    acquired: false,
                    position_error: None,
                    stability_error: None,
                    movement_time: None,
                });
            }
        }
        interrupted = false;
        if let (Some(r), Some(p)) = (current.as_mut(), tick.p) {
            r.cursor_trace.push((tick.t, p));
        }
    }
    out
}

/// Configuration of a headless session driven by the scripted subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedRun {
    pub session: SessionConfig,
    pub subject: ScriptedSubject,
    /// Motions to run in order; empty means every configured motion.
    pub motions: Vec<String>,
    pub max_ticks: u64,
}

impl Default for ScriptedRun {
    fn default() -> Self {
        Self {
            session: SessionConfig::default(),
            subject: ScriptedSubject::default(),
            motions: Vec::new(),
            max_ticks: 1_000_000,
        }
    }
}

pub struct ScriptedOutcome {
    pub records: Vec<TrialRecord>,
    pub metrics: SessionMetrics,
    pub fitts: Option<FittsAnalysis>,
    /// Every server message, in order.
    pub messages: Vec<ServerMessage>,
    pub log: LogSink,
}

impl ScriptedOutcome {
    pub fn ticks(&self) -> impl Iterator<Item = &TickMessage> {
        self.messages.iter().filter_map(|m| match m {
            ServerMessage::Tick(t) => Some(t),
            _ => None,
        })
    }
}

fn first_error(out: &[ServerMessage], fatal_only: bool) -> Option<ReportError> {
    out.iter().find_map(|m| match m {
        ServerMessage::Error { code, message, fatal } if *fatal || !fatal_only => Some(ReportError::Rejected {
            code: *code,
            message: message.clone(),
        }),
        _ => None,
    })
}

/// Runs training (synthetic), calibration and the task for each motion
/// through a [`Session`], with the scripted subject closing the loop on the
/// ticks the session emits.
pub fn run_scripted_session(run: &ScriptedRun, log: LogSink) -> Result<ScriptedOutcome, ReportError> {
    run.subject.validate()?;
    let cfg = &run.session;
    let rate = cfg.tick_rate_hz();
    let phantom = Phantom::new(cfg.phantom.clone())?;
    let motions: Vec<String> = if run.motions.is_empty() {
        cfg.phantom.motions.iter().map(|m| m.id.clone()).collect()
    } else {
        run.motions.clone()
    };

    let mut session = Session::new(log);
    let mut messages = Vec::new();
    let send = |session: &mut Session, messages: &mut Vec<ServerMessage>, m: ClientMessage| {
        let out = session.handle(m);
        let err = first_error(&out, false);
        messages.extend(out);
        err.map_or(Ok(()), Err)
    };
    send(
        &mut session,
        &mut messages,
        ClientMessage::Hello {
            protocol_version: PROTOCOL_VERSION,
            client: Some("scripted".into()),
        },
    )?;
    let mut config = cfg.clone();
    config.training.auto_train = true;
    send(&mut session, &mut messages, ClientMessage::ConfigureSession { config })?;

    for (k, motion) in motions.iter().enumerate() {
        let map = CompletionMap::new(&phantom, motion)?;
        let subject = ScriptedSubject {
            seed: mix_seed(run.subject.seed, k as u64),
            ..run.subject
        };
        let mut hand = ClosedLoopSubject::new(&subject, rate);
        send(&mut session, &mut messages, ClientMessage::SelectMotion { motion: motion.clone() })?;
        send(&mut session, &mut messages, ClientMessage::StartCalibration)?;

        let mut last: Option<TickMessage> = None;
        let mut task_started = false;
        loop {
            if session.tick() >= run.max_ticks {
                return Err(ReportError::TickLimit(run.max_ticks));
            }
            let completion = match &last {
                Some(t) if t.phase == TickPhase::Calibration => t.target.unwrap_or(0.0),
                Some(t) if t.phase == TickPhase::Task => match (t.target, t.p) {
                    (Some(target), Some(p)) => hand.step(target, p),
                    _ => hand.intended(),
                },
                _ => 0.0,
            };
            session.handle(ClientMessage::ActivationInput {
                a: map.activation_for(completion),
                motion: Some(motion.clone()),
            });
            let out = session.advance();
            if let Some(e) = first_error(&out, true) {
                return Err(e);
            }
            let mut finished = false;
            let mut ready: Option<bool> = None;
            for m in &out {
                match m {
                    ServerMessage::Tick(t) => {
                        let entering_task = t.phase == TickPhase::Task
                            && last.as_ref().is_none_or(|prev| prev.phase != TickPhase::Task);
                        if entering_task {
                            hand.reset(0.0);
                        }
                        last = Some(t.clone());
                    }
                    ServerMessage::SessionState { state, detail, .. } => match state {
                        StateName::Ready => ready = Some(detail.as_deref() == Some("calibrated")),
                        StateName::Done => finished = true,
                        _ => {}
                    },
                    ServerMessage::Error { code, message, .. } => {
                        log::debug!("tick {}: {code:?} {message}", session.tick());
                    }
                    _ => {}
                }
            }
            messages.extend(out);
            if finished {
                break;
            }
            if let Some(calibrated) = ready {
                if task_started {
                    return Err(ReportError::Rejected {
                        code: ErrorCode::Internal,
                        message: "session left the task unexpectedly".into(),
                    });
                }
                // a failed calibration returns to ready without bounds; retry it
                if calibrated {
                    send(&mut session, &mut messages, ClientMessage::StartTask)?;
                    task_started = true;
                } else {
                    send(&mut session, &mut messages, ClientMessage::StartCalibration)?;
                }
                last = None;
            }
        }
    }

    let records = session.records().to_vec();
    let metrics = compute_metrics(&records, &cfg.task)?;
    let fitts = fitts_analysis(&records, &cfg.task).ok();
    let log = session.close()?;
    Ok(ScriptedOutcome {
        records,
        metrics,
        fitts,
        messages,
        log,
    })
}
