//! Session state machine and the line-delimited JSON wire protocol.
//!
//! A [`Session`] is driven by two calls: [`Session::handle`] for each client
//! message and [`Session::advance`] once per tick. Messages are applied at
//! the tick they arrive, before that tick is processed. Everything the
//! session receives or emits is appended to its log, so a log fully
//! determines a replay.
//!
//! States: `idle -> ready -> (training | calibrating | task) -> ready/done`,
//! with `aborted` terminal. A bound collapse during the task suspends the
//! trial, re-enters calibration and restarts the trial afterwards.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{distance_from_rest, Frame};
use crate::propctl::{calibrate, BoundState, ControlError, MotionReference, ProportionalController};
use crate::storage::{JsonlWriter, StorageError};
use crate::synthsim::{mix_seed, synth_training_session, Phantom, PhantomConfig};
use crate::taskengine::{
    compute_metrics, fitts_analysis, generate_schedule, FittsAnalysis, SessionMetrics, TargetSchedule, TaskConfig,
    TaskEvent, TaskRunner, TrialRecord, TrialRecordSummary,
};
use crate::training::{
    build_database, MetronomeSchedule, MotionClass, PhaseKind, PlateauParams, TrainingDatabase, TrainingSession,
};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub schedule: MetronomeSchedule,
    pub plateau: PlateauParams,
    /// Build the database from synthetic sessions at configure time.
    pub auto_train: bool,
    pub session_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            schedule: MetronomeSchedule::default(),
            plateau: PlateauParams::default(),
            auto_train: true,
            session_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub session_id: String,
    /// Image source; its tick rate is the session tick rate.
    pub phantom: PhantomConfig,
    /// Block-average factor applied to every frame, 1 = full resolution.
    pub decimation: usize,
    pub calibration_s: f64,
    pub stall_timeout_s: f64,
    pub training: TrainingConfig,
    pub task: TaskConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_id: "session".into(),
            phantom: PhantomConfig::default(),
            decimation: 1,
            calibration_s: 6.0,
            stall_timeout_s: 1.0,
            training: TrainingConfig::default(),
            task: TaskConfig::extended(),
        }
    }
}

impl SessionConfig {
    pub fn tick_rate_hz(&self) -> f64 {
        self.phantom.tick_rate_hz
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.session_id.is_empty() {
            return Err("session_id must not be empty".into());
        }
        let rate = self.tick_rate_hz();
        if !(rate.is_finite() && rate > 0.0) {
            return Err(format!("tick rate {rate} must be positive"));
        }
        let (w, h) = (self.phantom.width, self.phantom.height);
        if self.decimation == 0 || self.decimation > w.min(h) {
            return Err(format!("decimation {} does not fit {w}x{h} frames", self.decimation));
        }
        if !(self.calibration_s.is_finite() && (self.calibration_s * rate).round() >= 2.0) {
            return Err("calibration must span at least two ticks".into());
        }
        if !(self.stall_timeout_s.is_finite() && self.stall_timeout_s > 0.0) {
            return Err("stall_timeout_s must be positive".into());
        }
        if self.phantom.motions.iter().any(|m| m.is_rest) {
            return Err("phantom motions must not include the rest class".into());
        }
        self.training.schedule.validate().map_err(|e| e.to_string())?;
        self.training.plateau.validate().map_err(|e| e.to_string())?;
        self.task.validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        protocol_version: u32,
        #[serde(default)]
        client: Option<String>,
    },
    ConfigureSession {
        config: SessionConfig,
    },
    StartTraining {
        motion: String,
    },
    SelectMotion {
        motion: String,
    },
    StartCalibration,
    StartTask,
    ActivationInput {
        a: f64,
        #[serde(default)]
        motion: Option<String>,
    },
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateName {
    Idle,
    Ready,
    Training,
    Calibrating,
    Task,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickPhase {
    Training,
    Calibration,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    ProtocolViolation,
    InvalidConfig,
    InvalidInput,
    UnknownMotion,
    NotTrained,
    NotCalibrated,
    PlateauNotFound,
    TrainingFailed,
    DegenerateCalibration,
    BoundCollapse,
    InputStall,
    Internal,
}

/// One control tick as seen by the client. Fields that do not apply to the
/// current phase are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickMessage {
    pub tick: u64,
    pub t: f64,
    pub phase: TickPhase,
    pub motion: String,
    /// Metronome cue during training.
    pub cue: Option<PhaseKind>,
    /// Distance from the rest reference during training.
    pub distance: Option<f64>,
    pub c: Option<f64>,
    pub l: Option<f64>,
    pub u: Option<f64>,
    pub p: Option<f64>,
    /// Task target, or the guided completion profile during calibration.
    pub target: Option<f64>,
    /// Band half-width as a fraction of the range.
    pub band_q: Option<f64>,
    pub trial: Option<usize>,
    pub time_remaining: Option<f64>,
    pub stall: bool,
    /// The frame was unusable and the previous sample was repeated.
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    SessionState {
        state: StateName,
        tick: u64,
        motion: Option<String>,
        #[serde(default)]
        detail: Option<String>,
    },
    Tick(TickMessage),
    TrialResult {
        result: TrialRecordSummary,
    },
    SessionMetrics {
        metrics: SessionMetrics,
        fitts: Option<FittsAnalysis>,
    },
    Error {
        code: ErrorCode,
        message: String,
        fatal: bool,
    },
}

impl ServerMessage {
    fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::Error {
            code,
            message: message.into(),
            fatal: false,
        }
    }
}

/// Session log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Received {
        tick: u64,
        message: ClientMessage,
    },
    /// A line that did not parse as a client message.
    Rejected {
        tick: u64,
        line: String,
    },
    Sent {
        tick: u64,
        message: ServerMessage,
    },
    Trained {
        tick: u64,
        motion: String,
        entries: usize,
    },
    Calibrated {
        tick: u64,
        motion: String,
        lower: f64,
        upper: f64,
        samples: usize,
    },
    TaskStarted {
        tick: u64,
        motion: String,
        config: TaskConfig,
        schedule: TargetSchedule,
    },
    TrialRestarted {
        tick: u64,
        t: f64,
    },
    Closed {
        tick: u64,
    },
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Storage(#[from] StorageError),
}

pub enum LogSink {
    Discard,
    Memory(Vec<LogEvent>),
    File(JsonlWriter),
}

impl LogSink {
    pub fn file(path: &Path) -> Result<Self, StorageError> {
        Ok(Self::File(JsonlWriter::create(path)?))
    }
}

/// Guided calibration profile over the fraction `x` of the calibration
/// window: rest, ramp up, hold completion, ramp down, rest.
pub fn calibration_guide(x: f64) -> f64 {
    let s = x * 6.0;
    if s < 1.0 {
        0.0
    } else if s < 2.0 {
        s - 1.0
    } else if s < 4.0 {
        1.0
    } else if s < 5.0 {
        5.0 - s
    } else {
        0.0
    }
}

struct TrainingRun {
    motion: MotionClass,
    frames: Vec<Frame>,
    total: usize,
}

struct CalibrationRun {
    motion: String,
    reference: MotionReference,
    samples: Vec<f64>,
    elapsed: usize,
    total: usize,
}

struct TaskBlock {
    controller: ProportionalController,
    runner: TaskRunner,
    restart_pending: bool,
}

enum Mode {
    Idle,
    Ready,
    Training(TrainingRun),
    Calibrating(CalibrationRun),
    Task(TaskBlock),
    Done,
    Aborted,
}

pub struct Session {
    mode: Mode,
    hello: bool,
    cfg: Option<SessionConfig>,
    phantom: Option<Phantom>,
    db: Option<TrainingDatabase>,
    selected: Option<String>,
    bounds: BTreeMap<String, BoundState>,
    suspended: Option<TaskBlock>,
    records: Vec<TrialRecord>,
    activation: f64,
    last_input: u64,
    stalled: bool,
    tick: u64,
    log: LogSink,
    log_error: Option<StorageError>,
}

impl Session {
    pub fn new(log: LogSink) -> Self {
        Self {
            mode: Mode::Idle,
            hello: false,
            cfg: None,
            phantom: None,
            db: None,
            selected: None,
            bounds: BTreeMap::new(),
            suspended: None,
            records: Vec::new(),
            activation: 0.0,
            last_input: 0,
            stalled: false,
            tick: 0,
            log,
            log_error: None,
        }
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn config(&self) -> Option<&SessionConfig> {
        self.cfg.as_ref()
    }

    pub fn database(&self) -> Option<&TrainingDatabase> {
        self.db.as_ref()
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn state(&self) -> StateName {
        match self.mode {
            Mode::Idle => StateName::Idle,
            Mode::Ready => StateName::Ready,
            Mode::Training(_) => StateName::Training,
            Mode::Calibrating(_) => StateName::Calibrating,
            Mode::Task(_) => StateName::Task,
            Mode::Done => StateName::Done,
            Mode::Aborted => StateName::Aborted,
        }
    }

    /// Current state without logging it; used for transport heartbeats.
    pub fn state_message(&self) -> ServerMessage {
        ServerMessage::SessionState {
            state: self.state(),
            tick: self.tick,
            motion: self.selected.clone(),
            detail: None,
        }
    }

    /// Events recorded so far when logging to memory.
    pub fn memory_log(&self) -> Option<&[LogEvent]> {
        match &self.log {
            LogSink::Memory(v) => Some(v),
            _ => None,
        }
    }

    fn record(&mut self, event: LogEvent) {
        match &mut self.log {
            LogSink::Discard => {}
            LogSink::Memory(v) => v.push(event),
            LogSink::File(w) => {
                if let Err(e) = w.append(&event) {
                    if self.log_error.is_none() {
                        log::error!("session log write failed: {e}");
                        self.log_error = Some(e);
                    }
                }
            }
        }
    }

    fn emit(&mut self, out: &mut Vec<ServerMessage>, message: ServerMessage) {
        self.record(LogEvent::Sent {
            tick: self.tick,
            message: message.clone(),
        });
        out.push(message);
    }

    fn transition(&mut self, out: &mut Vec<ServerMessage>, mode: Mode, detail: Option<String>) {
        self.mode = mode;
        let message = ServerMessage::SessionState {
            state: self.state(),
            tick: self.tick,
            motion: self.selected.clone(),
            detail,
        };
        self.emit(out, message);
    }

    fn violation(&mut self, out: &mut Vec<ServerMessage>, message: String) {
        log::warn!("protocol violation at tick {}: {message}", self.tick);
        self.emit(
            out,
            ServerMessage::Error {
                code: ErrorCode::ProtocolViolation,
                message,
                fatal: true,
            },
        );
        self.abort(out);
    }

    fn abort(&mut self, out: &mut Vec<ServerMessage>) {
        if let Mode::Task(block) = &mut self.mode {
            block.runner.abort();
            let finished = block.runner.records().to_vec();
            self.records.extend(finished);
        } else if let Some(mut block) = self.suspended.take() {
            block.runner.abort();
            self.records.extend(block.runner.records().to_vec());
        }
        self.transition(out, Mode::Aborted, None);
        self.emit_metrics(out);
    }

    fn emit_metrics(&mut self, out: &mut Vec<ServerMessage>) {
        let Some(cfg) = self.cfg.as_ref().map(|c| c.task.clone()) else {
            return;
        };
        if self.records.is_empty() {
            return;
        }
        match compute_metrics(&self.records, &cfg) {
            Ok(metrics) => {
                let fitts = fitts_analysis(&self.records, &cfg).ok();
                self.emit(out, ServerMessage::SessionMetrics { metrics, fitts });
            }
            Err(e) => self.emit(out, ServerMessage::error(ErrorCode::Internal, e.to_string())),
        }
    }

    /// Parses and applies one wire line. Anything that does not parse is a
    /// protocol violation.
    pub fn handle_line(&mut self, line: &str) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(line) {
            Ok(message) => self.handle(message),
            Err(e) => {
                self.record(LogEvent::Rejected {
                    tick: self.tick,
                    line: line.to_string(),
                });
                let mut out = Vec::new();
                if !matches!(self.mode, Mode::Aborted) {
                    self.violation(&mut out, format!("unparseable message: {e}"));
                }
                out
            }
        }
    }

    pub fn handle(&mut self, message: ClientMessage) -> Vec<ServerMessage> {
        self.record(LogEvent::Received {
            tick: self.tick,
            message: message.clone(),
        });
        let mut out = Vec::new();
        if matches!(self.mode, Mode::Aborted) {
            return out;
        }
        if !self.hello && !matches!(message, ClientMessage::Hello { .. }) {
            self.violation(&mut out, "first message must be hello".into());
            return out;
        }
        match message {
            ClientMessage::Hello { protocol_version, .. } => {
                if self.hello {
                    self.violation(&mut out, "duplicate hello".into());
                } else if protocol_version != PROTOCOL_VERSION {
                    self.violation(
                        &mut out,
                        format!("protocol version {protocol_version} unsupported, expected {PROTOCOL_VERSION}"),
                    );
                } else {
                    self.hello = true;
                    self.transition(&mut out, Mode::Idle, None);
                }
            }
            ClientMessage::ConfigureSession { config } => {
                if !matches!(self.mode, Mode::Idle | Mode::Ready) || !self.records.is_empty() {
                    self.violation(&mut out, "configure_session is only allowed before any task".into());
                } else {
                    self.configure(&mut out, config);
                }
            }
            ClientMessage::StartTraining { motion } => {
                if !self.is_idle_ready() {
                    self.violation(&mut out, "start_training outside ready state".into());
                } else {
                    self.start_training(&mut out, &motion);
                }
            }
            ClientMessage::SelectMotion { motion } => {
                if !self.is_idle_ready() {
                    self.violation(&mut out, "select_motion outside ready state".into());
                } else if self.suspended.is_some() {
                    self.violation(&mut out, "select_motion while a task awaits recalibration".into());
                } else if !self.knows_motion(&motion) {
                    self.emit(&mut out, ServerMessage::error(ErrorCode::UnknownMotion, format!("unknown motion {motion:?}")));
                } else {
                    self.selected = Some(motion);
                    let mode = std::mem::replace(&mut self.mode, Mode::Idle);
                    self.transition(&mut out, mode, None);
                }
            }
            ClientMessage::StartCalibration => {
                if !self.is_idle_ready() {
                    self.violation(&mut out, "start_calibration outside ready state".into());
                } else {
                    self.start_calibration(&mut out);
                }
            }
            ClientMessage::StartTask => {
                if !self.is_idle_ready() {
                    self.violation(&mut out, "start_task outside ready state".into());
                } else if self.suspended.is_some() {
                    self.violation(&mut out, "start_task while a task awaits recalibration".into());
                } else {
                    self.start_task(&mut out);
                }
            }
            ClientMessage::ActivationInput { a, .. } => {
                if !a.is_finite() {
                    self.emit(&mut out, ServerMessage::error(ErrorCode::InvalidInput, "activation must be finite"));
                } else {
                    self.activation = a.clamp(0.0, 1.0);
                    self.last_input = self.tick;
                    self.stalled = false;
                }
            }
            ClientMessage::Abort => self.abort(&mut out),
        }
        out
    }

    fn is_idle_ready(&self) -> bool {
        self.cfg.is_some() && matches!(self.mode, Mode::Ready | Mode::Done)
    }

    fn knows_motion(&self, motion: &str) -> bool {
        self.cfg
            .as_ref()
            .is_some_and(|c| c.phantom.motions.iter().any(|m| m.id == motion))
    }

    fn prepare(&self, frame: Frame) -> Frame {
        let factor = self.cfg.as_ref().map_or(1, |c| c.decimation);
        if factor == 1 {
            frame
        } else {
            frame.decimate(factor).expect("decimation validated at configure")
        }
    }

    fn configure(&mut self, out: &mut Vec<ServerMessage>, config: SessionConfig) {
        if let Err(e) = config.validate() {
            self.emit(out, ServerMessage::error(ErrorCode::InvalidConfig, e));
            return;
        }
        let phantom = match Phantom::new(config.phantom.clone()) {
            Ok(p) => p,
            Err(e) => {
                self.emit(out, ServerMessage::error(ErrorCode::InvalidConfig, e.to_string()));
                return;
            }
        };
        self.phantom = Some(phantom);
        self.db = None;
        self.bounds.clear();
        self.selected = None;
        self.cfg = Some(config.clone());

        let mut detail = None;
        if config.training.auto_train {
            let mut db = TrainingDatabase::new(MotionClass::rest());
            for (k, motion) in config.phantom.motions.iter().enumerate() {
                let seed = mix_seed(config.training.session_seed, k as u64);
                let phantom = self.phantom.as_ref().expect("set above");
                let frames = match synth_training_session(phantom, &motion.id, &config.training.schedule, seed) {
                    Ok(f) => f.into_iter().map(|f| self.prepare(f)).collect::<Vec<_>>(),
                    Err(e) => {
                        self.emit(out, ServerMessage::error(ErrorCode::TrainingFailed, e.to_string()));
                        continue;
                    }
                };
                let session_id = format!("{}:auto:{}", config.session_id, motion.id);
                match self.train(&frames, &session_id, motion, db.clone()) {
                    Ok(next) => db = next,
                    Err(message) => self.emit(out, message),
                }
            }
            detail = Some(format!("{} training entries", db.len()));
            self.db = Some(db);
        }
        self.transition(out, Mode::Ready, detail);
    }

    fn train(
        &mut self,
        frames: &[Frame],
        session_id: &str,
        motion: &MotionClass,
        existing: TrainingDatabase,
    ) -> Result<TrainingDatabase, ServerMessage> {
        let cfg = self.cfg.as_ref().expect("configured");
        let session = TrainingSession {
            session_id,
            schedule: cfg.training.schedule,
            tick_rate_hz: cfg.tick_rate_hz(),
            plateau: cfg.training.plateau,
        };
        match build_database(frames, &session, motion, existing) {
            Ok(db) => {
                self.record(LogEvent::Trained {
                    tick: self.tick,
                    motion: motion.id.clone(),
                    entries: db.entries(&motion.id).len(),
                });
                Ok(db)
            }
            Err(e @ crate::training::TrainingError::PlateauNotFound { .. }) => {
                Err(ServerMessage::error(ErrorCode::PlateauNotFound, format!("{}: {e}", motion.id)))
            }
            Err(e) => Err(ServerMessage::error(ErrorCode::TrainingFailed, format!("{}: {e}", motion.id))),
        }
    }

    fn start_training(&mut self, out: &mut Vec<ServerMessage>, motion: &str) {
        let cfg = self.cfg.as_ref().expect("configured");
        let Some(class) = cfg.phantom.motions.iter().find(|m| m.id == motion).cloned() else {
            self.emit(out, ServerMessage::error(ErrorCode::UnknownMotion, format!("unknown motion {motion:?}")));
            return;
        };
        let total = cfg.training.schedule.frame_count(cfg.tick_rate_hz());
        self.selected = Some(motion.to_string());
        self.last_input = self.tick;
        self.stalled = false;
        self.transition(
            out,
            Mode::Training(TrainingRun {
                motion: class,
                frames: Vec::with_capacity(total),
                total,
            }),
            None,
        );
    }

    fn start_calibration(&mut self, out: &mut Vec<ServerMessage>) {
        let Some(motion) = self.selected.clone() else {
            self.emit(out, ServerMessage::error(ErrorCode::UnknownMotion, "no motion selected"));
            return;
        };
        let reference = match self.db.as_ref().map(|db| MotionReference::new(db, &motion)) {
            Some(Ok(r)) => r,
            _ => {
                self.emit(out, ServerMessage::error(ErrorCode::NotTrained, format!("motion {motion:?} has no training entries")));
                return;
            }
        };
        let cfg = self.cfg.as_ref().expect("configured");
        let total = (cfg.calibration_s * cfg.tick_rate_hz()).round() as usize;
        self.enter_calibration(out, motion, reference, total);
    }

    fn enter_calibration(&mut self, out: &mut Vec<ServerMessage>, motion: String, reference: MotionReference, total: usize) {
        self.last_input = self.tick;
        self.stalled = false;
        self.transition(
            out,
            Mode::Calibrating(CalibrationRun {
                motion,
                reference,
                samples: Vec::with_capacity(total),
                elapsed: 0,
                total,
            }),
            None,
        );
    }

    fn start_task(&mut self, out: &mut Vec<ServerMessage>) {
        let Some(motion) = self.selected.clone() else {
            self.emit(out, ServerMessage::error(ErrorCode::UnknownMotion, "no motion selected"));
            return;
        };
        let Some(bounds) = self.bounds.get(&motion).copied() else {
            self.emit(out, ServerMessage::error(ErrorCode::NotCalibrated, format!("motion {motion:?} is not calibrated")));
            return;
        };
        let reference = match self.db.as_ref().map(|db| MotionReference::new(db, &motion)) {
            Some(Ok(r)) => r,
            _ => {
                self.emit(out, ServerMessage::error(ErrorCode::NotTrained, format!("motion {motion:?} has no training entries")));
                return;
            }
        };
        let task = self.cfg.as_ref().expect("configured").task.clone();
        let built = generate_schedule(&task).and_then(|schedule| {
            let runner = TaskRunner::new(task.clone(), schedule.clone(), &motion)?;
            Ok((schedule, runner))
        });
        let (schedule, runner) = match built {
            Ok(v) => v,
            Err(e) => {
                self.emit(out, ServerMessage::error(ErrorCode::InvalidConfig, e.to_string()));
                return;
            }
        };
        let controller = ProportionalController::new(reference, bounds).expect("calibrated bounds are initialized");
        self.record(LogEvent::TaskStarted {
            tick: self.tick,
            motion,
            config: task,
            schedule,
        });
        self.last_input = self.tick;
        self.stalled = false;
        self.transition(
            out,
            Mode::Task(TaskBlock {
                controller,
                runner,
                restart_pending: false,
            }),
            None,
        );
    }

    fn check_stall(&mut self, out: &mut Vec<ServerMessage>) {
        let cfg = self.cfg.as_ref().expect("configured");
        let limit = cfg.stall_timeout_s * cfg.tick_rate_hz();
        if !self.stalled && (self.tick - self.last_input) as f64 > limit {
            self.stalled = true;
            let message = format!("no activation input for {:.3} s", (self.tick - self.last_input) as f64 / cfg.tick_rate_hz());
            self.emit(out, ServerMessage::error(ErrorCode::InputStall, message));
        }
    }

    fn render(&self, motion: &str) -> Frame {
        let phantom = self.phantom.as_ref().expect("configured");
        let frame = phantom
            .render_frame(motion, self.activation, self.tick)
            .expect("motion validated and activation clamped");
        self.prepare(frame)
    }

    /// Processes one tick and moves the clock forward.
    pub fn advance(&mut self) -> Vec<ServerMessage> {
        let mut out = Vec::new();
        match std::mem::replace(&mut self.mode, Mode::Idle) {
            Mode::Training(run) => {
                self.check_stall(&mut out);
                self.training_tick(&mut out, run);
            }
            Mode::Calibrating(run) => {
                self.check_stall(&mut out);
                self.calibration_tick(&mut out, run);
            }
            Mode::Task(block) => {
                self.check_stall(&mut out);
                self.task_tick(&mut out, block);
            }
            other => self.mode = other,
        }
        self.tick += 1;
        out
    }

    fn base_tick(&self, phase: TickPhase, motion: &str) -> TickMessage {
        let rate = self.cfg.as_ref().expect("configured").tick_rate_hz();
        TickMessage {
            tick: self.tick,
            t: self.tick as f64 / rate,
            phase,
            motion: motion.to_string(),
            cue: None,
            distance: None,
            c: None,
            l: None,
            u: None,
            p: None,
            target: None,
            band_q: None,
            trial: None,
            time_remaining: None,
            stall: self.stalled,
            held: false,
        }
    }

    fn training_tick(&mut self, out: &mut Vec<ServerMessage>, mut run: TrainingRun) {
        let cfg = self.cfg.as_ref().expect("configured");
        let rate = cfg.tick_rate_hz();
        let schedule = cfg.training.schedule;
        let session_id = cfg.session_id.clone();
        let i = run.frames.len();
        let frame = self.render(&run.motion.id).with_position(i as u64, i as f64 / rate);
        let distance = distance_from_rest(&frame, run.frames.first().unwrap_or(&frame)).ok();
        run.frames.push(frame);
        let mut msg = self.base_tick(TickPhase::Training, &run.motion.id);
        msg.cue = schedule.phase_at(i, rate).map(|p| p.kind);
        msg.distance = distance;
        msg.time_remaining = Some((run.total - run.frames.len()) as f64 / rate);
        self.emit(out, ServerMessage::Tick(msg));

        if run.frames.len() < run.total {
            self.mode = Mode::Training(run);
            return;
        }
        let existing = self
            .db
            .clone()
            .unwrap_or_else(|| TrainingDatabase::new(MotionClass::rest()));
        let session_id = format!("{}:live:{}:{}", session_id, run.motion.id, self.tick);
        match self.train(&run.frames, &session_id, &run.motion, existing) {
            Ok(db) => {
                let detail = format!("{} entries for {}", db.entries(&run.motion.id).len(), run.motion.id);
                self.db = Some(db);
                self.bounds.remove(&run.motion.id);
                self.transition(out, Mode::Ready, Some(detail));
            }
            Err(message) => {
                self.emit(out, message);
                self.transition(out, Mode::Ready, None);
            }
        }
    }

    fn calibration_tick(&mut self, out: &mut Vec<ServerMessage>, mut run: CalibrationRun) {
        let rate = self.cfg.as_ref().expect("configured").tick_rate_hz();
        let frame = self.render(&run.motion);
        let c = run.reference.mean_correlation(&frame).ok();
        if let Some(c) = c {
            run.samples.push(c);
        }
        let mut msg = self.base_tick(TickPhase::Calibration, &run.motion);
        msg.c = c;
        msg.held = c.is_none();
        msg.target = Some(calibration_guide(run.elapsed as f64 / run.total as f64));
        run.elapsed += 1;
        msg.time_remaining = Some((run.total - run.elapsed) as f64 / rate);
        self.emit(out, ServerMessage::Tick(msg));

        if run.elapsed < run.total {
            self.mode = Mode::Calibrating(run);
            return;
        }
        match calibrate(&run.samples) {
            Ok(bounds) => {
                self.record(LogEvent::Calibrated {
                    tick: self.tick,
                    motion: run.motion.clone(),
                    lower: bounds.lower,
                    upper: bounds.upper,
                    samples: run.samples.len(),
                });
                self.bounds.insert(run.motion.clone(), bounds);
                match self.suspended.take() {
                    Some(mut block) => {
                        block.controller =
                            ProportionalController::new(run.reference, bounds).expect("calibrated bounds");
                        block.restart_pending = true;
                        self.last_input = self.tick;
                        self.transition(out, Mode::Task(block), Some("task resumed".into()));
                    }
                    None => self.transition(out, Mode::Ready, Some("calibrated".into())),
                }
            }
            Err(e) => {
                self.emit(out, ServerMessage::error(ErrorCode::DegenerateCalibration, e.to_string()));
                self.transition(out, Mode::Ready, None);
            }
        }
    }

    fn task_tick(&mut self, out: &mut Vec<ServerMessage>, mut block: TaskBlock) {
        let cfg = self.cfg.as_ref().expect("configured");
        let band = cfg.task.band();
        let rate = cfg.tick_rate_hz();
        let calibration_ticks = (cfg.calibration_s * rate).round() as usize;
        let t = self.tick as f64 / rate;
        let motion = block.runner.motion().to_string();
        let frame = self.render(&motion);
        let sample = match block.controller.tick(self.tick, &frame) {
            Ok(s) => s,
            Err(ControlError::BoundCollapse { gap }) => {
                self.emit(
                    out,
                    ServerMessage::error(ErrorCode::BoundCollapse, format!("bound gap {gap:.3e}, recalibrating")),
                );
                let reference = block.controller.reference().clone();
                self.suspended = Some(block);
                self.enter_calibration(out, motion, reference, calibration_ticks);
                return;
            }
            Err(e) => {
                self.emit(out, ServerMessage::error(ErrorCode::Internal, e.to_string()));
                self.mode = Mode::Task(block);
                return;
            }
        };
        if block.restart_pending {
            block.restart_pending = false;
            block.runner.restart_current(t);
            self.record(LogEvent::TrialRestarted { tick: self.tick, t });
        }
        let events = block.runner.step(t, sample.p);

        let mut msg = self.base_tick(TickPhase::Task, &motion);
        msg.c = Some(sample.c);
        msg.l = Some(sample.l);
        msg.u = Some(sample.u);
        msg.p = Some(sample.p);
        msg.held = sample.held;
        msg.band_q = Some(band);
        if let Some(active) = block.runner.active() {
            msg.target = Some(active.record().target);
            msg.trial = Some(active.record().trial);
            let remaining = active.deadline() - t;
            msg.time_remaining = remaining.is_finite().then_some(remaining.max(0.0));
        }
        self.emit(out, ServerMessage::Tick(msg));

        let mut done = false;
        for event in events {
            match event {
                TaskEvent::TrialFinished(record) => {
                    self.emit(
                        out,
                        ServerMessage::TrialResult {
                            result: TrialRecordSummary::from(&record),
                        },
                    );
                }
                TaskEvent::Done => done = true,
                TaskEvent::TrialStarted { .. } => {}
            }
        }
        if done {
            self.records.extend(block.runner.records().iter().cloned());
            self.emit_metrics(out);
            self.transition(out, Mode::Done, None);
        } else {
            self.mode = Mode::Task(block);
        }
    }

    /// Flushes the log. File logs are renamed into place here.
    pub fn close(mut self) -> Result<LogSink, SessionError> {
        self.record(LogEvent::Closed { tick: self.tick });
        if let Some(e) = self.log_error.take() {
            return Err(e.into());
        }
        match self.log {
            LogSink::File(w) => {
                w.finish()?;
                Ok(LogSink::Discard)
            }
            other => Ok(other),
        }
    }
}

/// Feeds the client inputs of a recorded log into a fresh session with the
/// same tick timing. The result's log equals the original when the session
/// is deterministic.
pub fn replay_inputs(events: &[LogEvent], log: LogSink) -> Result<Session, SessionError> {
    let mut session = Session::new(log);
    let mut end = 0;
    for event in events {
        match event {
            LogEvent::Received { tick, message } => {
                while session.tick() < *tick {
                    session.advance();
                }
                session.handle(message.clone());
            }
            LogEvent::Rejected { tick, line } => {
                while session.tick() < *tick {
                    session.advance();
                }
                session.handle_line(line);
            }
            LogEvent::Closed { tick } => end = *tick,
            _ => {}
        }
    }
    while session.tick() < end {
        session.advance();
    }
    Ok(session)
}
