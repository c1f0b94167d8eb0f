//! `sonomyo`: headless entry points for synthesis, training, cross-validation,
//! scripted task runs, the session server and offline reports.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use sonomyo_core::classify::loocv;
use sonomyo_core::report::{replay_log, run_scripted_session, ReportError, ScriptedRun};
use sonomyo_core::service::{Server, ServiceConfig};
use sonomyo_core::session::{LogEvent, LogSink, SessionConfig};
use sonomyo_core::storage::{
    load_database, read_jsonl, read_sequence, save_database, write_atomic, write_sequence, SequenceMeta,
    StorageError,
};
use sonomyo_core::synthsim::{mix_seed, synth_training_session, Phantom, RestJitter, ScriptedSubject};
use sonomyo_core::taskengine::{fitts_csv, summary_csv, trials_csv, FittsAnalysis, HoldMode, SessionMetrics, TaskConfig};
use sonomyo_core::training::{build_database, MotionClass, TrainingDatabase, TrainingSession};

const DEFAULT_OUT: &str = "sonomyo-out";

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "sonomyo", version, about = "Sonomyographic proportional control engine")]
struct Cli {
    /// Master seed; every randomized component derives its seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with `seed`, `out`, `[session]` and `[subject]` tables.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", env = "SONOMYO_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write phantom training sessions as frame sequences.
    Synth(SynthArgs),
    /// Build a training database from frame sequences and report LOOCV accuracy.
    Train(TrainArgs),
    /// Leave-one-out accuracy and confusion matrices, with and without rest.
    Crossval(CrossvalArgs),
    /// Run a full task session with the scripted subject.
    Run(RunArgs),
    /// Serve sessions over TCP.
    Serve(ServeArgs),
    /// Recompute metrics and the Fitts analysis from a session log.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
struct PhantomArgs {
    /// Per-pixel noise standard deviation of synthetic frames.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Frame and tick rate in Hz.
    #[arg(long)]
    tick_rate: Option<f64>,
    /// Alternate rest posture on some rest holds.
    #[arg(long)]
    rest_jitter: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    phantom: PhantomArgs,
    /// Motions to synthesize (comma separated); default all.
    #[arg(long, value_delimiter = ',')]
    motions: Vec<String>,
    /// Sessions per motion.
    #[arg(long, default_value_t = 1)]
    sessions: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Frame sequences (.smgf) with a motion label in their sidecar.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Database directory; default `<out>/db`.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Block-average factor applied before training.
    #[arg(long)]
    decimation: Option<usize>,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    /// Database directory; when omitted the phantom fixture is trained in memory.
    #[arg(long)]
    db: Option<PathBuf>,
    #[command(flatten)]
    phantom: PhantomArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HoldModeArg {
    OnEntry,
    OnPresentation,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    phantom: PhantomArgs,
    /// Number of target levels.
    #[arg(long)]
    n_positions: Option<u32>,
    /// Trials per level.
    #[arg(long)]
    trials: Option<u32>,
    /// Hold time in seconds.
    #[arg(long)]
    hold_time: Option<f64>,
    /// Trial timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long, value_enum)]
    hold_mode: Option<HoldModeArg>,
    /// Motions to run in order (comma separated), or `all`; default the first motion.
    #[arg(long, value_delimiter = ',')]
    motions: Vec<String>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    /// Simulated seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    #[arg(long, default_value_t = 1.0)]
    heartbeat: f64,
    /// Exit after serving this many connections.
    #[arg(long)]
    max_connections: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Session log (`session.jsonl`) written by `run` or `serve`.
    log: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    session: SessionConfig,
    subject: ScriptedSubject,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Io(_) => "io",
            Failure::Data(_) => "data",
            Failure::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl From<StorageError> for Failure {
    fn from(e: StorageError) -> Self {
        match e {
            StorageError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Session(inner) => Failure::Io(inner.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// Resolved settings shared by all subcommands.
struct Context {
    out: PathBuf,
    session: SessionConfig,
    subject: ScriptedSubject,
}

fn apply_seed(session: &mut SessionConfig, subject: &mut ScriptedSubject, seed: u64) {
    session.phantom.template_seed = mix_seed(seed, 1);
    session.phantom.noise_seed = mix_seed(seed, 2);
    session.training.session_seed = mix_seed(seed, 3);
    session.task.rng_seed = mix_seed(seed, 4);
    subject.seed = mix_seed(seed, 5);
}

fn apply_phantom_args(session: &mut SessionConfig, args: &PhantomArgs) {
    if let Some(s) = args.noise_sigma {
        session.phantom.noise_sigma = s;
    }
    if let Some(r) = args.tick_rate {
        session.phantom.tick_rate_hz = r;
    }
    if args.rest_jitter {
        session.phantom.rest_jitter = Some(RestJitter::default());
    }
}

fn load_context(cli: &Cli) -> Result<Context, Failure> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| Failure::Usage(format!("config {}: {}", path.display(), e.message())))?
        }
        None => FileConfig::default(),
    };
    let mut session = file.session;
    let mut subject = file.subject;
    if let Some(seed) = cli.seed.or(file.seed) {
        apply_seed(&mut session, &mut subject, seed);
    }
    let out = cli
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok(Context { out, session, subject })
}

fn validate(ctx: &Context) -> Result<(), Failure> {
    ctx.session.validate().map_err(Failure::Usage)?;
    ctx.subject.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn motion_class(cfg: &SessionConfig, id: &str) -> MotionClass {
    cfg.phantom
        .motions
        .iter()
        .find(|m| m.id == id)
        .cloned()
        .unwrap_or_else(|| MotionClass::motion(id, id))
}

fn check_motions(cfg: &SessionConfig, motions: &[String]) -> Result<(), Failure> {
    match motions.iter().find(|m| !cfg.phantom.motions.iter().any(|c| &c.id == *m)) {
        Some(m) => Err(Failure::Usage(format!("unknown motion {m:?}"))),
        None => Ok(()),
    }
}

/// Session seed for session `s` of the `k`-th configured motion; session 0
/// matches the one trained at configure time.
fn synth_session_seed(cfg: &SessionConfig, k: usize, s: usize) -> u64 {
    mix_seed(cfg.training.session_seed, (s * cfg.phantom.motions.len() + k) as u64)
}

fn prepare_frames(
    frames: Vec<sonomyo_core::Frame>,
    decimation: usize,
) -> Result<Vec<sonomyo_core::Frame>, Failure> {
    if decimation == 1 {
        return Ok(frames);
    }
    frames
        .into_iter()
        .map(|f| f.decimate(decimation).map_err(|e| Failure::Usage(e.to_string())))
        .collect()
}

/// Trains every configured motion from one phantom session each.
fn phantom_database(cfg: &SessionConfig) -> Result<TrainingDatabase, Failure> {
    let phantom = Phantom::new(cfg.phantom.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut db = TrainingDatabase::new(MotionClass::rest());
    for (k, motion) in cfg.phantom.motions.iter().enumerate() {
        let frames = synth_training_session(&phantom, &motion.id, &cfg.training.schedule, synth_session_seed(cfg, k, 0))
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        let frames = prepare_frames(frames, cfg.decimation)?;
        let session_id = format!("{}:phantom:{}", cfg.session_id, motion.id);
        let session = TrainingSession {
            session_id: &session_id,
            schedule: cfg.training.schedule,
            tick_rate_hz: cfg.tick_rate_hz(),
            plateau: cfg.training.plateau,
        };
        db = build_database(&frames, &session, motion, db).map_err(|e| Failure::Runtime(format!("{}: {e}", motion.id)))?;
    }
    Ok(db)
}

fn print_loocv(db: &TrainingDatabase, with_matrices: bool) -> Result<(), Failure> {
    let mut stdout = std::io::stdout().lock();
    for (label, include_rest) in [("exclude_rest", false), ("include_rest", true)] {
        let cv = loocv(db, include_rest).map_err(|e| Failure::Runtime(e.to_string()))?;
        let _ = writeln!(stdout, "{label}_accuracy_pct={:.2}", cv.accuracy);
        if with_matrices {
            let _ = writeln!(stdout, "# confusion {label}");
            let _ = write!(stdout, "{}", cv.matrix.to_csv());
        }
    }
    Ok(())
}

fn cmd_synth(ctx: &Context, args: &SynthArgs) -> Result<(), Failure> {
    check_motions(&ctx.session, &args.motions)?;
    if args.sessions == 0 {
        return Err(Failure::Usage("--sessions must be at least 1".into()));
    }
    let cfg = &ctx.session;
    let phantom = Phantom::new(cfg.phantom.clone()).map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = ctx.out.join("synth");
    ensure_dir(&dir)?;
    for (k, motion) in cfg.phantom.motions.iter().enumerate() {
        if !args.motions.is_empty() && !args.motions.contains(&motion.id) {
            continue;
        }
        for s in 0..args.sessions {
            let seed = synth_session_seed(cfg, k, s);
            let frames = synth_training_session(&phantom, &motion.id, &cfg.training.schedule, seed)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            let session_id = format!("{}-{s}", motion.id);
            let path = dir.join(format!("{session_id}.smgf"));
            let meta = SequenceMeta {
                session_id,
                tick_rate_hz: cfg.tick_rate_hz(),
                motion_labels: vec![motion.id.clone()],
                schedule: Some(cfg.training.schedule),
                provenance: json!({ "source": "phantom", "phantom": cfg.phantom, "session_seed": seed }),
            };
            write_sequence(&path, &frames, &meta)?;
            say!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<(), Failure> {
    let decimation = args.decimation.unwrap_or(ctx.session.decimation);
    if decimation == 0 {
        return Err(Failure::Usage("--decimation must be at least 1".into()));
    }
    let cfg = &ctx.session;
    let mut db = TrainingDatabase::new(MotionClass::rest());
    for path in &args.inputs {
        let seq = read_sequence(path)?;
        let Some(label) = seq.sidecar.motion_labels.first() else {
            return Err(Failure::Data(format!("{}: sidecar has no motion label", path.display())));
        };
        let session = TrainingSession {
            session_id: &seq.sidecar.session_id,
            schedule: seq.sidecar.schedule.unwrap_or(cfg.training.schedule),
            tick_rate_hz: seq.sidecar.tick_rate_hz,
            plateau: cfg.training.plateau,
        };
        let frames = prepare_frames(seq.frames, decimation)?;
        let motion = motion_class(cfg, label);
        db = build_database(&frames, &session, &motion, db)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    let dir = args.db.clone().unwrap_or_else(|| ctx.out.join("db"));
    ensure_dir(&dir)?;
    save_database(&dir, &db)?;
    say!("database={}", dir.display());
    say!("entries={}", db.len());
    print_loocv(&db, false)
}

fn cmd_crossval(ctx: &Context, args: &CrossvalArgs) -> Result<(), Failure> {
    let db = match &args.db {
        Some(dir) => load_database(dir)?,
        None => phantom_database(&ctx.session)?,
    };
    print_loocv(&db, true)
}

fn resolve_motions(cfg: &SessionConfig, requested: &[String]) -> Result<Vec<String>, Failure> {
    if requested.iter().any(|m| m == "all") {
        return Ok(Vec::new());
    }
    if requested.is_empty() {
        let first = cfg.phantom.motions.first().ok_or_else(|| Failure::Usage("no motions configured".into()))?;
        return Ok(vec![first.id.clone()]);
    }
    check_motions(cfg, requested)?;
    Ok(requested.to_vec())
}

fn write_reports(
    dir: &Path,
    metrics: &SessionMetrics,
    fitts: Option<&FittsAnalysis>,
    task: &TaskConfig,
) -> Result<(), Failure> {
    write_atomic(&dir.join("trials.csv"), trials_csv(metrics, task).as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary_csv(metrics).as_bytes())?;
    if let Some(f) = fitts {
        write_atomic(&dir.join("fitts.csv"), fitts_csv(f).as_bytes())?;
    }
    Ok(())
}

fn print_summary(metrics: &SessionMetrics, fitts: Option<&FittsAnalysis>) {
    let o = &metrics.overall;
    say!("trials={}", metrics.trials.len());
    say!("completion_rate_pct={:.2}", o.completion_rate);
    match fitts {
        Some(f) => {
            say!("fitts_slope_s_per_bit={:.6}", f.slope);
            match f.r_squared {
                Some(r2) => say!("fitts_r_squared={r2:.6}"),
                None => say!("fitts_r_squared=undefined"),
            }
        }
        None => say!("fitts=undefined"),
    }
}

fn cmd_run(mut ctx: Context, args: &RunArgs) -> Result<(), Failure> {
    apply_phantom_args(&mut ctx.session, &args.phantom);
    let task = &mut ctx.session.task;
    if let Some(n) = args.n_positions {
        task.n_positions = n;
    }
    if let Some(t) = args.trials {
        task.trials_per_level = t;
    }
    if let Some(h) = args.hold_time {
        task.hold_time_s = h;
    }
    if let Some(t) = args.timeout {
        task.timeout_s = Some(t);
    }
    if let Some(m) = args.hold_mode {
        task.hold_mode = match m {
            HoldModeArg::OnEntry => HoldMode::OnEntry,
            HoldModeArg::OnPresentation => HoldMode::OnPresentation,
        };
    }
    validate(&ctx)?;
    let motions = resolve_motions(&ctx.session, &args.motions)?;

    ensure_dir(&ctx.out)?;
    let log = LogSink::file(&ctx.out.join("session.jsonl"))?;
    let run = ScriptedRun {
        session: ctx.session.clone(),
        subject: ctx.subject,
        motions,
        ..ScriptedRun::default()
    };
    let outcome = run_scripted_session(&run, log)?;
    write_reports(&ctx.out, &outcome.metrics, outcome.fitts.as_ref(), &ctx.session.task)?;
    print_summary(&outcome.metrics, outcome.fitts.as_ref());
    Ok(())
}

fn cmd_report(ctx: &Context, args: &ReportArgs) -> Result<(), Failure> {
    let events: Vec<LogEvent> = read_jsonl(&args.log)?;
    let replay = replay_log(&events).map_err(|e| Failure::Data(format!("{}: {e}", args.log.display())))?;
    ensure_dir(&ctx.out)?;
    write_reports(&ctx.out, &replay.metrics, replay.fitts.as_ref(), &replay.config)?;
    print_summary(&replay.metrics, replay.fitts.as_ref());
    Ok(())
}

fn cmd_serve(ctx: &Context, args: &ServeArgs) -> Result<(), Failure> {
    if !(args.speed.is_finite() && args.speed > 0.0) {
        return Err(Failure::Usage("--speed must be positive".into()));
    }
    if !(args.heartbeat.is_finite() && args.heartbeat > 0.0) {
        return Err(Failure::Usage("--heartbeat must be positive".into()));
    }
    let log_dir = ctx.out.join("sessions");
    ensure_dir(&log_dir)?;
    let server = Server::bind(ServiceConfig {
        addr: args.addr.clone(),
        speed: args.speed,
        heartbeat_s: args.heartbeat,
        log_dir: Some(log_dir),
        max_connections: args.max_connections,
    })
    .map_err(|e| Failure::Io(format!("bind {}: {e}", args.addr)))?;
    let addr = server.local_addr().map_err(|e| Failure::Io(e.to_string()))?;
    say!("listening={addr}");
    let _ = std::io::stdout().flush();
    server.run().map_err(|e| Failure::Io(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let mut ctx = load_context(&cli)?;
    match &cli.command {
        Command::Synth(args) => {
            apply_phantom_args(&mut ctx.session, &args.phantom);
            validate(&ctx)?;
            cmd_synth(&ctx, args)
        }
        Command::Train(args) => {
            validate(&ctx)?;
            cmd_train(&ctx, args)
        }
        Command::Crossval(args) => {
            apply_phantom_args(&mut ctx.session, &args.phantom);
            validate(&ctx)?;
            cmd_crossval(&ctx, args)
        }
        Command::Run(args) => cmd_run(ctx, args),
        Command::Serve(args) => {
            validate(&ctx)?;
            cmd_serve(&ctx, args)
        }
        Command::Report(args) => cmd_report(&ctx, args),
    }
}

fn fail(f: &Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": f.kind(), "message": f.message() }));
    ExitCode::from(f.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail(&Failure::Usage(e.kind().to_string()));
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
