//! Target-holding protocol: schedules, the per-trial hold/timeout state
//! machine, outcome metrics and the Fitts'-law regression.
//!
//! Positions are fractions of the normalized range `[0, 1]`; errors are
//! reported in percent of that range.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack when comparing elapsed time to a deadline, so that tick times
/// computed as `tick / rate` land on whole-second deadlines.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("no trial records")]
    EmptyRecords,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldMode {
    /// Hold timer starts when the cursor first enters the band; trials
    /// without an entry end at the timeout.
    OnEntry,
    /// Hold timer starts at presentation; every trial lasts the hold time.
    OnPresentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_positions: u32,
    pub hold_time_s: f64,
    #[serde(default)]
    pub timeout_s: Option<f64>,
    pub trials_per_level: u32,
    pub hold_mode: HoldMode,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TaskConfig {
    /// Five levels, 15 s holds that start on band entry, 30 s timeout.
    pub fn pilot() -> Self {
        Self {
            n_positions: 5,
            hold_time_s: 15.0,
            timeout_s: Some(30.0),
            trials_per_level: 1,
            hold_mode: HoldMode::OnEntry,
            rng_seed: 0,
        }
    }

    /// Eleven levels, three trials each, 10 s holds from presentation.
    pub fn extended() -> Self {
        Self {
            n_positions: 11,
            hold_time_s: 10.0,
            timeout_s: None,
            trials_per_level: 3,
            hold_mode: HoldMode::OnPresentation,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.n_positions < 2 {
            return Err(TaskError::InvalidConfig(format!(
                "n_positions must be at least 2, got {}",
                self.n_positions
            )));
        }
        if !(self.hold_time_s.is_finite() && self.hold_time_s > 0.0) {
            return Err(TaskError::InvalidConfig("hold_time_s must be positive".into()));
        }
        if self.trials_per_level == 0 {
            return Err(TaskError::InvalidConfig("trials_per_level must be positive".into()));
        }
        match (self.hold_mode, self.timeout_s) {
            (HoldMode::OnEntry, None) => Err(TaskError::InvalidConfig(
                "hold_mode on_entry requires timeout_s".into(),
            )),
            (_, Some(t)) if !(t.is_finite() && t > 0.0) => {
                Err(TaskError::InvalidConfig("timeout_s must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Band half-width as a fraction of the range.
    pub fn band(&self) -> f64 {
        1.0 / (2.0 * (self.n_positions as f64 - 1.0))
    }

    pub fn level_position(&self, level: usize) -> f64 {
        level as f64 / (self.n_positions as f64 - 1.0)
    }
}

/// Half-width of the acceptance band, in percent of the range.
pub fn quantization_bound(n_positions: u32) -> Result<f64, TaskError> {
    if n_positions < 2 {
        return Err(TaskError::InvalidConfig(format!(
            "n_positions must be at least 2, got {n_positions}"
        )));
    }
    Ok(100.0 / (2.0 * (n_positions as f64 - 1.0)))
}

/// Index of difficulty in bits for a move of `distance` into a band of
/// half-width `band` (both fractions of the range).
pub fn index_of_difficulty(distance: f64, band: f64) -> f64 {
    (distance / (2.0 * band.abs()) + 1.0).log2()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSchedule {
    pub n_positions: u32,
    /// Level indices in presentation order.
    pub levels: Vec<usize>,
}

impl TargetSchedule {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn positions(&self) -> Vec<f64> {
        let span = self.n_positions as f64 - 1.0;
        self.levels.iter().map(|&l| l as f64 / span).collect()
    }
}

/// `trials_per_level` shuffled passes, each a permutation of all levels.
pub fn generate_schedule(cfg: &TaskConfig) -> Result<TargetSchedule, TaskError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut levels = Vec::with_capacity((cfg.n_positions * cfg.trials_per_level) as usize);
    for _ in 0..cfg.trials_per_level {
        let mut pass: Vec<usize> = (0..cfg.n_positions as usize).collect();
        pass.shuffle(&mut rng);
        levels.extend(pass);
    }
    Ok(TargetSchedule {
        n_positions: cfg.n_positions,
        levels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub motion: String,
    pub level: usize,
    pub target: f64,
    /// Level of the preceding target; `None` for the first trial of a block,
    /// which starts from rest.
    pub previous_level: Option<usize>,
    pub presented_at: f64,
    pub ended_at: f64,
    pub first_entry_at: Option<f64>,
    pub cursor_trace: Vec<(f64, f64)>,
    pub acquired: bool,
    pub position_error: Option<f64>,
    pub stability_error: Option<f64>,
    pub movement_time: Option<f64>,
}

fn in_band(p: f64, target: f64, band: f64) -> bool {
    (p - target).abs() <= band
}

/// Signed mean and population standard deviation of `p - target` over the
/// samples at or after `from`, both in percent.
pub fn window_errors(trace: &[(f64, f64)], from: f64, target: f64) -> Option<(f64, f64)> {
    let window: Vec<f64> = trace
        .iter()
        .filter(|(t, _)| *t >= from)
        .map(|(_, p)| p - target)
        .collect();
    if window.is_empty() {
        return None;
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Some((mean * 100.0, var.sqrt() * 100.0))
}

impl TrialRecord {
    /// Derives acquisition, movement time and errors from the trace alone.
    pub fn finalize(&mut self, band: f64) {
        self.first_entry_at = self
            .cursor_trace
            .iter()
            .find(|(_, p)| in_band(*p, self.target, band))
            .map(|(t, _)| *t);
        self.acquired = self.first_entry_at.is_some();
        self.movement_time = self.first_entry_at.map(|t| t - self.presented_at);
        let errors = self
            .first_entry_at
            .and_then(|from| window_errors(&self.cursor_trace, from, self.target));
        self.position_error = errors.map(|e| e.0);
        self.stability_error = errors.map(|e| e.1);
    }

    pub fn distance(&self, n_positions: u32) -> f64 {
        self.level.abs_diff(self.previous_level.unwrap_or(0)) as f64 / (n_positions as f64 - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue,
    /// The trial ended before this sample; the sample belongs to whatever
    /// comes next.
    Finished(TrialRecord),
}

/// One trial in progress.
#[derive(Debug, Clone)]
pub struct ActiveTrial {
    record: TrialRecord,
    band: f64,
    hold_mode: HoldMode,
    hold_time_s: f64,
    timeout_s: Option<f64>,
}

impl ActiveTrial {
    pub fn new(cfg: &TaskConfig, trial: usize, motion: &str, level: usize, previous_level: Option<usize>, presented_at: f64) -> Self {
        Self {
            record: TrialRecord {
                trial,
                motion: motion.to_string(),
                level,
                target: cfg.level_position(level),
                previous_level,
                presented_at,
                ended_at: presented_at,
                first_entry_at: None,
                cursor_trace: Vec::new(),
                acquired: false,
                position_error: None,
                stability_error: None,
                movement_time: None,
            },
            band: cfg.band(),
            hold_mode: cfg.hold_mode,
            hold_time_s: cfg.hold_time_s,
            timeout_s: cfg.timeout_s,
        }
    }

    pub fn record(&self) -> &TrialRecord {
        &self.record
    }

    /// Absolute time at which the trial will end if nothing changes.
    pub fn deadline(&self) -> f64 {
        let r = &self.record;
        match (self.hold_mode, r.first_entry_at) {
            (HoldMode::OnPresentation, _) => r.presented_at + self.hold_time_s,
            (HoldMode::OnEntry, Some(entry)) => entry + self.hold_time_s,
            (HoldMode::OnEntry, None) => {
                r.presented_at + self.timeout_s.expect("validated config has a timeout")
            }
        }
    }

    pub fn step(&mut self, t: f64, p: f64) -> StepOutcome {
        if t >= self.deadline() - TIME_EPS {
            let mut record = self.record.clone();
            record.ended_at = t;
            record.finalize(self.band);
            return StepOutcome::Finished(record);
        }
        self.record.cursor_trace.push((t, p));
        if self.record.first_entry_at.is_none() && in_band(p, self.record.target, self.band) {
            self.record.first_entry_at = Some(t);
        }
        StepOutcome::Continue
    }

    /// Ends the trial immediately, e.g. when the session is aborted.
    pub fn into_record(mut self, t: f64) -> TrialRecord {
        self.record.ended_at = t;
        self.record.finalize(self.band);
        self.record
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskEvent {
    TrialStarted {
        trial: usize,
        level: usize,
        target: f64,
        presented_at: f64,
    },
    TrialFinished(TrialRecord),
    Done,
}

/// Runs a schedule of trials for one motion off a stream of `(t, p)` samples.
#[derive(Debug, Clone)]
pub struct TaskRunner {
    cfg: TaskConfig,
    motion: String,
    schedule: TargetSchedule,
    next: usize,
    active: Option<ActiveTrial>,
    records: Vec<TrialRecord>,
    done: bool,
}

impl TaskRunner {
    pub fn new(cfg: TaskConfig, schedule: TargetSchedule, motion: &str) -> Result<Self, TaskError> {
        cfg.validate()?;
        if schedule.n_positions != cfg.n_positions {
            return Err(TaskError::InvalidConfig("schedule does not match n_positions".into()));
        }
        Ok(Self {
            cfg,
            motion: motion.to_string(),
            done: schedule.is_empty(),
            schedule,
            next: 0,
            active: None,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &TargetSchedule {
        &self.schedule
    }

    pub fn motion(&self) -> &str {
        &self.motion
    }

    pub fn active(&self) -> Option<&ActiveTrial> {
        self.active.as_ref()
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn start_next(&mut self, t: f64, events: &mut Vec<TaskEvent>) {
        let level = self.schedule.levels[self.next];
        let previous = self.next.checked_sub(1).map(|i| self.schedule.levels[i]);
        let trial = ActiveTrial::new(&self.cfg, self.next, &self.motion, level, previous, t);
        events.push(TaskEvent::TrialStarted {
            trial: self.next,
            level,
            target: trial.record.target,
            presented_at: t,
        });
        self.next += 1;
        self.active = Some(trial);
    }

    pub fn step(&mut self, t: f64, p: f64) -> Vec<TaskEvent> {
        let mut events = Vec::new();
        if self.done {
            return events;
        }
        if self.active.is_none() {
            self.start_next(t, &mut events);
        }
        let trial = self.active.as_mut().expect("active trial");
        if let StepOutcome::Finished(record) = trial.step(t, p) {
            self.records.push(record.clone());
            events.push(TaskEvent::TrialFinished(record));
            if self.next < self.schedule.len() {
                self.start_next(t, &mut events);
                let trial = self.active.as_mut().expect("active trial");
                let _ = trial.step(t, p);
            } else {
                self.active = None;
                self.done = true;
                events.push(TaskEvent::Done);
            }
        }
        events
    }

    /// Drops the trial in progress; it is excluded from the records.
    pub fn abort(&mut self) -> Option<TrialRecord> {
        self.done = true;
        self.active.take().map(|a| a.record)
    }

    /// Restarts the trial in progress at `t`, discarding its samples.
    pub fn restart_current(&mut self, t: f64) {
        if let Some(active) = self.active.take() {
            let r = active.record;
            self.active = Some(ActiveTrial::new(&self.cfg, r.trial, &self.motion, r.level, r.previous_level, t));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n_trials: usize,
    pub n_acquired: usize,
    pub completion_rate: f64,
    /// Means over acquired trials; `None` when nothing was acquired.
    pub position_error: Option<f64>,
    pub abs_position_error: Option<f64>,
    pub stability_error: Option<f64>,
    pub movement_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub overall: GroupMetrics,
    pub per_motion: BTreeMap<String, GroupMetrics>,
    pub trials: Vec<TrialRecordSummary>,
}

/// A trial record without its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecordSummary {
    pub trial: usize,
    pub motion: String,
    pub level: usize,
    pub target: f64,
    pub previous_level: Option<usize>,
    pub presented_at: f64,
    pub ended_at: f64,
    pub acquired: bool,
    pub movement_time: Option<f64>,
    pub position_error: Option<f64>,
    pub stability_error: Option<f64>,
}

impl From<&TrialRecord> for TrialRecordSummary {
    fn from(r: &TrialRecord) -> Self {
        Self {
            trial: r.trial,
            motion: r.motion.clone(),
            level: r.level,
            target: r.target,
            previous_level: r.previous_level,
            presented_at: r.presented_at,
            ended_at: r.ended_at,
            acquired: r.acquired,
            movement_time: r.movement_time,
            position_error: r.position_error,
            stability_error: r.stability_error,
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn group_metrics(records: &[&TrialRecord]) -> GroupMetrics {
    let acquired: Vec<&&TrialRecord> = records.iter().filter(|r| r.acquired).collect();
    GroupMetrics {
        n_trials: records.len(),
        n_acquired: acquired.len(),
        completion_rate: if records.is_empty() {
            0.0
        } else {
            acquired.len() as f64 / records.len() as f64 * 100.0
        },
        position_error: mean(acquired.iter().filter_map(|r| r.position_error)),
        abs_position_error: mean(acquired.iter().filter_map(|r| r.position_error.map(f64::abs))),
        stability_error: mean(acquired.iter().filter_map(|r| r.stability_error)),
        movement_time: mean(acquired.iter().filter_map(|r| r.movement_time)),
    }
}

/// Recomputes every per-trial quantity from the traces, then aggregates.
pub fn compute_metrics(records: &[TrialRecord], cfg: &TaskConfig) -> Result<SessionMetrics, TaskError> {
    if records.is_empty() {
        return Err(TaskError::EmptyRecords);
    }
    let band = cfg.band();
    let finalized: Vec<TrialRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.finalize(band);
            r
        })
        .collect();
    let all: Vec<&TrialRecord> = finalized.iter().collect();
    let mut by_motion: BTreeMap<String, Vec<&TrialRecord>> = BTreeMap::new();
    for r in &finalized {
        by_motion.entry(r.motion.clone()).or_default().push(r);
    }
    Ok(SessionMetrics {
        overall: group_metrics(&all),
        per_motion: by_motion
            .into_iter()
            .map(|(m, rs)| (m, group_metrics(&rs)))
            .collect(),
        trials: finalized.iter().map(TrialRecordSummary::from).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittsPoint {
    pub trial: usize,
    pub motion: String,
    /// Distance from the previous target, fraction of range.
    pub distance: f64,
    /// Band half-width, fraction of range.
    pub band: f64,
    pub id_bits: f64,
    pub movement_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittsBin {
    /// Level steps between consecutive targets; all points in a bin share
    /// the same index of difficulty.
    pub steps: usize,
    pub id_bits: f64,
    pub mean_movement_time: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittsAnalysis {
    pub points: Vec<FittsPoint>,
    pub bins: Vec<FittsBin>,
    pub slope: f64,
    pub intercept: f64,
    /// `None` when the binned movement times have no variance.
    pub r_squared: Option<f64>,
    /// Bits per second, `1 / slope`; `None` unless the slope is positive.
    pub throughput: Option<f64>,
}

/// Ordinary least squares `y = intercept + slope * x`, with R^2.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, Option<f64>)> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (intercept + slope * a);
            e * e
        })
        .sum();
    let r_squared = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Some((slope, intercept, r_squared))
}

/// Movement time against index of difficulty over acquired trials, fitted
/// on the mean movement time per difficulty.
pub fn fitts_analysis(records: &[TrialRecord], cfg: &TaskConfig) -> Result<FittsAnalysis, TaskError> {
    cfg.validate()?;
    let band = cfg.band();
    let span = cfg.n_positions as f64 - 1.0;
    let mut points = Vec::new();
    let mut bins: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let mut r = r.clone();
        r.finalize(band);
        let Some(mt) = r.movement_time else { continue };
        let steps = r.level.abs_diff(r.previous_level.unwrap_or(0));
        let distance = steps as f64 / span;
        points.push(FittsPoint {
            trial: r.trial,
            motion: r.motion.clone(),
            distance,
            band,
            id_bits: index_of_difficulty(distance, band),
            movement_time: mt,
        });
        let bin = bins.entry(steps).or_insert((0.0, 0));
        bin.0 += mt;
        bin.1 += 1;
    }
    let bins: Vec<FittsBin> = bins
        .into_iter()
        .map(|(steps, (sum, count))| FittsBin {
            steps,
            id_bits: index_of_difficulty(steps as f64 / span, band),
            mean_movement_time: sum / count as f64,
            count,
        })
        .collect();
    if bins.len() < 2 {
        return Err(TaskError::InsufficientData(format!(
            "{} acquired trials span {} distinct difficulties; need at least 2",
            points.len(),
            bins.len()
        )));
    }
    let x: Vec<f64> = bins.iter().map(|b| b.id_bits).collect();
    let y: Vec<f64> = bins.iter().map(|b| b.mean_movement_time).collect();
    let (slope, intercept, r_squared) =
        linear_fit(&x, &y).ok_or_else(|| TaskError::InsufficientData("degenerate fit".into()))?;
    Ok(FittsAnalysis {
        points,
        bins,
        slope,
        intercept,
        r_squared,
        throughput: (slope > 0.0).then(|| 1.0 / slope),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per trial.
pub fn trials_csv(metrics: &SessionMetrics, cfg: &TaskConfig) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "trial",
        "motion",
        "level",
        "target",
        "presented_at_s",
        "ended_at_s",
        "acquired",
        "movement_time_s",
        "position_error_pct",
        "stability_error_pct",
        "distance",
        "id_bits",
    ])
    .expect("in-memory write");
    let span = cfg.n_positions as f64 - 1.0;
    for t in &metrics.trials {
        let distance = t.level.abs_diff(t.previous_level.unwrap_or(0)) as f64 / span;
        w.write_record([
            t.trial.to_string(),
            t.motion.clone(),
            t.level.to_string(),
            t.target.to_string(),
            t.presented_at.to_string(),
            t.ended_at.to_string(),
            t.acquired.to_string(),
            opt(t.movement_time),
            opt(t.position_error),
            opt(t.stability_error),
            distance.to_string(),
            index_of_difficulty(distance, cfg.band()).to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Motion x {position error, stability error, completion rate}, plus the
/// absolute position error and mean movement time.
pub fn summary_csv(metrics: &SessionMetrics) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "motion",
        "position_error_pct",
        "stability_error_pct",
        "completion_rate_pct",
        "abs_position_error_pct",
        "movement_time_s",
        "n_trials",
        "n_acquired",
    ])
    .expect("in-memory write");
    let rows = metrics
        .per_motion
        .iter()
        .map(|(m, g)| (m.as_str(), g))
        .chain(std::iter::once(("all", &metrics.overall)));
    for (motion, g) in rows {
        w.write_record([
            motion.to_string(),
            opt(g.position_error),
            opt(g.stability_error),
            g.completion_rate.to_string(),
            opt(g.abs_position_error),
            opt(g.movement_time),
            g.n_trials.to_string(),
            g.n_acquired.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn fitts_csv(analysis: &FittsAnalysis) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "motion", "distance", "id_bits", "movement_time_s"])
        .expect("in-memory write");
    for p in &analysis.points {
        w.write_record([
            p.trial.to_string(),
            p.motion.clone(),
            p.distance.to_string(),
            p.id_bits.to_string(),
            p.movement_time.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rate_times(rate: f64, secs: f64) -> impl Iterator<Item = f64> {
        (0..=(secs * rate) as u64).map(move |k| k as f64 / rate)
    }

    fn cfg(mode: HoldMode, n: u32) -> TaskConfig {
        TaskConfig {
            n_positions: n,
            hold_time_s: 10.0,
            timeout_s: Some(30.0),
            trials_per_level: 1,
            hold_mode: mode,
            rng_seed: 7,
        }
    }

    #[test]
    fn quantization_bounds() {
        assert_eq!(quantization_bound(5).unwrap(), 12.5);
        assert_eq!(quantization_bound(11).unwrap(), 5.0);
        assert_eq!(quantization_bound(2).unwrap(), 50.0);
        assert!(quantization_bound(1).is_err());
    }

    #[test]
    fn fitts_index() {
        let id = index_of_difficulty(0.5, 0.05);
        assert!((id - 6f64.log2()).abs() < 1e-12);
        assert!((id - 2.585).abs() < 1e-3);
        assert_eq!(index_of_difficulty(0.0, 0.05), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TaskConfig::pilot();
        c.timeout_s = None;
        assert!(matches!(c.validate(), Err(TaskError::InvalidConfig(_))));
        assert!(TaskConfig::extended().validate().is_ok());
        let mut c = TaskConfig::extended();
        c.n_positions = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedules() {
        let s = generate_schedule(&TaskConfig::extended()).unwrap();
        assert_eq!(s.len(), 33);
        for level in 0..11 {
            assert_eq!(s.levels.iter().filter(|&&l| l == level).count(), 3);
        }
        let mut c = TaskConfig::pilot();
        c.rng_seed = 3;
        let mut positions = generate_schedule(&c).unwrap().positions();
        positions.sort_by(f64::total_cmp);
        assert_eq!(positions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn on_presentation_entry_at_two_seconds() {
        let c = cfg(HoldMode::OnPresentation, 11);
        let mut trial = ActiveTrial::new(&c, 0, "PG", 5, None, 0.0);
        let mut finished = None;
        for t in rate_times(30.0, 12.0) {
            let p = if t < 2.0 { 0.0 } else { 0.5 };
            if let StepOutcome::Finished(r) = trial.step(t, p) {
                finished = Some(r);
                break;
            }
        }
        let r = finished.unwrap();
        assert_eq!(r.ended_at, 10.0);
        assert!(r.acquired);
        assert_eq!(r.movement_time, Some(2.0));
        assert_eq!(r.position_error, Some(0.0));
        assert_eq!(r.stability_error, Some(0.0));
    }

    #[test]
    fn on_entry_timeout() {
        let c = cfg(HoldMode::OnEntry, 11);
        let mut trial = ActiveTrial::new(&c, 0, "PG", 10, None, 0.0);
        let r = rate_times(30.0, 40.0)
            .find_map(|t| match trial.step(t, 0.0) {
                StepOutcome::Finished(r) => Some(r),
                StepOutcome::Continue => None,
            })
            .unwrap();
        assert!(!r.acquired);
        assert_eq!(r.ended_at, 30.0);
        assert_eq!(r.movement_time, None);
        assert_eq!(r.position_error, None);
    }

    #[test]
    fn on_entry_hold_starts_at_entry() {
        let c = cfg(HoldMode::OnEntry, 5);
        let mut trial = ActiveTrial::new(&c, 0, "PG", 2, None, 0.0);
        let r = rate_times(10.0, 40.0)
            .find_map(|t| match trial.step(t, if t < 4.0 { 0.0 } else { 0.5 }) {
                StepOutcome::Finished(r) => Some(r),
                StepOutcome::Continue => None,
            })
            .unwrap();
        assert_eq!(r.first_entry_at, Some(4.0));
        assert_eq!(r.ended_at, 14.0);
    }

    #[test]
    fn starting_in_band_gives_zero_movement_time() {
        for mode in [HoldMode::OnEntry, HoldMode::OnPresentation] {
            let c = cfg(mode, 11);
            let mut trial = ActiveTrial::new(&c, 0, "PG", 0, None, 3.0);
            trial.step(3.0, 0.01);
            let r = trial.into_record(3.5);
            assert_eq!(r.movement_time, Some(0.0));
            assert_eq!(r.first_entry_at, Some(3.0));
        }
    }

    #[test]
    fn leaving_the_band_keeps_acquisition() {
        let c = cfg(HoldMode::OnPresentation, 11);
        let mut trial = ActiveTrial::new(&c, 0, "PG", 5, None, 0.0);
        trial.step(0.0, 0.5);
        trial.step(0.1, 0.9);
        let r = trial.into_record(0.2);
        assert!(r.acquired);
    }

    #[test]
    fn closed_band_edge_counts() {
        assert!(in_band(0.75, 0.5, 0.25));
        assert!(!in_band(0.76, 0.5, 0.25));
    }

    #[test]
    fn runner_covers_schedule() {
        let c = cfg(HoldMode::OnPresentation, 5);
        let schedule = generate_schedule(&c).unwrap();
        let mut runner = TaskRunner::new(c.clone(), schedule, "PG").unwrap();
        let mut finished = 0;
        let mut k = 0u64;
        while !runner.is_done() {
            let t = k as f64 / 30.0;
            for e in runner.step(t, 0.5) {
                if let TaskEvent::TrialFinished(r) = e {
                    finished += 1;
                    assert!((r.ended_at - r.presented_at - 10.0).abs() <= 1.0 / 30.0);
                }
            }
            k += 1;
        }
        assert_eq!(finished, 5);
        let recs = runner.records();
        assert_eq!(recs[0].previous_level, None);
        for w in recs.windows(2) {
            assert_eq!(w[1].previous_level, Some(w[0].level));
            assert_eq!(w[1].presented_at, w[0].ended_at);
        }
    }

    #[test]
    fn metrics_constant_offset_and_empty() {
        let c = cfg(HoldMode::OnPresentation, 11);
        let mut trial = ActiveTrial::new(&c, 0, "PG", 5, None, 0.0);
        for k in 0..100 {
            trial.step(k as f64 * 0.1, 0.52);
        }
        let r = trial.into_record(10.0);
        let m = compute_metrics(&[r], &c).unwrap();
        assert!((m.overall.position_error.unwrap() - 2.0).abs() < 1e-9);
        assert!(m.overall.stability_error.unwrap().abs() < 1e-9);
        assert_eq!(m.overall.completion_rate, 100.0);
        assert_eq!(compute_metrics(&[], &c), Err(TaskError::EmptyRecords));
    }

    #[test]
    fn sinusoid_stability() {
        let c = cfg(HoldMode::OnPresentation, 11);
        let mut trial = ActiveTrial::new(&c, 0, "PG", 5, None, 0.0);
        let n = 300;
        for k in 0..n {
            let phase = 2.0 * std::f64::consts::PI * k as f64 / 30.0;
            trial.step(k as f64 / 30.0, 0.5 + 0.05 * phase.sin());
        }
        let r = trial.into_record(10.0);
        assert!(r.position_error.unwrap().abs() < 1e-9);
        assert!((r.stability_error.unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn flat_movement_times_have_no_throughput() {
        let c = cfg(HoldMode::OnPresentation, 11);
        let records: Vec<TrialRecord> = [(3, Some(0)), (7, Some(3)), (9, Some(3))]
            .iter()
            .enumerate()
            .map(|(i, &(level, prev))| {
                let mut t = ActiveTrial::new(&c, i, "PG", level, prev, 0.0);
                t.step(0.0, 0.0);
                t.step(1.5, level as f64 / 10.0);
                t.into_record(10.0)
            })
            .collect();
        let fa = fitts_analysis(&records, &c).unwrap();
        assert_eq!(fa.slope, 0.0);
        assert_eq!(fa.throughput, None);
        assert_eq!(fa.r_squared, None);
        assert_eq!(fa.intercept, 1.5);
    }

    #[test]
    fn fitts_needs_two_difficulties() {
        let c = cfg(HoldMode::OnPresentation, 11);
        let mut t = ActiveTrial::new(&c, 0, "PG", 4, None, 0.0);
        t.step(1.0, 0.4);
        let r = t.into_record(10.0);
        assert!(matches!(fitts_analysis(&[r], &c), Err(TaskError::InsufficientData(_))));
    }
}
