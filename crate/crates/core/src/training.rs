//! Training-database construction from metronome-paced repetition sessions.
//!
//! A session alternates transition and hold phases. The distance of every
//! frame from the session's first (rest) frame is flat while the subject
//! holds a posture, so each hold phase is searched for its longest flat run.
//! The frames of that run are averaged into one representative image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{average_frames, distance_from_rest, Frame, FrameError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("empty frame stream")]
    EmptyStream,
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("no plateau found in the {kind:?} hold of repetition {repetition}")]
    PlateauNotFound { repetition: usize, kind: HoldKind },
    #[error("signal has {actual} samples but the schedule spans {expected} frames")]
    SignalLengthMismatch { expected: usize, actual: usize },
    #[error("stream shape {actual:?} differs from database shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid plateau parameters: {0}")]
    InvalidParams(String),
    #[error("motion class {0:?} conflicts with an existing class")]
    ClassConflict(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("invalid database: {0}")]
    InvalidDatabase(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionClass {
    pub id: String,
    pub display_name: String,
    #[serde(default)]
    pub is_rest: bool,
}

impl MotionClass {
    pub fn motion(id: &str, display_name: &str) -> Self {
        Self {
            id: id.to_string(),
            display_name: display_name.to_string(),
            is_rest: false,
        }
    }

    pub fn rest() -> Self {
        Self {
            id: "rest".to_string(),
            display_name: "rest".to_string(),
            is_rest: true,
        }
    }
}

/// The five motions used throughout the evaluation protocol.
pub fn standard_motions() -> Vec<MotionClass> {
    vec![
        MotionClass::motion("PG", "power grasp"),
        MotionClass::motion("WP", "wrist pronation"),
        MotionClass::motion("Po", "point"),
        MotionClass::motion("KG", "key grasp"),
        MotionClass::motion("Tr", "tripod"),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    ToEndState,
    HoldEndState,
    ToRest,
    HoldRest,
}

impl PhaseKind {
    const CYCLE: [PhaseKind; 4] = [
        PhaseKind::ToEndState,
        PhaseKind::HoldEndState,
        PhaseKind::ToRest,
        PhaseKind::HoldRest,
    ];

    pub fn hold(self) -> Option<HoldKind> {
        match self {
            PhaseKind::HoldEndState => Some(HoldKind::Motion),
            PhaseKind::HoldRest => Some(HoldKind::Rest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldKind {
    Motion,
    Rest,
}

/// One phase of the metronome timeline, as a half-open frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulePhase {
    pub kind: PhaseKind,
    pub repetition: usize,
    pub start: usize,
    pub end: usize,
}

/// Every phase lasts `beats_per_phase` beats; each repetition runs
/// to-end-state, hold, to-rest, hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetronomeSchedule {
    pub beat_period_s: f64,
    pub beats_per_phase: u32,
    pub repetitions: u32,
}

impl Default for MetronomeSchedule {
    fn default() -> Self {
        // 60 bpm, three beats per phase, five repetitions.
        Self {
            beat_period_s: 1.0,
            beats_per_phase: 3,
            repetitions: 5,
        }
    }
}

impl MetronomeSchedule {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.beat_period_s.is_finite() && self.beat_period_s > 0.0) {
            return Err(TrainingError::InvalidSchedule(format!(
                "beat period {} must be positive",
                self.beat_period_s
            )));
        }
        if self.beats_per_phase == 0 || self.repetitions == 0 {
            return Err(TrainingError::InvalidSchedule(
                "beats per phase and repetitions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn phase_duration_s(&self) -> f64 {
        self.beat_period_s * self.beats_per_phase as f64
    }

    pub fn duration_s(&self) -> f64 {
        self.phase_duration_s() * 4.0 * self.repetitions as f64
    }

    fn boundary(&self, phase: usize, tick_rate_hz: f64) -> usize {
        (phase as f64 * self.phase_duration_s() * tick_rate_hz).round() as usize
    }

    pub fn frame_count(&self, tick_rate_hz: f64) -> usize {
        self.boundary(4 * self.repetitions as usize, tick_rate_hz)
    }

    /// Contiguous, non-overlapping phases covering `0..frame_count`.
    pub fn phases(&self, tick_rate_hz: f64) -> Vec<SchedulePhase> {
        (0..4 * self.repetitions as usize)
            .map(|k| SchedulePhase {
                kind: PhaseKind::CYCLE[k % 4],
                repetition: k / 4,
                start: self.boundary(k, tick_rate_hz),
                end: self.boundary(k + 1, tick_rate_hz),
            })
            .collect()
    }

    /// Phase containing frame `index`, if inside the session.
    pub fn phase_at(&self, index: usize, tick_rate_hz: f64) -> Option<SchedulePhase> {
        self.phases(tick_rate_hz)
            .into_iter()
            .find(|p| p.start <= index && index < p.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauParams {
    /// Shortest accepted hold, in seconds.
    pub min_duration_s: f64,
    /// Largest accepted peak-to-peak range of the signal within a plateau.
    pub flatness_tolerance: f64,
}

impl Default for PlateauParams {
    fn default() -> Self {
        Self {
            min_duration_s: 0.5,
            flatness_tolerance: 0.05,
        }
    }
}

impl PlateauParams {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.min_duration_s.is_finite() && self.min_duration_s >= 0.0) {
            return Err(TrainingError::InvalidParams("min duration".into()));
        }
        if !(self.flatness_tolerance.is_finite() && self.flatness_tolerance >= 0.0) {
            return Err(TrainingError::InvalidParams("flatness tolerance".into()));
        }
        Ok(())
    }

    pub fn min_length(&self, tick_rate_hz: f64) -> usize {
        ((self.min_duration_s * tick_rate_hz).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub repetition: usize,
    pub kind: HoldKind,
    /// Inclusive frame range.
    pub start_index: usize,
    pub end_index: usize,
    pub level: f64,
}

impl Plateau {
    pub fn len(&self) -> usize {
        self.end_index - self.start_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Longest run in `signal` whose peak-to-peak range is at most `tolerance`,
/// as a half-open range. Earliest run wins ties.
fn longest_flat_run(signal: &[f64], tolerance: f64) -> Option<(usize, usize)> {
    use std::collections::VecDeque;

    let mut best: Option<(usize, usize)> = None;
    let mut maxq: VecDeque<usize> = VecDeque::new();
    let mut minq: VecDeque<usize> = VecDeque::new();
    let mut left = 0;
    for right in 0..signal.len() {
        let v = signal[right];
        while maxq.back().is_some_and(|&i| signal[i] <= v) {
            maxq.pop_back();
        }
        maxq.push_back(right);
        while minq.back().is_some_and(|&i| signal[i] >= v) {
            minq.pop_back();
        }
        minq.push_back(right);
        while signal[maxq[0]] - signal[minq[0]] > tolerance {
            left += 1;
            if maxq[0] < left {
                maxq.pop_front();
            }
            if minq[0] < left {
                minq.pop_front();
            }
        }
        let len = right + 1 - left;
        if best.is_none_or(|(s, e)| len > e - s) {
            best = Some((left, right + 1));
        }
    }
    best
}

/// Result of searching one hold phase.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldScan {
    pub repetition: usize,
    pub kind: HoldKind,
    pub result: Result<Plateau, TrainingError>,
}

/// Searches every hold phase independently, so a bad repetition does not
/// hide the others.
pub fn scan_plateaus(
    signal: &[f64],
    schedule: &MetronomeSchedule,
    tick_rate_hz: f64,
    params: &PlateauParams,
) -> Result<Vec<HoldScan>, TrainingError> {
    schedule.validate()?;
    params.validate()?;
    let expected = schedule.frame_count(tick_rate_hz);
    if signal.len() != expected {
        return Err(TrainingError::SignalLengthMismatch {
            expected,
            actual: signal.len(),
        });
    }
    let min_len = params.min_length(tick_rate_hz);
    let scans = schedule
        .phases(tick_rate_hz)
        .into_iter()
        .filter_map(|phase| phase.kind.hold().map(|kind| (phase, kind)))
        .map(|(phase, kind)| {
            let window = &signal[phase.start..phase.end];
            let found = longest_flat_run(window, params.flatness_tolerance)
                .filter(|(s, e)| e - s >= min_len)
                .map(|(s, e)| Plateau {
                    repetition: phase.repetition,
                    kind,
                    start_index: phase.start + s,
                    end_index: phase.start + e - 1,
                    level: window[s..e].iter().sum::<f64>() / (e - s) as f64,
                });
            HoldScan {
                repetition: phase.repetition,
                kind,
                result: found.ok_or(TrainingError::PlateauNotFound {
                    repetition: phase.repetition,
                    kind,
                }),
            }
        })
        .collect();
    Ok(scans)
}

/// One motion plateau and one rest plateau per repetition, in time order.
pub fn detect_plateaus(
    signal: &[f64],
    schedule: &MetronomeSchedule,
    tick_rate_hz: f64,
    params: &PlateauParams,
) -> Result<Vec<Plateau>, TrainingError> {
    scan_plateaus(signal, schedule, tick_rate_hz, params)?
        .into_iter()
        .map(|scan| scan.result)
        .collect()
}

pub fn extract_rest_reference(stream: &[Frame]) -> Result<Frame, TrainingError> {
    let first = stream.first().ok_or(TrainingError::EmptyStream)?;
    // zero variance is the only way a self-correlation can fail
    crate::frames::correlation(first, first)?;
    Ok(first.clone())
}

/// Distance of every frame from the stream's first frame.
pub fn rest_distance_series(stream: &[Frame]) -> Result<Vec<f64>, TrainingError> {
    let rest = extract_rest_reference(stream)?;
    let rest_c = crate::frames::Centered::new(&rest)?;
    stream
        .iter()
        .map(|f| {
            if f.shape() != rest.shape() {
                distance_from_rest(f, &rest).map_err(TrainingError::from)
            } else {
                let c = crate::frames::Centered::new(f)?;
                Ok(1.0 - c.dot(&rest_c))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub session_id: String,
    pub motion_id: String,
    pub schedule: MetronomeSchedule,
    pub tick_rate_hz: f64,
    pub plateau: PlateauParams,
}

/// Labeled representative frames. Entries are append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDatabase {
    classes: Vec<MotionClass>,
    entries: BTreeMap<String, Vec<Frame>>,
    rest_reference: Option<Frame>,
    provenance: Vec<Provenance>,
}

impl TrainingDatabase {
    pub fn new(rest: MotionClass) -> Self {
        assert!(rest.is_rest, "database must be seeded with its rest class");
        Self {
            classes: vec![rest],
            entries: BTreeMap::new(),
            rest_reference: None,
            provenance: Vec::new(),
        }
    }

    /// Reassembles a database, checking the structural invariants.
    pub fn from_parts(
        classes: Vec<MotionClass>,
        entries: BTreeMap<String, Vec<Frame>>,
        rest_reference: Option<Frame>,
        provenance: Vec<Provenance>,
    ) -> Result<Self, TrainingError> {
        let rests = classes.iter().filter(|c| c.is_rest).count();
        if rests != 1 {
            return Err(TrainingError::InvalidDatabase(format!(
                "expected exactly one rest class, found {rests}"
            )));
        }
        let mut ids: Vec<&str> = classes.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TrainingError::InvalidDatabase("duplicate class id".into()));
        }
        let mut db = Self {
            classes,
            entries: BTreeMap::new(),
            rest_reference: None,
            provenance,
        };
        if let Some(rest) = rest_reference {
            db.check_shape(rest.shape())?;
            db.rest_reference = Some(rest);
        }
        for (id, frames) in entries {
            for f in frames {
                db.push_entry(&id, f)?;
            }
        }
        Ok(db)
    }

    pub fn classes(&self) -> &[MotionClass] {
        &self.classes
    }

    pub fn class(&self, id: &str) -> Option<&MotionClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn rest_class(&self) -> &MotionClass {
        self.classes
            .iter()
            .find(|c| c.is_rest)
            .expect("rest class always present")
    }

    pub fn motion_classes(&self) -> impl Iterator<Item = &MotionClass> {
        self.classes.iter().filter(|c| !c.is_rest)
    }

    pub fn entries(&self, class_id: &str) -> &[Frame] {
        self.entries.get(class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Entries grouped by class id, in lexicographic id order.
    pub fn all_entries(&self) -> &BTreeMap<String, Vec<Frame>> {
        &self.entries
    }

    pub fn rest_reference(&self) -> Option<&Frame> {
        self.rest_reference.as_ref()
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.rest_reference
            .as_ref()
            .or_else(|| self.entries.values().flatten().next())
            .map(Frame::shape)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every declared class has at least one entry and the rest reference is set.
    pub fn is_complete(&self) -> bool {
        self.rest_reference.is_some()
            && self.classes.iter().all(|c| !self.entries(&c.id).is_empty())
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<(), TrainingError> {
        match self.shape() {
            Some(expected) if expected != shape => Err(TrainingError::ShapeMismatch {
                expected,
                actual: shape,
            }),
            _ => Ok(()),
        }
    }

    pub fn add_class(&mut self, class: MotionClass) -> Result<(), TrainingError> {
        match self.class(&class.id) {
            Some(existing) if *existing == class => Ok(()),
            Some(_) => Err(TrainingError::ClassConflict(class.id)),
            None if class.is_rest => Err(TrainingError::ClassConflict(class.id)),
            None => {
                self.classes.push(class);
                Ok(())
            }
        }
    }

    pub fn push_entry(&mut self, class_id: &str, frame: Frame) -> Result<(), TrainingError> {
        if self.class(class_id).is_none() {
            return Err(TrainingError::UnknownClass(class_id.to_string()));
        }
        self.check_shape(frame.shape())?;
        self.entries
            .entry(class_id.to_string())
            .or_default()
            .push(frame);
        Ok(())
    }

    pub fn set_rest_reference_if_absent(&mut self, frame: Frame) -> Result<(), TrainingError> {
        self.check_shape(frame.shape())?;
        if self.rest_reference.is_none() {
            self.rest_reference = Some(frame);
        }
        Ok(())
    }
}

/// Everything `build_database` needs besides the frames themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSession<'a> {
    pub session_id: &'a str,
    pub schedule: MetronomeSchedule,
    pub tick_rate_hz: f64,
    pub plateau: PlateauParams,
}

/// Appends one representative per motion hold and one per rest hold.
pub fn build_database(
    stream: &[Frame],
    session: &TrainingSession<'_>,
    motion: &MotionClass,
    existing: TrainingDatabase,
) -> Result<TrainingDatabase, TrainingError> {
    let rest = extract_rest_reference(stream)?;
    if let Some(expected) = existing.shape() {
        if let Some(bad) = stream.iter().find(|f| f.shape() != expected) {
            return Err(TrainingError::ShapeMismatch {
                expected,
                actual: bad.shape(),
            });
        }
    }
    let signal = rest_distance_series(stream)?;
    let plateaus = detect_plateaus(&signal, &session.schedule, session.tick_rate_hz, &session.plateau)?;

    let mut db = existing;
    db.add_class(motion.clone())?;
    let rest_id = db.rest_class().id.clone();
    for plateau in &plateaus {
        let representative = average_frames(&stream[plateau.start_index..=plateau.end_index])?;
        let id = match plateau.kind {
            HoldKind::Motion => &motion.id,
            HoldKind::Rest => &rest_id,
        };
        db.push_entry(id, representative)?;
    }
    db.set_rest_reference_if_absent(rest)?;
    db.provenance.push(Provenance {
        session_id: session.session_id.to_string(),
        motion_id: motion.id.clone(),
        schedule: session.schedule,
        tick_rate_hz: session.tick_rate_hz,
        plateau: session.plateau,
    });
    Ok(db)
}
