//! Proportional control: the mean correlation of each incoming frame to the
//! selected motion's training frames, normalized between adaptive bounds.
//!
//! Per tick exactly one bound moves:
//!
//! ```text
//! c < l          l <- (c + l) / 2
//! c > u          u <- (c + u) / 2
//! l <= c <= u    nearer bound <- keep * bound + pull * c
//! p = clamp((c - l) / (u - l), 0, 1)
//! ```
//!
//! Outward excursions are absorbed quickly while in-range samples relax the
//! bounds slowly, so underestimated bounds recover faster than
//! overestimated ones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{Centered, Frame, FrameError};
use crate::training::TrainingDatabase;

/// Smallest admissible `u - l`.
pub const MIN_BOUND_GAP: f64 = 1e-3;
pub const DEFAULT_RELAX_KEEP: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("bounds are not initialized")]
    Uninitialized,
    #[error("bound gap {gap} fell below {min}", min = MIN_BOUND_GAP)]
    BoundCollapse { gap: f64 },
    #[error("calibration has no dynamic range")]
    DegenerateCalibration,
    #[error("motion {0:?} has no training entries")]
    EmptyClass(String),
    #[error("frame shape {actual:?} differs from training shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("invalid relaxation weight {0}")]
    InvalidWeight(f64),
}

/// Which bound a tick moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundUpdate {
    PushLower,
    PushUpper,
    RelaxLower,
    RelaxUpper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundState {
    pub lower: f64,
    pub upper: f64,
    pub relax_keep: f64,
    pub relax_pull: f64,
    pub initialized: bool,
}

impl Default for BoundState {
    /// Open bounds (`-inf`, `+inf`). Relaxing toward a finite sample never
    /// brings an infinite bound back, so these must be replaced by
    /// [`calibrate`] before use.
    fn default() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            relax_keep: DEFAULT_RELAX_KEEP,
            relax_pull: 1.0 - DEFAULT_RELAX_KEEP,
            initialized: false,
        }
    }
}

impl BoundState {
    pub fn new(lower: f64, upper: f64) -> Result<Self, ControlError> {
        Self::with_relaxation(lower, upper, DEFAULT_RELAX_KEEP)
    }

    pub fn with_relaxation(lower: f64, upper: f64, relax_keep: f64) -> Result<Self, ControlError> {
        if !(relax_keep > 0.0 && relax_keep < 1.0) {
            return Err(ControlError::InvalidWeight(relax_keep));
        }
        if !(upper - lower >= MIN_BOUND_GAP) {
            return Err(ControlError::DegenerateCalibration);
        }
        Ok(Self {
            lower,
            upper,
            relax_keep,
            relax_pull: 1.0 - relax_keep,
            initialized: true,
        })
    }

    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }

    /// Applies one tick and returns the control signal.
    pub fn update(&mut self, c: f64) -> Result<f64, ControlError> {
        self.update_traced(c).map(|(p, _)| p)
    }

    pub fn update_traced(&mut self, c: f64) -> Result<(f64, BoundUpdate), ControlError> {
        if !self.initialized {
            return Err(ControlError::Uninitialized);
        }
        let (mut lower, mut upper) = (self.lower, self.upper);
        let which = if c < lower {
            lower = (c + lower) / 2.0;
            BoundUpdate::PushLower
        } else if c > upper {
            upper = (c + upper) / 2.0;
            BoundUpdate::PushUpper
        } else if (lower - c).abs() < (upper - c).abs() {
            // c + keep * (l - c) == keep * l + pull * c, and is exactly l when c == l
            lower = c + self.relax_keep * (lower - c);
            BoundUpdate::RelaxLower
        } else {
            upper = c + self.relax_keep * (upper - c);
            BoundUpdate::RelaxUpper
        };
        let gap = upper - lower;
        if !(gap >= MIN_BOUND_GAP) {
            return Err(ControlError::BoundCollapse { gap });
        }
        self.lower = lower;
        self.upper = upper;
        Ok((((c - lower) / gap).clamp(0.0, 1.0), which))
    }
}

/// Initial bounds from one guided rest -> completion -> rest cycle.
pub fn calibrate(samples: &[f64]) -> Result<BoundState, ControlError> {
    if samples.len() < 2 || samples.iter().any(|c| !c.is_finite()) {
        return Err(ControlError::DegenerateCalibration);
    }
    let lower = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    BoundState::new(lower, upper)
}

/// Mean correlation of `frame` to every training entry of `motion`.
pub fn mean_motion_correlation(
    frame: &Frame,
    db: &TrainingDatabase,
    motion: &str,
) -> Result<f64, ControlError> {
    MotionReference::new(db, motion)?.mean_correlation(frame)
}

/// A motion's training entries, centered once for per-tick use.
#[derive(Debug, Clone)]
pub struct MotionReference {
    motion: String,
    shape: (usize, usize),
    entries: Vec<Centered>,
}

impl MotionReference {
    pub fn new(db: &TrainingDatabase, motion: &str) -> Result<Self, ControlError> {
        let frames = db.entries(motion);
        let first = frames
            .first()
            .ok_or_else(|| ControlError::EmptyClass(motion.to_string()))?;
        Ok(Self {
            motion: motion.to_string(),
            shape: first.shape(),
            entries: frames.iter().map(Centered::new).collect::<Result<_, _>>()?,
        })
    }

    pub fn motion(&self) -> &str {
        &self.motion
    }

    pub fn mean_correlation(&self, frame: &Frame) -> Result<f64, ControlError> {
        if frame.shape() != self.shape {
            return Err(ControlError::ShapeMismatch {
                expected: self.shape,
                actual: frame.shape(),
            });
        }
        let q = Centered::new(frame)?;
        Ok(self.entries.iter().map(|e| q.dot(e)).sum::<f64>() / self.entries.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub tick: u64,
    pub c: f64,
    pub l: f64,
    pub u: f64,
    pub p: f64,
    pub motion: String,
    /// Set when the frame was unusable and the previous sample was re-emitted.
    #[serde(default)]
    pub held: bool,
}

/// Frame-in, sample-out controller for one selected motion.
#[derive(Debug, Clone)]
pub struct ProportionalController {
    reference: MotionReference,
    bounds: BoundState,
    last: Option<ControlSample>,
}

impl ProportionalController {
    pub fn new(reference: MotionReference, bounds: BoundState) -> Result<Self, ControlError> {
        if !bounds.initialized {
            return Err(ControlError::Uninitialized);
        }
        Ok(Self {
            reference,
            bounds,
            last: None,
        })
    }

    pub fn bounds(&self) -> &BoundState {
        &self.bounds
    }

    pub fn reference(&self) -> &MotionReference {
        &self.reference
    }

    /// Degenerate frames leave the bounds untouched and re-emit the previous
    /// sample (or `p = 0` before the first good frame).
    pub fn tick(&mut self, tick: u64, frame: &Frame) -> Result<ControlSample, ControlError> {
        match self.reference.mean_correlation(frame) {
            Ok(c) => self.tick_correlation(tick, c),
            Err(ControlError::Frame(FrameError::DegenerateFrame { .. })) => {
                let mut held = self.last.clone().unwrap_or(ControlSample {
                    tick,
                    c: self.bounds.lower,
                    l: self.bounds.lower,
                    u: self.bounds.upper,
                    p: 0.0,
                    motion: self.reference.motion.clone(),
                    held: true,
                });
                held.tick = tick;
                held.held = true;
                Ok(held)
            }
            Err(e) => Err(e),
        }
    }

    pub fn tick_correlation(&mut self, tick: u64, c: f64) -> Result<ControlSample, ControlError> {
        let p = self.bounds.update(c)?;
        let sample = ControlSample {
            tick,
            c,
            l: self.bounds.lower,
            u: self.bounds.upper,
            p,
            motion: self.reference.motion.clone(),
            held: false,
        };
        self.last = Some(sample.clone());
        Ok(sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> BoundState {
        BoundState::new(0.2, 0.9).unwrap()
    }

    #[test]
    fn push_lower() {
        let mut s = state();
        let (p, which) = s.update_traced(0.1).unwrap();
        assert_eq!(which, BoundUpdate::PushLower);
        assert!((s.lower - 0.15).abs() < 1e-12);
        assert_eq!(s.upper, 0.9);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn push_upper() {
        let mut s = state();
        let p = s.update(0.95).unwrap();
        assert!((s.upper - 0.925).abs() < 1e-12);
        assert_eq!(s.lower, 0.2);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn relax_nearer_bound() {
        let mut s = state();
        let p = s.update(0.3).unwrap();
        assert!((s.lower - 0.201).abs() < 1e-12);
        assert_eq!(s.upper, 0.9);
        assert!((p - 0.099 / 0.699).abs() < 1e-12);
    }

    #[test]
    fn sample_on_a_bound_leaves_it_fixed() {
        let mut s = state();
        s.update(0.2).unwrap();
        assert_eq!(s.lower, 0.2);
        s.update(0.9).unwrap();
        assert_eq!(s.upper, 0.9);
    }

    #[test]
    fn equidistant_sample_relaxes_upper() {
        let mut s = BoundState::new(0.0, 1.0).unwrap();
        let (_, which) = s.update_traced(0.5).unwrap();
        assert_eq!(which, BoundUpdate::RelaxUpper);
    }

    #[test]
    fn open_bounds_are_rejected() {
        let mut s = BoundState::default();
        assert_eq!(s.update(0.5), Err(ControlError::Uninitialized));
    }

    #[test]
    fn calibration() {
        let s = calibrate(&[0.2, 0.5, 0.9, 0.4]).unwrap();
        assert_eq!((s.lower, s.upper), (0.2, 0.9));
        assert!(s.initialized);
        assert_eq!(calibrate(&[0.4; 5]), Err(ControlError::DegenerateCalibration));
        assert_eq!(calibrate(&[0.4]), Err(ControlError::DegenerateCalibration));
    }

    #[test]
    fn collapse_is_reported_without_mutating() {
        let mut s = BoundState::new(0.5, 0.5015).unwrap();
        // the sample is nearer u, so u relaxes toward a point inside the
        // minimum gap
        let before = s;
        let mut err = None;
        for _ in 0..2000 {
            match s.update(0.5008) {
                Ok(_) => {}
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(ControlError::BoundCollapse { .. })));
        assert!(s.gap() >= MIN_BOUND_GAP);
        assert!(s.upper <= before.upper);
    }

    #[test]
    fn weights_must_be_proper() {
        assert!(BoundState::with_relaxation(0.0, 1.0, 1.0).is_err());
        assert!(BoundState::with_relaxation(0.0, 1.0, 0.0).is_err());
    }
}
