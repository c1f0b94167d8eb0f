//! Seeded synthetic image source and scripted subject.
//!
//! Each motion end state is a smooth random field; a frame at activation
//! `a` is the linear blend `(1 - a) * rest + a * motion` plus Gaussian pixel
//! noise seeded by `(noise_seed, tick)`. The scripted subject is a delayed
//! first-order lag toward each target with additive tremor.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{pearson, Frame, FrameError};
use crate::training::{MetronomeSchedule, MotionClass, PhaseKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unknown motion {0:?}")]
    UnknownMotion(String),
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Largest correlation allowed between any two generated templates.
pub const MAX_TEMPLATE_CORRELATION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestJitter {
    /// Probability that a rest hold uses the alternate posture.
    pub rate: f64,
    /// How far the alternate posture departs from the primary one, in `[0, 1]`.
    pub departure: f64,
}

impl Default for RestJitter {
    fn default() -> Self {
        Self {
            rate: 0.4,
            departure: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub motions: Vec<MotionClass>,
    pub noise_sigma: f64,
    #[serde(default)]
    pub rest_jitter: Option<RestJitter>,
    /// Fraction of the rest field mixed into every motion template, so end
    /// states share anatomy with rest the way real images do.
    pub shared_anatomy: f64,
    pub smoothing_radius: usize,
    pub template_seed: u64,
    pub noise_seed: u64,
    pub tick_rate_hz: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            motions: crate::training::standard_motions(),
            noise_sigma: 0.02,
            rest_jitter: None,
            shared_anatomy: 0.3,
            smoothing_radius: 2,
            template_seed: 1,
            noise_seed: 2,
            tick_rate_hz: 30.0,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn box_blur(field: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let r = radius as isize;
    let blur_1d = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut n) = (0.0, 0.0);
                for d in -r..=r {
                    let (xx, yy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        sum += src[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
                out[y * w + x] = sum / n;
            }
        }
        out
    };
    let mut f = field.to_vec();
    // three box passes approximate a Gaussian
    for _ in 0..3 {
        f = blur_1d(&blur_1d(&f, true), false);
    }
    f
}

fn smooth_field(w: usize, h: usize, radius: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    box_blur(&white, w, h, radius)
}

/// Rescales into `[0.1, 0.9]` and rounds to the `f32` grid frames use.
fn to_intensity(field: &[f64]) -> Vec<f64> {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    field
        .iter()
        .map(|v| ((0.1 + 0.8 * (v - lo) / span) as f32) as f64)
        .collect()
}

fn standardize(field: &[f64]) -> Vec<f64> {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    field.iter().map(|v| (v - mean) / sd.max(f64::MIN_POSITIVE)).collect()
}

#[derive(Debug, Clone)]
pub struct Phantom {
    cfg: PhantomConfig,
    rest: Vec<f64>,
    alternate_rest: Option<Vec<f64>>,
    motions: BTreeMap<String, Vec<f64>>,
}

impl Phantom {
    pub fn new(cfg: PhantomConfig) -> Result<Self, SynthError> {
        if cfg.width < 2 || cfg.height < 2 {
            return Err(SynthError::InvalidConfig("frames must be at least 2x2".into()));
        }
        if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
            return Err(SynthError::InvalidConfig("noise_sigma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&cfg.shared_anatomy) {
            return Err(SynthError::InvalidConfig("shared_anatomy must lie in [0, 1)".into()));
        }
        if !(cfg.tick_rate_hz.is_finite() && cfg.tick_rate_hz > 0.0) {
            return Err(SynthError::InvalidConfig("tick_rate_hz must be positive".into()));
        }
        if let Some(j) = &cfg.rest_jitter {
            if !(0.0..=1.0).contains(&j.rate) || !(0.0..=1.0).contains(&j.departure) {
                return Err(SynthError::InvalidConfig("rest jitter parameters must lie in [0, 1]".into()));
            }
        }
        let mut ids: Vec<&str> = cfg.motions.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) || cfg.motions.iter().any(|m| m.is_rest) {
            return Err(SynthError::InvalidConfig("motion ids must be unique non-rest classes".into()));
        }

        let (w, h, radius) = (cfg.width, cfg.height, cfg.smoothing_radius);
        let mut accepted: Vec<Vec<f64>> = Vec::new();
        // Draw candidates until one is far enough from everything accepted.
        let mut draw = |slot: u64, make: &dyn Fn(u64) -> Vec<f64>| -> Result<Vec<f64>, SynthError> {
            for attempt in 0..64 {
                let candidate = to_intensity(&make(mix_seed(mix_seed(cfg.template_seed, slot), attempt)));
                let distinct = accepted.iter().all(|other| {
                    pearson(&candidate, other).is_some_and(|r| r < MAX_TEMPLATE_CORRELATION)
                });
                if distinct && pearson(&candidate, &candidate).is_some() {
                    accepted.push(candidate.clone());
                    return Ok(candidate);
                }
            }
            Err(SynthError::InvalidConfig(
                "could not generate distinct templates; increase frame size or reduce smoothing".into(),
            ))
        };

        let rest_field = standardize(&smooth_field(w, h, radius, mix_seed(cfg.template_seed, 0)));
        let rest = draw(0, &|_| rest_field.clone())?;
        let alternate_rest = match &cfg.rest_jitter {
            Some(j) => {
                let d = j.departure;
                Some(draw(1, &|s| {
                    let other = standardize(&smooth_field(w, h, radius, s));
                    rest_field.iter().zip(&other).map(|(r, o)| (1.0 - d) * r + d * o).collect()
                })?)
            }
            None => None,
        };
        let mut motions = BTreeMap::new();
        for (k, m) in cfg.motions.iter().enumerate() {
            let share = cfg.shared_anatomy;
            let template = draw(2 + k as u64, &|s| {
                let own = standardize(&smooth_field(w, h, radius, s));
                rest_field.iter().zip(&own).map(|(r, o)| share * r + (1.0 - share) * o).collect()
            })?;
            motions.insert(m.id.clone(), template);
        }
        Ok(Self {
            cfg,
            rest,
            alternate_rest,
            motions,
        })
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.cfg
    }

    fn frame(&self, pixels: &[f64], tick: u64) -> Frame {
        Frame::from_f64(
            self.cfg.width,
            self.cfg.height,
            pixels,
            tick,
            tick as f64 / self.cfg.tick_rate_hz,
        )
        .expect("templates are valid intensities")
    }

    pub fn rest_template(&self) -> Frame {
        self.frame(&self.rest, 0)
    }

    pub fn alternate_rest_template(&self) -> Option<Frame> {
        self.alternate_rest.as_ref().map(|t| self.frame(t, 0))
    }

    pub fn motion_template(&self, motion: &str) -> Result<Frame, SynthError> {
        let t = self
            .motions
            .get(motion)
            .ok_or_else(|| SynthError::UnknownMotion(motion.to_string()))?;
        Ok(self.frame(t, 0))
    }

    fn noise(&self, tick: u64) -> Vec<f64> {
        let n = self.cfg.width * self.cfg.height;
        if self.cfg.noise_sigma == 0.0 {
            return vec![0.0; n];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.noise_seed, tick));
        let normal = Normal::new(0.0, self.cfg.noise_sigma).expect("valid sigma");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Frame at activation `a` of `motion`, starting from a rest posture that
    /// is `posture` of the way toward the alternate rest (0 without jitter).
    pub fn render_blend(&self, motion: &str, a: f64, posture: f64, tick: u64) -> Result<Frame, SynthError> {
        let template = self
            .motions
            .get(motion)
            .ok_or_else(|| SynthError::UnknownMotion(motion.to_string()))?;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&posture) {
            return Err(SynthError::InvalidConfig(format!("activation {a} / posture {posture} outside [0, 1]")));
        }
        let alternate = self.alternate_rest.as_ref().unwrap_or(&self.rest);
        let noise = self.noise(tick);
        let pixels: Vec<f64> = self
            .rest
            .iter()
            .zip(alternate)
            .zip(template)
            .zip(&noise)
            .map(|(((r, alt), m), e)| {
                let base = if posture == 0.0 { *r } else { (1.0 - posture) * r + posture * alt };
                ((1.0 - a) * base + a * m + e).clamp(0.0, 1.0)
            })
            .collect();
        Ok(self.frame(&pixels, tick))
    }

    pub fn render_frame(&self, motion: &str, a: f64, tick: u64) -> Result<Frame, SynthError> {
        self.render_blend(motion, a, 0.0, tick)
    }

    /// Expected correlation of a noisy frame at activation `a` with the clean
    /// motion template, ignoring intensity clipping.
    pub fn expected_correlation(&self, motion: &str, a: f64) -> Result<f64, SynthError> {
        let m = self
            .motions
            .get(motion)
            .ok_or_else(|| SynthError::UnknownMotion(motion.to_string()))?;
        let n = m.len() as f64;
        let blend: Vec<f64> = self.rest.iter().zip(m).map(|(r, m)| (1.0 - a) * r + a * m).collect();
        let mb = blend.iter().sum::<f64>() / n;
        let mm = m.iter().sum::<f64>() / n;
        let cov = blend.iter().zip(m).map(|(b, m)| (b - mb) * (m - mm)).sum::<f64>() / n;
        let vb = blend.iter().map(|b| (b - mb) * (b - mb)).sum::<f64>() / n;
        let vm = m.iter().map(|m| (m - mm) * (m - mm)).sum::<f64>() / n;
        let s2 = self.cfg.noise_sigma * self.cfg.noise_sigma;
        Ok(cov / ((vb + s2).sqrt() * (vm + s2).sqrt()))
    }
}

/// Activation profile of one metronome-paced training session: ramps up
/// during to-end-state phases, holds, ramps down, holds at rest.
pub fn training_activation(schedule: &MetronomeSchedule, tick_rate_hz: f64, frame: usize) -> f64 {
    match schedule.phase_at(frame, tick_rate_hz) {
        None => 0.0,
        Some(phase) => {
            let len = (phase.end - phase.start).max(1) as f64;
            let frac = (frame - phase.start) as f64 / len;
            match phase.kind {
                PhaseKind::ToEndState => frac,
                PhaseKind::HoldEndState => 1.0,
                PhaseKind::ToRest => 1.0 - frac,
                PhaseKind::HoldRest => 0.0,
            }
        }
    }
}

/// Frames of one training session for `motion`. Each rest hold (and the
/// ramp into it) uses the alternate posture with the jitter rate; the
/// session always opens at the primary rest posture.
pub fn synth_training_session(
    phantom: &Phantom,
    motion: &str,
    schedule: &MetronomeSchedule,
    session_seed: u64,
) -> Result<Vec<Frame>, SynthError> {
    let rate = phantom.cfg.tick_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(session_seed, 0x5e55));
    let postures: Vec<f64> = (0..schedule.repetitions)
        .map(|_| match &phantom.cfg.rest_jitter {
            Some(j) if rng.random::<f64>() < j.rate => 1.0,
            _ => 0.0,
        })
        .collect();
    let frame_base = mix_seed(session_seed, 0xf4a3e);
    let phases = schedule.phases(rate);
    let total = schedule.frame_count(rate);
    let mut frames = Vec::with_capacity(total);
    let mut phase_iter = phases.iter().peekable();
    for i in 0..total {
        while phase_iter.peek().is_some_and(|p| i >= p.end) {
            phase_iter.next();
        }
        let phase = phase_iter.peek().expect("phases cover the session");
        let posture = match phase.kind {
            PhaseKind::ToRest | PhaseKind::HoldRest => postures[phase.repetition],
            _ if phase.repetition == 0 => 0.0,
            _ => postures[phase.repetition - 1],
        };
        let a = training_activation(schedule, rate, i);
        // distinct noise per session: tick offset by a session-derived base
        let noise_tick = frame_base.wrapping_add(i as u64);
        let f = phantom.render_blend(motion, a, posture, noise_tick)?;
        frames.push(f.with_position(i as u64, i as f64 / rate));
    }
    Ok(frames)
}

/// Tabulated map from intended completion to activation, i.e. the inverse
/// of the phantom's normalized expected-correlation curve for one motion.
#[derive(Debug, Clone)]
pub struct CompletionMap {
    completion: Vec<f64>,
}

impl CompletionMap {
    const STEPS: usize = 1000;

    pub fn new(phantom: &Phantom, motion: &str) -> Result<Self, SynthError> {
        let curve: Vec<f64> = (0..=Self::STEPS)
            .map(|k| phantom.expected_correlation(motion, k as f64 / Self::STEPS as f64))
            .collect::<Result<_, _>>()?;
        let (lo, hi) = (curve[0], curve[Self::STEPS]);
        if !(hi > lo) {
            return Err(SynthError::InvalidConfig(format!("motion {motion:?} has no correlation range")));
        }
        let mut completion: Vec<f64> = curve.iter().map(|c| (c - lo) / (hi - lo)).collect();
        // enforce monotonicity against rounding
        for k in 1..completion.len() {
            completion[k] = completion[k].max(completion[k - 1]);
        }
        Ok(Self { completion })
    }

    pub fn activation_for(&self, completion: f64) -> f64 {
        let x = completion.clamp(0.0, 1.0);
        let k = self.completion.partition_point(|&c| c < x);
        if k == 0 {
            return 0.0;
        }
        if k > Self::STEPS {
            return 1.0;
        }
        let (c0, c1) = (self.completion[k - 1], self.completion[k]);
        let frac = if c1 > c0 { (x - c0) / (c1 - c0) } else { 0.0 };
        ((k - 1) as f64 + frac) / Self::STEPS as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedSubject {
    pub reaction_delay_s: f64,
    pub time_constant_s: f64,
    pub tremor_sigma: f64,
    pub seed: u64,
}

impl Default for ScriptedSubject {
    fn default() -> Self {
        Self {
            reaction_delay_s: 0.3,
            time_constant_s: 0.4,
            tremor_sigma: 0.005,
            seed: 11,
        }
    }
}

impl ScriptedSubject {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.reaction_delay_s) && ok(self.time_constant_s) && ok(self.tremor_sigma) {
            Ok(())
        } else {
            Err(SynthError::InvalidConfig("subject parameters must be finite and non-negative".into()))
        }
    }

    pub fn tracker(&self, tick_rate_hz: f64) -> SubjectTracker {
        SubjectTracker {
            subject: *self,
            tick_rate_hz,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            position: 0.0,
            target: None,
            changed_at: 0,
        }
    }
}

/// Stateful form of the subject, driven one tick at a time.
#[derive(Debug, Clone)]
pub struct SubjectTracker {
    subject: ScriptedSubject,
    tick_rate_hz: f64,
    rng: ChaCha8Rng,
    position: f64,
    target: Option<f64>,
    changed_at: u64,
}

impl SubjectTracker {
    /// Noise-free intended position.
    pub fn intended(&self) -> f64 {
        self.position
    }

    pub fn step(&mut self, target: f64, tick: u64) -> f64 {
        if self.target != Some(target) {
            self.target = Some(target);
            self.changed_at = tick;
        }
        let elapsed = tick.saturating_sub(self.changed_at) as f64 / self.tick_rate_hz;
        if elapsed >= self.subject.reaction_delay_s {
            let tau = self.subject.time_constant_s;
            if tau == 0.0 {
                self.position = target;
            } else {
                let alpha = 1.0 - (-1.0 / (self.tick_rate_hz * tau)).exp();
                self.position += (target - self.position) * alpha;
            }
        }
        let tremor = if self.subject.tremor_sigma > 0.0 {
            self.subject.tremor_sigma * self.rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        (self.position + tremor).clamp(0.0, 1.0)
    }
}

/// Subject that watches the cursor. Target and cursor are perceived through
/// the reaction delay; the intended completion integrates the perceived
/// error, scaled by a running estimate of how strongly the cursor responds
/// to the subject's own movements. That estimate lets the subject keep
/// control while the bounds drift.
#[derive(Debug, Clone)]
pub struct ClosedLoopSubject {
    subject: ScriptedSubject,
    gain: f64,
    rng: ChaCha8Rng,
    delay: usize,
    /// (target, cursor, command that produced the cursor), oldest first.
    seen: VecDeque<(f64, f64, f64)>,
    perceived: VecDeque<(f64, f64)>,
    sensitivity: f64,
    command: f64,
}

impl ClosedLoopSubject {
    /// Perceived samples between two sensitivity observations.
    const SENSITIVITY_SPAN: usize = 6;
    const SENSITIVITY_RANGE: (f64, f64) = (0.2, 10.0);

    pub fn new(subject: &ScriptedSubject, tick_rate_hz: f64) -> Self {
        let tau = subject.time_constant_s;
        let gain = if tau == 0.0 {
            1.0
        } else {
            1.0 - (-1.0 / (tick_rate_hz * tau)).exp()
        };
        Self {
            subject: *subject,
            gain,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(subject.seed, 0xc105ed)),
            delay: (subject.reaction_delay_s * tick_rate_hz).round() as usize,
            seen: VecDeque::new(),
            perceived: VecDeque::new(),
            sensitivity: 1.0,
            command: 0.0,
        }
    }

    /// Noise-free intended completion.
    pub fn intended(&self) -> f64 {
        self.command
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    /// Starts from `completion` with an empty perception buffer. The
    /// sensitivity estimate is kept.
    pub fn reset(&mut self, completion: f64) {
        self.seen.clear();
        self.perceived.clear();
        self.command = completion.clamp(0.0, 1.0);
    }

    /// One tick: `target` and `cursor` are what the display currently
    /// shows, the cursor being the response to the previous command.
    /// Returns the intended completion including tremor.
    pub fn step(&mut self, target: f64, cursor: f64) -> f64 {
        self.seen.push_back((target, cursor, self.command));
        if self.seen.len() > self.delay {
            let (t, p, x) = self.seen.pop_front().expect("non-empty");
            self.perceived.push_back((p, x));
            if self.perceived.len() > Self::SENSITIVITY_SPAN {
                let (p0, x0) = self.perceived.pop_front().expect("non-empty");
                let (dp, dx) = (p - p0, x - x0);
                let unsaturated = [p, p0].iter().all(|v| *v > 0.0 && *v < 1.0);
                if dx.abs() > 0.03 && unsaturated {
                    let (lo, hi) = Self::SENSITIVITY_RANGE;
                    let observed = (dp / dx).clamp(lo, hi);
                    self.sensitivity += 0.2 * (observed - self.sensitivity);
                }
            }
            self.command = (self.command + self.gain * (t - p) / self.sensitivity).clamp(0.0, 1.0);
        }
        let tremor = if self.subject.tremor_sigma > 0.0 {
            self.subject.tremor_sigma * self.rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        (self.command + tremor).clamp(0.0, 1.0)
    }
}

/// Open-loop trajectory for a schedule whose targets each last `hold_s`.
pub fn scripted_track(subject: &ScriptedSubject, targets: &[f64], tick_rate_hz: f64, hold_s: f64) -> Vec<f64> {
    let per_target = (hold_s * tick_rate_hz).round() as u64;
    let mut tracker = subject.tracker(tick_rate_hz);
    let mut out = Vec::with_capacity(targets.len() * per_target as usize);
    let mut tick = 0u64;
    for &target in targets {
        for _ in 0..per_target {
            out.push(tracker.step(target, tick));
            tick += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::correlation;

    fn noiseless() -> Phantom {
        Phantom::new(PhantomConfig {
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn endpoints_are_templates() {
        let p = noiseless();
        let rest = p.render_frame("PG", 0.0, 5).unwrap();
        assert_eq!(rest.pixels(), p.rest_template().pixels());
        let end = p.render_frame("PG", 1.0, 5).unwrap();
        assert_eq!(end.pixels(), p.motion_template("PG").unwrap().pixels());
    }

    #[test]
    fn midpoint_correlation_lies_between() {
        let p = noiseless();
        let rest = p.rest_template();
        let at = |a| correlation(&p.render_frame("WP", a, 0).unwrap(), &rest).unwrap().value();
        let (c0, c5, c1) = (at(0.0), at(0.5), at(1.0));
        assert!(c1 < c5 && c5 < c0, "{c0} {c5} {c1}");
    }

    #[test]
    fn templates_are_distinct() {
        let p = Phantom::new(PhantomConfig {
            rest_jitter: Some(RestJitter::default()),
            ..PhantomConfig::default()
        })
        .unwrap();
        let mut all = vec![p.rest_template(), p.alternate_rest_template().unwrap()];
        for m in &p.config().motions {
            all.push(p.motion_template(&m.id).unwrap());
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(correlation(&all[i], &all[j]).unwrap().value() < MAX_TEMPLATE_CORRELATION);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_per_tick() {
        let p = Phantom::new(PhantomConfig::default()).unwrap();
        let a = p.render_frame("Tr", 0.3, 17).unwrap();
        assert_eq!(a, p.render_frame("Tr", 0.3, 17).unwrap());
        assert_ne!(a.pixels(), p.render_frame("Tr", 0.3, 18).unwrap().pixels());
        assert!(matches!(p.render_frame("XX", 0.3, 0), Err(SynthError::UnknownMotion(_))));
    }

    #[test]
    fn step_follow_without_lag() {
        let s = ScriptedSubject {
            reaction_delay_s: 0.5,
            time_constant_s: 0.0,
            tremor_sigma: 0.0,
            seed: 0,
        };
        let track = scripted_track(&s, &[0.8, 0.2], 10.0, 2.0);
        assert_eq!(&track[..5], &[0.0; 5]);
        assert!(track[5..20].iter().all(|&a| a == 0.8));
        assert!(track[20..25].iter().all(|&a| a == 0.8));
        assert!(track[25..].iter().all(|&a| a == 0.2));
    }

    #[test]
    fn lag_converges_within_five_time_constants() {
        let s = ScriptedSubject {
            reaction_delay_s: 0.2,
            time_constant_s: 0.5,
            tremor_sigma: 0.0,
            seed: 0,
        };
        let rate = 100.0;
        let track = scripted_track(&s, &[0.5], rate, 5.0);
        let k = ((0.2 + 5.0 * 0.5) * rate) as usize;
        assert!((track[k] - 0.5).abs() / 0.5 < 0.01);
        // exact discrete solution of the lag
        let steps = (k - 20 + 1) as i32;
        let alpha = 1.0 - (-1.0 / (rate * 0.5f64)).exp();
        let expected = 0.5 * (1.0 - (1.0 - alpha).powi(steps));
        assert!((track[k] - expected).abs() < 1e-12);
    }

    #[test]
    fn completion_map_inverts_curve() {
        let p = Phantom::new(PhantomConfig::default()).unwrap();
        let map = CompletionMap::new(&p, "KG").unwrap();
        assert_eq!(map.activation_for(0.0), 0.0);
        assert_eq!(map.activation_for(1.0), 1.0);
        let (lo, hi) = (
            p.expected_correlation("KG", 0.0).unwrap(),
            p.expected_correlation("KG", 1.0).unwrap(),
        );
        for x in [0.1, 0.35, 0.5, 0.9] {
            let a = map.activation_for(x);
            let c = p.expected_correlation("KG", a).unwrap();
            assert!(((c - lo) / (hi - lo) - x).abs() < 1e-3);
        }
    }

    #[test]
    fn training_activation_profile() {
        let s = MetronomeSchedule::default();
        assert_eq!(training_activation(&s, 30.0, 0), 0.0);
        assert_eq!(training_activation(&s, 30.0, 45), 0.5);
        assert_eq!(training_activation(&s, 30.0, 100), 1.0);
        assert_eq!(training_activation(&s, 30.0, 300), 0.0);
    }

    #[test]
    fn closed_loop_settles_on_target_through_an_offset() {
        let s = ScriptedSubject {
            tremor_sigma: 0.0,
            ..ScriptedSubject::default()
        };
        let mut subject = ClosedLoopSubject::new(&s, 30.0);
        // cursor reads the command shifted down by 0.1
        let mut cursor = 0.0;
        for _ in 0..300 {
            let x = subject.step(0.6, cursor);
            cursor = (x - 0.1).max(0.0);
        }
        assert!((cursor - 0.6).abs() < 1e-3, "{cursor}");
        assert!((subject.intended() - 0.7).abs() < 1e-3);
    }
}
