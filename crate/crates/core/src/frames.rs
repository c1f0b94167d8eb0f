//! Image frames and the Pearson-correlation similarity every other stage
//! is built on.
//!
//! Pixels are stored as `f32` intensities in `[0, 1]`, row-major. All
//! arithmetic on them is carried out in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("dimension mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    DimensionMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },
    #[error("degenerate frame {index}: zero pixel variance")]
    DegenerateFrame { index: u64 },
    #[error("empty input")]
    EmptyInput,
    #[error("pixel buffer has {actual} values, expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("pixel {position} = {value} is not a finite intensity in [0, 1]")]
    InvalidPixel { position: usize, value: f32 },
    #[error("invalid decimation factor {0}")]
    InvalidDecimation(usize),
}

/// One grayscale image sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    index: u64,
    timestamp: f64,
}

impl Frame {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f32>,
        index: u64,
        timestamp: f64,
    ) -> Result<Self, FrameError> {
        if pixels.len() != width * height {
            return Err(FrameError::BadLength {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some((position, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(FrameError::InvalidPixel { position, value });
        }
        Ok(Self {
            width,
            height,
            pixels,
            index,
            timestamp,
        })
    }

    /// Builds a frame from `f64` intensities, rounding each to `f32`.
    pub fn from_f64(
        width: usize,
        height: usize,
        pixels: &[f64],
        index: u64,
        timestamp: f64,
    ) -> Result<Self, FrameError> {
        Self::new(
            width,
            height,
            pixels.iter().map(|&v| v as f32).collect(),
            index,
            timestamp,
        )
    }

    /// Normalizes integer samples of the given bit depth into `[0, 1]`.
    pub fn from_u16(
        width: usize,
        height: usize,
        samples: &[u16],
        bit_depth: u32,
        index: u64,
        timestamp: f64,
    ) -> Result<Self, FrameError> {
        let max = ((1u32 << bit_depth.clamp(1, 16)) - 1) as f64;
        let pixels: Vec<f64> = samples
            .iter()
            .map(|&s| (s as f64 / max).min(1.0))
            .collect();
        Self::from_f64(width, height, &pixels, index, timestamp)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn with_position(mut self, index: u64, timestamp: f64) -> Self {
        self.index = index;
        self.timestamp = timestamp;
        self
    }

    /// Block-averages `factor x factor` tiles; trailing rows/columns that do
    /// not fill a tile are dropped. A factor of 1 returns the frame unchanged.
    pub fn decimate(&self, factor: usize) -> Result<Frame, FrameError> {
        if factor == 0 || factor > self.width || factor > self.height {
            return Err(FrameError::InvalidDecimation(factor));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = (factor * factor) as f64;
        let mut out = Vec::with_capacity(w * h);
        for by in 0..h {
            for bx in 0..w {
                let mut sum = 0.0f64;
                for y in by * factor..(by + 1) * factor {
                    let row = &self.pixels[y * self.width..];
                    for x in bx * factor..(bx + 1) * factor {
                        sum += row[x] as f64;
                    }
                }
                out.push(sum / norm);
            }
        }
        Frame::from_f64(w, h, &out, self.index, self.timestamp)
    }

    fn ensure_same_shape(&self, other: &Frame) -> Result<(), FrameError> {
        if self.shape() != other.shape() {
            return Err(FrameError::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            });
        }
        Ok(())
    }
}

/// Pearson correlation coefficient between two frames, in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Similarity(f64);

impl Similarity {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Pearson r of two equal-length slices, or `None` when either has zero
/// variance. The result is bit-identical when the arguments are swapped.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    if x.is_empty() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    // sqrt(s * s) == s exactly, so a frame correlates with itself at exactly 1
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Zero-mean, unit-norm view of a frame. Correlating two centered frames is a
/// dot product, which is how the per-tick hot paths avoid recomputing means.
#[derive(Debug, Clone)]
pub struct Centered {
    shape: (usize, usize),
    values: Vec<f64>,
}

impl Centered {
    pub fn new(frame: &Frame) -> Result<Self, FrameError> {
        let n = frame.pixels.len() as f64;
        let mean = frame.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut values: Vec<f64> = frame.pixels.iter().map(|&v| v as f64 - mean).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(FrameError::DegenerateFrame { index: frame.index });
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            shape: frame.shape(),
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn dot(&self, other: &Centered) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    }
}

fn as_f64(frame: &Frame) -> Vec<f64> {
    frame.pixels.iter().map(|&v| v as f64).collect()
}

pub fn correlation(a: &Frame, b: &Frame) -> Result<Similarity, FrameError> {
    a.ensure_same_shape(b)?;
    let (xa, xb) = (as_f64(a), as_f64(b));
    match pearson(&xa, &xb) {
        Some(r) => Ok(Similarity(r)),
        None => {
            let degenerate = if pearson(&xa, &xa).is_none() { a } else { b };
            Err(FrameError::DegenerateFrame {
                index: degenerate.index,
            })
        }
    }
}

/// `1 - r` against the rest image; 0 at rest, peaks away from it.
pub fn distance_from_rest(frame: &Frame, rest: &Frame) -> Result<f64, FrameError> {
    Ok(1.0 - correlation(frame, rest)?.value())
}

/// Per-pixel mean. Index and timestamp come from the middle input frame.
///
/// Each pixel column is summed in sorted order so the result does not depend
/// on the order of `frames`.
pub fn average_frames(frames: &[Frame]) -> Result<Frame, FrameError> {
    let first = frames.first().ok_or(FrameError::EmptyInput)?;
    for f in &frames[1..] {
        first.ensure_same_shape(f)?;
    }
    let n = frames.len();
    let mut column = vec![0.0f32; n];
    let mut out = Vec::with_capacity(first.pixels.len());
    for p in 0..first.pixels.len() {
        for (slot, f) in column.iter_mut().zip(frames) {
            *slot = f.pixels[p];
        }
        column.sort_by(f32::total_cmp);
        let sum: f64 = column.iter().map(|&v| v as f64).sum();
        out.push(sum / n as f64);
    }
    let middle = &frames[n / 2];
    Frame::from_f64(first.width, first.height, &out, middle.index, middle.timestamp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, px: &[f32]) -> Frame {
        Frame::new(w, h, px.to_vec(), 0, 0.0).unwrap()
    }

    #[test]
    fn self_correlation_is_one() {
        let f = frame(2, 2, &[0.1, 0.4, 0.2, 0.9]);
        assert!((correlation(&f, &f).unwrap().value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anti_correlated_pair() {
        let a = frame(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let b = frame(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(correlation(&a, &b).unwrap().value(), -1.0);
        assert_eq!(distance_from_rest(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn hand_computed_pearson() {
        // x = [0,1,2,3], y = [0,1,2,5]: mx = 1.5, my = 2
        // sxy = 1.5*2 + 0.5*1 + 0.5*0 + 1.5*3 = 8
        // sxx = 5, syy = 4 + 1 + 0 + 9 = 14, r = 8 / sqrt(70)
        let expected = 8.0 / 70f64.sqrt();
        assert!((expected - 0.9562).abs() < 1e-4);
        // pixels must lie in [0, 1]; scaling both by 1/5 leaves r unchanged
        let a = frame(2, 2, &[0.0, 0.2, 0.4, 0.6]);
        let b = frame(2, 2, &[0.0, 0.2, 0.4, 1.0]);
        let r = correlation(&a, &b).unwrap().value();
        assert!((r - expected).abs() < 1e-6, "{r}");
        let exact = pearson(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 5.0]).unwrap();
        assert!((exact - expected).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let a = frame(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let c = frame(2, 2, &[0.5; 4]);
        let wide = frame(4, 1, &[0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            correlation(&a, &wide),
            Err(FrameError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            correlation(&a, &c),
            Err(FrameError::DegenerateFrame { .. })
        ));
        assert!(matches!(
            correlation(&c, &a),
            Err(FrameError::DegenerateFrame { .. })
        ));
        assert!(matches!(average_frames(&[]), Err(FrameError::EmptyInput)));
        assert!(matches!(
            Frame::new(2, 2, vec![0.0, 1.5, 0.0, 0.0], 0, 0.0),
            Err(FrameError::InvalidPixel { position: 1, .. })
        ));
        assert!(matches!(
            Frame::new(2, 2, vec![0.0; 3], 0, 0.0),
            Err(FrameError::BadLength { .. })
        ));
    }

    #[test]
    fn average_singleton_and_symmetric_pair() {
        let f = frame(2, 2, &[0.1, 0.4, 0.2, 0.9]);
        assert_eq!(average_frames(std::slice::from_ref(&f)).unwrap(), f);
        let zeros = frame(2, 2, &[0.0; 4]);
        let ones = frame(2, 2, &[1.0; 4]);
        let avg = average_frames(&[zeros, ones]).unwrap();
        assert_eq!(avg.pixels(), &[0.5; 4]);
    }

    #[test]
    fn average_takes_middle_position() {
        let frames: Vec<Frame> = (0..5)
            .map(|i| Frame::new(1, 2, vec![0.0, 1.0], i, i as f64 * 0.1).unwrap())
            .collect();
        let avg = average_frames(&frames).unwrap();
        assert_eq!(avg.index(), 2);
        assert_eq!(avg.timestamp(), 0.2);
    }

    #[test]
    fn decimation() {
        let f = frame(4, 2, &[0.0, 0.2, 0.4, 0.6, 0.2, 0.4, 0.6, 0.8]);
        let d = f.decimate(2).unwrap();
        assert_eq!(d.shape(), (2, 1));
        assert!((d.pixels()[0] - 0.2).abs() < 1e-7);
        assert!((d.pixels()[1] - 0.6).abs() < 1e-7);
        assert_eq!(f.decimate(1).unwrap(), f);
        assert!(f.decimate(0).is_err());
    }

    #[test]
    fn from_u16_normalizes_bit_depth() {
        let f = Frame::from_u16(2, 1, &[0, 255], 8, 0, 0.0).unwrap();
        assert_eq!(f.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn centered_dot_matches_correlation() {
        let a = frame(2, 2, &[0.1, 0.4, 0.2, 0.9]);
        let b = frame(2, 2, &[0.3, 0.1, 0.7, 0.5]);
        let r = correlation(&a, &b).unwrap().value();
        let d = Centered::new(&a).unwrap().dot(&Centered::new(&b).unwrap());
        assert!((r - d).abs() < 1e-12);
    }
}
