//! Raw gaze → fixations → gaze tokens.

mod encoding;
mod idt;
pub mod io;

pub use encoding::{
    sinusoidal_pe, spatial_pe, GazeEncoder, GazeTokens, SPATIAL_SCALE, TIME_SCALE,
};
pub use idt::{detect_fixations, IdtParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One eye-tracker sample. Coordinates are normalized to the image extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawGazeSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixation {
    pub start: f64,
    pub duration: f64,
    pub x: f64,
    pub y: f64,
}

impl Fixation {
    /// Validates timing and clamps the location into the unit square.
    /// The flag reports whether clamping happened.
    pub fn checked(start: f64, duration: f64, x: f64, y: f64) -> Result<(Self, bool)> {
        if !(start.is_finite() && start >= 0.0) {
            return Err(Error::contract(format!("fixation start {start} must be >= 0")));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::contract(format!("fixation duration {duration} must be > 0")));
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::contract("fixation location must be finite"));
        }
        let (cx, cy) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
        let clamped = cx != x || cy != y;
        Ok((
            Fixation {
                start,
                duration,
                x: cx,
                y: cy,
            },
            clamped,
        ))
    }
}

/// Slack allowed when checking that consecutive fixations do not overlap.
pub const OVERLAP_TOLERANCE: f64 = 1e-9;

/// An ordered, non-overlapping, non-empty sequence of fixations.
#[derive(Clone, Debug, PartialEq)]
pub struct FixationSequence {
    fixations: Vec<Fixation>,
}

impl FixationSequence {
    pub fn new(fixations: Vec<Fixation>) -> Result<Self> {
        if fixations.is_empty() {
            return Err(Error::EmptyInput("fixation sequence has no fixations".into()));
        }
        for f in &fixations {
            Fixation::checked(f.start, f.duration, f.x, f.y)?;
            if !(0.0..=1.0).contains(&f.x) || !(0.0..=1.0).contains(&f.y) {
                return Err(Error::contract(format!(
                    "fixation location ({}, {}) outside the unit square",
                    f.x, f.y
                )));
            }
        }
        for (i, w) in fixations.windows(2).enumerate() {
            if w[0].start + w[0].duration > w[1].start + OVERLAP_TOLERANCE {
                return Err(Error::contract(format!(
                    "fixations {i} and {} overlap in time",
                    i + 1
                )));
            }
        }
        Ok(FixationSequence { fixations })
    }

    /// Builds a sequence without the temporal-order check, for callers that
    /// deliberately reorder fixations (order only matters through start times).
    pub fn unordered(fixations: Vec<Fixation>) -> Result<Self> {
        if fixations.is_empty() {
            return Err(Error::EmptyInput("fixation sequence has no fixations".into()));
        }
        for f in &fixations {
            let (_, clamped) = Fixation::checked(f.start, f.duration, f.x, f.y)?;
            if clamped {
                return Err(Error::contract("fixation location outside the unit square"));
            }
        }
        Ok(FixationSequence { fixations })
    }

    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    pub fn fixations(&self) -> &[Fixation] {
        &self.fixations
    }

    pub fn starts(&self) -> Vec<f64> {
        self.fixations.iter().map(|f| f.start).collect()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.fixations.iter().map(|f| f.duration).collect()
    }

    /// `T×2` matrix of `(x, y)`.
    pub fn coords(&self) -> Tensor {
        let data = self.fixations.iter().flat_map(|f| [f.x, f.y]).collect();
        Tensor::new([self.len(), 2], data).expect("non-empty")
    }

    /// The `T×4` matrix `[start, duration, x, y]`.
    pub fn to_matrix(&self) -> Tensor {
        let data = self
            .fixations
            .iter()
            .flat_map(|f| [f.start, f.duration, f.x, f.y])
            .collect();
        Tensor::new([self.len(), 4], data).expect("non-empty")
    }

    pub fn total_duration(&self) -> f64 {
        self.fixations.iter().map(|f| f.duration).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(start: f64, duration: f64) -> Fixation {
        Fixation {
            start,
            duration,
            x: 0.5,
            y: 0.5,
        }
    }

    #[test]
    fn overlap_is_rejected() {
        assert!(FixationSequence::new(vec![fx(0.0, 0.5), fx(0.4, 0.2)]).is_err());
        assert!(FixationSequence::new(vec![fx(0.0, 0.5), fx(0.5, 0.2)]).is_ok());
        assert!(FixationSequence::new(vec![]).is_err());
    }

    #[test]
    fn clamping_is_reported() {
        let (f, clamped) = Fixation::checked(0.0, 0.1, 1.2, -0.1).unwrap();
        assert!(clamped);
        assert_eq!((f.x, f.y), (1.0, 0.0));
        assert!(Fixation::checked(0.0, 0.0, 0.5, 0.5).is_err());
    }
}
