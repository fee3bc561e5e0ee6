use super::{Fixation, FixationSequence, RawGazeSample};
use crate::error::{Error, Result};

/// Slack on the minimum-duration comparison so that sample clocks such as
/// `k/60` do not miss the boundary by one rounding step.
const DURATION_EPS: f64 = 1e-9;

/// Dispersion-threshold (I-DT) parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdtParams {
    /// Upper bound on `(max x − min x) + (max y − min y)` inside a fixation.
    pub max_dispersion: f64,
    /// Seconds between first and last member sample.
    pub min_duration: f64,
}

impl Default for IdtParams {
    fn default() -> Self {
        IdtParams {
            max_dispersion: 0.03,
            min_duration: 0.1,
        }
    }
}

#[derive(Clone, Copy)]
struct BBox {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl BBox {
    fn of(s: &RawGazeSample) -> Self {
        BBox {
            x0: s.x,
            x1: s.x,
            y0: s.y,
            y1: s.y,
        }
    }

    fn with(self, s: &RawGazeSample) -> Self {
        BBox {
            x0: self.x0.min(s.x),
            x1: self.x1.max(s.x),
            y0: self.y0.min(s.y),
            y1: self.y1.max(s.y),
        }
    }

    fn dispersion(&self) -> f64 {
        (self.x1 - self.x0) + (self.y1 - self.y0)
    }
}

/// Groups raw samples into fixations with the I-DT rules.
///
/// Invalid samples are dropped first. A window starting at sample `i` is first
/// grown to the shortest span reaching `min_duration`; if its dispersion is
/// within bounds it is extended greedily one sample at a time and emitted,
/// otherwise the window start advances by one sample.
pub fn detect_fixations(samples: &[RawGazeSample], params: IdtParams) -> Result<FixationSequence> {
    if !(params.max_dispersion >= 0.0 && params.min_duration > 0.0) {
        return Err(Error::contract(format!("invalid I-DT parameters {params:?}")));
    }
    let s: Vec<RawGazeSample> = samples.iter().copied().filter(|s| s.valid).collect();
    if s.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "need at least 2 valid gaze samples, got {}",
            s.len()
        )));
    }
    if s[0].t < 0.0 || s.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::contract(
            "gaze sample times must be non-negative and strictly increasing",
        ));
    }

    let n = s.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let Some(mut j) = (i + 1..n).find(|&j| s[j].t - s[i].t >= params.min_duration - DURATION_EPS)
        else {
            break;
        };
        let mut bbox = s[i..=j].iter().skip(1).fold(BBox::of(&s[i]), |b, p| b.with(p));
        if bbox.dispersion() > params.max_dispersion {
            i += 1;
            continue;
        }
        while j + 1 < n {
            let grown = bbox.with(&s[j + 1]);
            if grown.dispersion() > params.max_dispersion {
                break;
            }
            bbox = grown;
            j += 1;
        }
        let members = &s[i..=j];
        let count = members.len() as f64;
        let cx = members.iter().map(|p| p.x).sum::<f64>() / count;
        let cy = members.iter().map(|p| p.y).sum::<f64>() / count;
        let (fix, _) = Fixation::checked(s[i].t, s[j].t - s[i].t, cx, cy)?;
        out.push(fix);
        i = j + 1;
    }
    if out.is_empty() {
        return Err(Error::EmptyResult(
            "no window satisfied the dispersion and duration thresholds".into(),
        ));
    }
    FixationSequence::new(out)
}
