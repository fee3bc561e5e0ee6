//! Central finite-difference check of every parameter group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Example, FixationFormer};
use crate::nn::Forward;

/// Denominator floor of the relative error. Groups whose true gradient is
/// identically zero (key biases under softmax) are held to `tolerance·NORM_FLOOR`
/// absolute error instead.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Std of the Gaussian jitter added to every parameter first, so that
    /// zero-initialized tensors do not hide gradient paths.
    pub jitter: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient of the named group; exercises the failure path.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            jitter: 0.1,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub group: String,
    pub entries: usize,
    pub analytic_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`
    pub rel_error: f64,
    pub passed: bool,
}

fn loss_of(model: &FixationFormer, batch: &[Example], labels: &[usize]) -> Result<f64> {
    let mut cx = Forward::new(&model.params);
    let (loss, _) = model.loss(&mut cx, batch, labels)?;
    Ok(cx.g.value(loss).data()[0])
}

/// Compares analytic and numerical gradients of the cross-entropy loss, one
/// row per parameter tensor.
///
/// Works on a copy: every parameter is jittered and made trainable.
pub fn gradcheck(
    model: &FixationFormer,
    batch: &[Example],
    labels: &[usize],
    opts: &GradcheckOptions,
) -> Result<Vec<GradcheckRow>> {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for p in m.params.iter_mut() {
        p.requires_grad = true;
        for v in p.value.data_mut() {
            *v += opts.jitter * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let grads = {
        let mut cx = Forward::new(&m.params);
        let (loss, _) = m.loss(&mut cx, batch, labels)?;
        cx.g.backward(loss)?
    };
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let name = m.params.get(id).name.clone();
        let n = m.params.get(id).value.len();
        let mut analytic = match grads.param(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        if opts.corrupt.as_deref() == Some(name.as_str()) {
            analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
        }
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = m.params.get(id).value.data()[i];
            m.params.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let up = loss_of(&m, batch, labels)?;
            m.params.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let down = loss_of(&m, batch, labels)?;
            m.params.get_mut(id).value.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * opts.step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let (na, nn) = (norm(&analytic), norm(&numeric));
        let rel = norm(&diff) / na.max(nn).max(NORM_FLOOR);
        rows.push(GradcheckRow {
            group: name,
            entries: n,
            analytic_norm: na,
            rel_error: rel,
            passed: rel < opts.tolerance,
        });
    }
    Ok(rows)
}
