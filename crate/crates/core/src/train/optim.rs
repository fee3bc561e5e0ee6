use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `lr_max·(1 + cos(π·step/total))/2`, clamped at 0. A zero-length schedule stays at `lr_max`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    (lr_max * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0).max(0.0)
}

/// One AdamW update of a flat parameter at step `t ≥ 1`.
///
/// Decay `p ← p − lr·wd·p` is applied first and only when `decay` is set; the
/// bias-corrected moment step never sees it.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hp: &AdamWParams,
    decay: bool,
) -> Result<()> {
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            lhs: vec![p.len()],
            rhs: vec![g.len(), m.len(), v.len()],
        });
    }
    if t == 0 {
        return Err(Error::contract("adamw step index starts at 1"));
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let shrink = if decay { lr * hp.weight_decay } else { 0.0 };
    for i in 0..p.len() {
        p[i] -= shrink * p[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// AdamW over a [`ParamStore`]. Parameters that are frozen or received no
/// gradient are left untouched, decay included.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: AdamWParams,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    t: u64,
}

impl AdamW {
    pub fn new(hp: AdamWParams) -> Self {
        AdamW {
            hp,
            moments: Vec::new(),
            t: 0,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (p, slot) in store.iter_mut().zip(&mut self.moments) {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let n = p.value.len();
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adamw_step(p.value.data_mut(), g.data(), m, v, self.t, lr, &self.hp, p.decay)?;
        }
        Ok(())
    }
}
