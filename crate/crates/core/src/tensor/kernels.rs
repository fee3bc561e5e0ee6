//! Slice-level numerical kernels shared by the tape and by the value-only APIs.
//!
//! Every kernel computes each output element with a fixed, sequential
//! reduction order. Row-parallel execution therefore never changes a bit.

use rayon::prelude::*;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(ci, ai): (&mut [f64], &[f64])| {
        for (p, &aip) in ai.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in ci.iter_mut().zip(bp) {
                *cij += aip * bpj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(row);
    } else {
        c.chunks_mut(n).zip(a.chunks(k)).for_each(row);
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(ci, ai): (&mut [f64], &[f64])| {
        for (cij, bj) in ci.iter_mut().zip(b.chunks(k)) {
            *cij = dot(ai, bj);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(row);
    } else {
        c.chunks_mut(n).zip(a.chunks(k)).for_each(row);
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    out.chunks_mut(cols).for_each(softmax_in_place);
    out
}

/// Given softmax output `y` and upstream `g`, returns `y ⊙ (g − ⟨g, y⟩)` row-wise.
pub fn softmax_rows_backward(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((o, yr), gr) in out.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
        let inner = dot(yr, gr);
        for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
            *oi = yi * (gi - inner);
        }
    }
    out
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-row normalization statistics.
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layernorm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, NormStats) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (o, xr) in out.chunks_mut(d).zip(x.chunks(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (j, (oj, &xj)) in o.iter_mut().zip(xr).enumerate() {
            *oj = (xj - mean) * rstd * gain[j] + bias[j];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layernorm_backward(
    x: &[f64],
    gain: &[f64],
    stats: &NormStats,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gh = vec![0.0; d];
    for (r, ((dxr, xr), gr)) in dx.chunks_mut(d).zip(x.chunks(d)).zip(g.chunks(d)).enumerate() {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            gh[j] = gr[j] * gain[j];
            dgain[j] += gr[j] * xhat[j];
            dbias[j] += gr[j];
        }
        let mean_gh = gh.iter().sum::<f64>() / d as f64;
        let mean_ghx = dot(&gh, &xhat) / d as f64;
        for j in 0..d {
            dxr[j] = rstd * (gh[j] - mean_gh - xhat[j] * mean_ghx);
        }
    }
    (dx, dgain, dbias)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Multi-head attention of one (query block, key/value block) pair.
///
/// `q` is `tq×d`, `k` and `v` are `tk×d`, heads split the columns evenly.
/// Returns the `tq×d` output and the per-head weights laid out `[head][tq][tk]`.
pub fn attention_block(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    let mut probs = vec![0.0; heads * tq * tk];
    for h in 0..heads {
        let c0 = h * dh;
        let ph = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        for i in 0..tq {
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let pi = &mut ph[i * tk..(i + 1) * tk];
            for (j, pij) in pi.iter_mut().enumerate() {
                *pij = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
            }
            softmax_in_place(pi);
            let oi = &mut out[i * d + c0..i * d + c0 + dh];
            for (j, &pij) in pi.iter().enumerate() {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention_block`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; tq * d];
    let mut dk = vec![0.0; tk * d];
    let mut dv = vec![0.0; tk * d];
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        let c0 = h * dh;
        let ph = &probs[h * tq * tk..(h + 1) * tq * tk];
        for i in 0..tq {
            let pi = &ph[i * tk..(i + 1) * tk];
            let gi = &g[i * d + c0..i * d + c0 + dh];
            for j in 0..tk {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                dp[j] = dot(gi, vj);
                let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                for (dvv, &gg) in dvj.iter_mut().zip(gi) {
                    *dvv += pi[j] * gg;
                }
            }
            let inner = dot(&dp, pi);
            let qi = &q[i * d + c0..i * d + c0 + dh];
            for j in 0..tk {
                let ds = pi[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d + c0..j * d + c0 + dh];
                let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                for (dqq, &kk) in dqi.iter_mut().zip(kj) {
                    *dqq += ds * kk;
                }
                let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                for (dkk, &qq) in dkj.iter_mut().zip(qi) {
                    *dkk += ds * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}
