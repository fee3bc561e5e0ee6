//! Ragged versus padded gaze batches: value-buffer accounting and timing of
//! image→gaze cross-attention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MultiHeadAttention;
use crate::ragged::{ragged_cross_attention, RaggedBatch};
use crate::tensor::kernels;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LengthProfile {
    /// `batch` sequences of length `len`.
    Equal { batch: usize, len: usize },
    /// Alternating lengths 1 and 32.
    Mixed { batch: usize },
    /// 90% length 4, 10% length 64 (at least one long sequence).
    Skewed { batch: usize },
    Custom(Vec<usize>),
}

impl LengthProfile {
    pub fn name(&self) -> String {
        match self {
            LengthProfile::Equal { .. } => "equal".into(),
            LengthProfile::Mixed { .. } => "mixed".into(),
            LengthProfile::Skewed { .. } => "skewed".into(),
            LengthProfile::Custom(_) => "custom".into(),
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        match *self {
            LengthProfile::Equal { batch, len } => vec![len; batch],
            LengthProfile::Mixed { batch } => (0..batch).map(|i| if i % 2 == 0 { 1 } else { 32 }).collect(),
            LengthProfile::Skewed { batch } => {
                let long = (batch / 10).max(1);
                (0..batch).map(|i| if i < batch - long { 4 } else { 64 }).collect()
            }
            LengthProfile::Custom(ref v) => v.clone(),
        }
    }
}

/// Closed-form buffer ratio `Σ Tᵢ / (B·max Tᵢ)`.
pub fn closed_form_ratio(lengths: &[usize]) -> f64 {
    let sum: usize = lengths.iter().sum();
    let max = lengths.iter().copied().max().unwrap_or(0);
    sum as f64 / (lengths.len() * max) as f64
}

/// Zero-padded `B×max T×d` buffer and its boolean key mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub max_len: usize,
    pub width: usize,
}

impl PaddedBatch {
    pub fn from_ragged(r: &RaggedBatch) -> Self {
        let (b, t, d) = (r.batch_size(), r.max_len(), r.width());
        let mut values = vec![0.0; b * t * d];
        let mut mask = vec![false; b * t];
        for e in 0..b {
            let rows = r.element_data(e);
            values[e * t * d..e * t * d + rows.len()].copy_from_slice(rows);
            for m in &mut mask[e * t..e * t + rows.len() / d] {
                *m = true;
            }
        }
        PaddedBatch {
            values,
            mask,
            batch: b,
            max_len: t,
            width: d,
        }
    }
}

/// Cross-attention over a padded key set: masked keys get `-∞` logits.
pub fn padded_cross_attention(
    queries: &RaggedBatch,
    keys: &PaddedBatch,
    attn: &MultiHeadAttention,
    store: &ParamStore,
) -> Result<Vec<Tensor>> {
    if queries.batch_size() != keys.batch {
        return Err(Error::contract("query and key batch sizes differ"));
    }
    let (t, d, h) = (keys.max_len, keys.width, attn.heads);
    let dh = d / h;
    let project = |lin: &crate::nn::Linear, x: &Tensor| -> Tensor {
        let mut y = x.matmul(&store.value(lin.weight).transpose().expect("matrix")).expect("widths match");
        let b = store.value(lin.bias).data();
        for row in y.data_mut().chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        y
    };
    let mut out = Vec::with_capacity(keys.batch);
    for e in 0..keys.batch {
        let x = queries.element(e);
        let kv = Tensor::new([t, d], keys.values[e * t * d..(e + 1) * t * d].to_vec())?;
        let (q, k, v) = (project(&attn.q, &x), project(&attn.k, &kv), project(&attn.v, &kv));
        let tq = x.rows();
        let mut ctx = vec![0.0; tq * d];
        let scale = 1.0 / (dh as f64).sqrt();
        for head in 0..h {
            for i in 0..tq {
                let qi = &q.row(i)[head * dh..(head + 1) * dh];
                let mut logits: Vec<f64> = (0..t)
                    .map(|j| {
                        if keys.mask[e * t + j] {
                            kernels::dot(qi, &k.row(j)[head * dh..(head + 1) * dh]) * scale
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                kernels::softmax_in_place(&mut logits);
                for (j, &p) in logits.iter().enumerate() {
                    if p != 0.0 {
                        let vj = &v.row(j)[head * dh..(head + 1) * dh];
                        for (c, vv) in ctx[i * d + head * dh..i * d + (head + 1) * dh].iter_mut().zip(vj) {
                            *c += p * vv;
                        }
                    }
                }
            }
        }
        out.push(project(&attn.o, &Tensor::new([tq, d], ctx)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub profile: String,
    pub lengths: Vec<usize>,
    pub width: usize,
    /// Scalars in the ragged gaze value buffer.
    pub ragged_values: usize,
    /// Scalars in the padded gaze value buffer.
    pub padded_values: usize,
    pub ratio: f64,
    pub closed_form_ratio: f64,
    /// Largest |ragged − padded| over all outputs.
    pub max_abs_diff: f64,
    pub ragged_ms: f64,
    pub padded_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub width: usize,
    pub heads: usize,
    /// Image-side queries per element.
    pub queries: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            width: 64,
            heads: 4,
            queries: 65,
            reps: 5,
            seed: 0,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new([rows, cols], data).expect("positive extents")
}

/// Measures one length profile. Sizes are exact counts of the buffers
/// actually allocated; times are medians over `reps` runs.
pub fn bench_profile(profile: &LengthProfile, opts: &BenchOptions) -> Result<BenchRow> {
    let lengths = profile.lengths();
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::contract("length profile needs at least one non-empty sequence"));
    }
    let d = opts.width;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "bench", d, opts.heads, &mut rng);
    let gaze: Vec<Tensor> = lengths.iter().map(|&t| gaussian(&mut rng, t, d)).collect();
    let images: Vec<Tensor> = lengths.iter().map(|_| gaussian(&mut rng, opts.queries, d)).collect();
    let q = RaggedBatch::build(&images)?;
    let kv = RaggedBatch::build(&gaze)?;
    let padded = PaddedBatch::from_ragged(&kv);

    let reps = opts.reps.max(1);
    let mut ragged_times = Vec::with_capacity(reps);
    let mut padded_times = Vec::with_capacity(reps);
    let (mut r_out, mut p_out) = (None, None);
    for _ in 0..reps {
        let t0 = Instant::now();
        r_out = Some(ragged_cross_attention(&q, &kv, &attn, &store)?);
        ragged_times.push(t0.elapsed().as_secs_f64() * 1e3);
        let t0 = Instant::now();
        p_out = Some(padded_cross_attention(&q, &padded, &attn, &store)?);
        padded_times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let (r_out, p_out) = (r_out.expect("reps ≥ 1"), p_out.expect("reps ≥ 1"));
    let max_abs_diff = r_out
        .split()
        .iter()
        .zip(&p_out)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };

    let ragged_values = kv.value_count();
    let padded_values = padded.values.len();
    Ok(BenchRow {
        profile: profile.name(),
        closed_form_ratio: closed_form_ratio(&lengths),
        lengths,
        width: d,
        ragged_values,
        padded_values,
        ratio: ragged_values as f64 / padded_values as f64,
        max_abs_diff,
        ragged_ms: median(&mut ragged_times),
        padded_ms: median(&mut padded_times),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_have_expected_shapes() {
        assert_eq!(LengthProfile::Mixed { batch: 4 }.lengths(), vec![1, 32, 1, 32]);
        let s = LengthProfile::Skewed { batch: 20 }.lengths();
        assert_eq!(s.iter().filter(|&&t| t == 64).count(), 2);
        assert_eq!(closed_form_ratio(&[2, 2, 2]), 1.0);
    }

    #[test]
    fn equal_profile_has_no_waste() {
        let opts = BenchOptions {
            width: 8,
            heads: 2,
            queries: 3,
            reps: 1,
            seed: 1,
        };
        let row = bench_profile(&LengthProfile::Equal { batch: 3, len: 5 }, &opts).unwrap();
        assert_eq!(row.ratio, 1.0);
        assert_eq!(row.ragged_values, 3 * 5 * 8);
        assert!(row.max_abs_diff < 1e-12);
    }
}
