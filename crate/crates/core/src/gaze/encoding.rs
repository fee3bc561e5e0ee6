use std::sync::Arc;

use rand::Rng;

use super::FixationSequence;
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Forward, INIT_STD};
use crate::ragged::{RaggedBatch, RaggedVar};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Temporal encoding base for start times in seconds.
pub const TIME_SCALE: f64 = 10_000.0;

/// Spatial encoding base for coordinates in `[0, 1]`. Below one, so the
/// frequencies grow from 1 to roughly `1/SPATIAL_SCALE` radians per image width.
pub const SPATIAL_SCALE: f64 = 0.01;

/// `pe[t, 2i] = sin(τ_t / s^(2i/d))`, `pe[t, 2i+1] = cos(τ_t / s^(2i/d))`.
pub fn sinusoidal_pe(times: &[f64], d_model: usize, scale: f64) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::contract(format!(
            "sinusoidal encoding width must be even and positive, got {d_model}"
        )));
    }
    if times.is_empty() {
        return Err(Error::EmptyInput("no positions to encode".into()));
    }
    let mut data = Vec::with_capacity(times.len() * d_model);
    for &tau in times {
        for i in 0..d_model / 2 {
            let denom = scale.powf(2.0 * i as f64 / d_model as f64);
            let phase = tau / denom;
            data.push(phase.sin());
            data.push(phase.cos());
        }
    }
    Tensor::new([times.len(), d_model], data)
}

/// Axis-separable spatial encoding: `[pe(x) ‖ pe(y)]`, each half `d/2` wide.
pub fn spatial_pe(coords: &Tensor, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(Error::contract(format!(
            "spatial encoding width must be divisible by 4, got {d_model}"
        )));
    }
    if coords.shape().len() != 2 || coords.cols() != 2 {
        return Err(Error::contract(format!(
            "coordinates must be N×2, got {:?}",
            coords.shape()
        )));
    }
    if coords.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("spatial coordinates must lie in [0, 1]"));
    }
    let n = coords.rows();
    let xs: Vec<f64> = (0..n).map(|r| coords.row(r)[0]).collect();
    let ys: Vec<f64> = (0..n).map(|r| coords.row(r)[1]).collect();
    let half = d_model / 2;
    let px = sinusoidal_pe(&xs, half, SPATIAL_SCALE)?;
    let py = sinusoidal_pe(&ys, half, SPATIAL_SCALE)?;
    let mut data = Vec::with_capacity(n * d_model);
    for r in 0..n {
        data.extend_from_slice(px.row(r));
        data.extend_from_slice(py.row(r));
    }
    Tensor::new([n, d_model], data)
}

/// Encoded fixation sequence, one row per fixation.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeTokens {
    pub values: Tensor,
}

/// Learned projections of duration and location into token space.
///
/// A token is `pe(start) + duration·L_D + b_D + (x, y)·L_C + b_C`; the biases
/// start at zero.
#[derive(Clone, Debug)]
pub struct GazeEncoder {
    /// `1×d`
    pub l_d: ParamId,
    /// `2×d`
    pub l_c: ParamId,
    pub b_d: ParamId,
    pub b_c: ParamId,
    pub d_model: usize,
}

impl GazeEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut R) -> Self {
        GazeEncoder {
            l_d: store.register(format!("{name}.l_d"), trunc_normal(rng, &[1, d_model], INIT_STD), true),
            l_c: store.register(format!("{name}.l_c"), trunc_normal(rng, &[2, d_model], INIT_STD), true),
            b_d: store.register(format!("{name}.b_d"), Tensor::zeros([d_model]), false),
            b_c: store.register(format!("{name}.b_c"), Tensor::zeros([d_model]), false),
            d_model,
        }
    }

    fn check_widths(&self, store: &ParamStore) -> Result<()> {
        let d = self.d_model;
        for (id, rows) in [(self.l_d, 1), (self.l_c, 2)] {
            let shape = store.value(id).shape();
            if shape != [rows, d] {
                return Err(Error::Dimension {
                    op: "encode_gaze",
                    lhs: shape.to_vec(),
                    rhs: vec![rows, d],
                });
            }
        }
        Ok(())
    }

    /// Tokens for a batch of `T×4` fixation matrices `[start, duration, x, y]`.
    pub fn forward_matrices(&self, cx: &mut Forward, mats: &[Tensor]) -> Result<RaggedVar> {
        self.check_widths(cx.store)?;
        if let Some(m) = mats.iter().find(|m| m.shape().len() != 2 || m.cols() != 4) {
            return Err(Error::contract(format!(
                "fixation matrix must be T×4, got {:?}",
                m.shape()
            )));
        }
        let flat = RaggedBatch::build(mats)?;
        let f = flat.values();
        let n = f.rows();
        let col = |c: usize| (0..n).map(|r| f.row(r)[c]).collect::<Vec<f64>>();
        let starts = col(0);
        let dur = Tensor::new([n, 1], col(1))?;
        let coords = Tensor::new([n, 2], (0..n).flat_map(|r| [f.row(r)[2], f.row(r)[3]]).collect())?;
        let pe = sinusoidal_pe(&starts, self.d_model, TIME_SCALE)?;

        let dur = cx.g.constant(dur);
        let coords = cx.g.constant(coords);
        let pe = cx.g.constant(pe);
        let (l_d, l_c) = (cx.param(self.l_d), cx.param(self.l_c));
        let (b_d, b_c) = (cx.param(self.b_d), cx.param(self.b_c));
        let td = cx.g.matmul(dur, l_d)?;
        let td = cx.g.add_tiled(td, b_d)?;
        let tc = cx.g.matmul(coords, l_c)?;
        let tc = cx.g.add_tiled(tc, b_c)?;
        let lin = cx.g.add(td, tc)?;
        let tokens = cx.g.add(pe, lin)?;
        Ok(RaggedVar::new(tokens, Arc::from(flat.offsets())))
    }

    pub fn forward(&self, cx: &mut Forward, seqs: &[&FixationSequence]) -> Result<RaggedVar> {
        let mats: Vec<Tensor> = seqs.iter().map(|s| s.to_matrix()).collect();
        self.forward_matrices(cx, &mats)
    }

    /// Tokens for one sequence, outside any training graph.
    pub fn encode(&self, seq: &FixationSequence, store: &ParamStore) -> Result<GazeTokens> {
        self.encode_matrix(&seq.to_matrix(), store)
    }

    pub fn encode_matrix(&self, mat: &Tensor, store: &ParamStore) -> Result<GazeTokens> {
        let mut cx = Forward::new(store);
        let r = self.forward_matrices(&mut cx, std::slice::from_ref(mat))?;
        Ok(GazeTokens {
            values: cx.g.value(r.values).clone(),
        })
    }
}
