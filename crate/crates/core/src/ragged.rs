//! Padding-free batches of variable-length token sequences.
//!
//! A [`RaggedBatch`] stores `B` sequences back to back in one `(ΣTᵢ)×d`
//! buffer plus `B+1` offsets, CSR style. Attention over a ragged batch runs
//! per element on contiguous slices, so no mask and no padding exist anywhere.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Forward, MultiHeadAttention};
use crate::tensor::{ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RaggedBatch {
    values: Tensor,
    offsets: Vec<usize>,
}

impl RaggedBatch {
    /// Concatenates `Tᵢ×d` sequences.
    pub fn build(seqs: &[Tensor]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::contract("ragged batch needs at least one sequence"))?;
        let d = first.cols();
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        offsets.push(0);
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let mut data = Vec::with_capacity(total);
        for (i, s) in seqs.iter().enumerate() {
            if s.shape().len() != 2 || s.cols() != d {
                return Err(Error::contract(format!(
                    "sequence {i} has shape {:?}, expected width {d}",
                    s.shape()
                )));
            }
            data.extend_from_slice(s.data());
            offsets.push(offsets[i] + s.rows());
        }
        let rows = *offsets.last().unwrap();
        Ok(RaggedBatch {
            values: Tensor::new([rows, d], data)?,
            offsets,
        })
    }

    pub fn from_parts(values: Tensor, offsets: Vec<usize>) -> Result<Self> {
        validate_offsets(&offsets, values.rows())?;
        Ok(RaggedBatch { values, offsets })
    }

    /// Every element has exactly `len` rows.
    pub fn uniform(values: Tensor, len: usize) -> Result<Self> {
        if len == 0 || values.rows() % len != 0 {
            return Err(Error::contract(format!(
                "{} rows do not split into blocks of {len}",
                values.rows()
            )));
        }
        let offsets = (0..=values.rows() / len).map(|i| i * len).collect();
        Ok(RaggedBatch { values, offsets })
    }

    pub fn split(&self) -> Vec<Tensor> {
        (0..self.batch_size()).map(|i| self.element(i)).collect()
    }

    pub fn element(&self, i: usize) -> Tensor {
        let d = self.width();
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        Tensor::new([b - a, d], self.values.data()[a * d..b * d].to_vec()).expect("valid slice")
    }

    /// Row-major view of element `i` without copying.
    pub fn element_data(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.values.data()[self.offsets[i] * d..self.offsets[i + 1] * d]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn total_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn max_len(&self) -> usize {
        self.lengths().into_iter().max().unwrap_or(0)
    }

    /// Number of `f64` values held, exactly `ΣTᵢ·d`.
    pub fn value_count(&self) -> usize {
        self.values.len()
    }
}

pub(crate) fn validate_offsets(offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != rows {
        return Err(Error::contract(format!(
            "offsets {offsets:?} must start at 0 and end at {rows}"
        )));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("every ragged element needs at least one row"));
    }
    Ok(())
}

/// A ragged batch living on a tape.
#[derive(Clone, Debug)]
pub struct RaggedVar {
    pub values: Var,
    pub offsets: Arc<[usize]>,
}

impl RaggedVar {
    pub fn new(values: Var, offsets: Arc<[usize]>) -> Self {
        RaggedVar { values, offsets }
    }

    pub fn with_values(&self, values: Var) -> Self {
        RaggedVar {
            values,
            offsets: self.offsets.clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Row index of the first token of every element.
    pub fn first_rows(&self) -> Vec<usize> {
        self.offsets[..self.offsets.len() - 1].to_vec()
    }
}

/// Unmasked multi-head attention of every query element over its own
/// key/value element, outside any training graph.
pub fn ragged_cross_attention(
    q: &RaggedBatch,
    kv: &RaggedBatch,
    attn: &MultiHeadAttention,
    store: &ParamStore,
) -> Result<RaggedBatch> {
    if q.batch_size() != kv.batch_size() {
        return Err(Error::contract(format!(
            "batch count mismatch: {} query vs {} key/value elements",
            q.batch_size(),
            kv.batch_size()
        )));
    }
    let mut cx = Forward::new(store);
    let qv = cx.g.constant(q.values().clone());
    let kvv = cx.g.constant(kv.values().clone());
    let qr = RaggedVar::new(qv, q.offsets().into());
    let kr = RaggedVar::new(kvv, kv.offsets().into());
    let (out, _) = attn.forward(&mut cx, &qr, kvv, kvv, &kr)?;
    RaggedBatch::from_parts(cx.g.value(out).clone(), q.offsets().to_vec())
}
