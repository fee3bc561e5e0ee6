//! Shared transformer building blocks on top of the tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ragged::RaggedVar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// One forward pass: the tape plus read access to the parameters.
pub struct Forward<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    /// When false, LoRA adapters are skipped and only base weights are used.
    pub use_lora: bool,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Forward {
            g: Graph::new(),
            store,
            use_lora: true,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Normal(0, σ²) truncated to ±2σ by resampling.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Low-rank update `scale·B·A` on top of a frozen base weight.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `r×d_in`, small random init.
    pub a: ParamId,
    /// `d_out×r`, zero init.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    /// `alpha / rank`
    pub scale: f64,
}

/// `y = x·Wᵀ + b`, with `W` stored `[d_out × d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.register(format!("{name}.weight"), trunc_normal(rng, &[d_out, d_in], INIT_STD), true);
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([d_out]), false);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros([d_out, d_in]), true);
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([d_out]), false);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        }
    }

    /// Adds a rank-`rank` adapter. `A` is drawn uniformly in `±1/√d_in`, `B` is zero.
    pub fn attach_lora<R: Rng>(&mut self, store: &mut ParamStore, rank: usize, alpha: f64, rng: &mut R) {
        let name = store.get(self.weight).name.trim_end_matches(".weight").to_string();
        let bound = 1.0 / (self.d_in as f64).sqrt();
        let a_data = (0..rank * self.d_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let a = store.register(
            format!("{name}.lora_a"),
            Tensor::new([rank, self.d_in], a_data).expect("shape"),
            true,
        );
        let b = store.register(format!("{name}.lora_b"), Tensor::zeros([self.d_out, rank]), true);
        self.lora = Some(LoraAdapter {
            a,
            b,
            rank,
            alpha,
            scale: alpha / rank as f64,
        });
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let cols = cx.g.value(x).cols();
        if cols != self.d_in {
            return Err(Error::Dimension {
                op: "linear",
                lhs: cx.g.value(x).shape().to_vec(),
                rhs: vec![self.d_out, self.d_in],
            });
        }
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        let mut y = cx.g.matmul_bt(x, w)?;
        if let (Some(lora), true) = (&self.lora, cx.use_lora) {
            let a = cx.param(lora.a);
            let bm = cx.param(lora.b);
            let xa = cx.g.matmul_bt(x, a)?;
            let xab = cx.g.matmul_bt(xa, bm)?;
            let delta = cx.g.scale(xab, lora.scale)?;
            y = cx.g.add(y, delta)?;
        }
        cx.g.add_tiled(y, b)
    }

    /// Every parameter this layer owns, adapter included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight, self.bias];
        if let Some(l) = &self.lora {
            ids.extend([l.a, l.b]);
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.register(format!("{name}.gain"), Tensor::full([d], 1.0), false),
            bias: store.register(format!("{name}.bias"), Tensor::zeros([d]), false),
        }
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let g = cx.param(self.gain);
        let b = cx.param(self.bias);
        cx.g.layernorm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng),
        }
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.gelu(h)?;
        self.fc2.forward(cx, h)
    }
}

/// Multi-head attention projections. Head width is `d / heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Attends `query` rows over `key`/`value` rows element by element.
    ///
    /// `key` and `value` share the row layout of `kv`. Returns the projected
    /// output and the attention node, whose weights can be read back from the
    /// tape.
    pub fn forward(
        &self,
        cx: &mut Forward,
        query: &RaggedVar,
        key: Var,
        value: Var,
        kv: &RaggedVar,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(cx, query.values)?;
        let k = self.k.forward(cx, key)?;
        let v = self.v.forward(cx, value)?;
        let att = cx
            .g
            .attention(q, k, v, query.offsets.clone(), kv.offsets.clone(), self.heads)?;
        let out = self.o.forward(cx, att)?;
        Ok((out, att))
    }

    pub fn self_attention(&self, cx: &mut Forward, x: &RaggedVar) -> Result<(Var, Var)> {
        self.forward(cx, x, x.values, x.values, x)
    }
}

/// Pre-norm self-attention block: `x += attn(ln1(x)); x += mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, rng),
        }
    }

    pub fn forward(&self, cx: &mut Forward, x: &RaggedVar) -> Result<RaggedVar> {
        let h = self.ln1.forward(cx, x.values)?;
        let (a, _) = self.attn.self_attention(cx, &x.with_values(h))?;
        let x1 = cx.g.add(x.values, a)?;
        let h = self.ln2.forward(cx, x1)?;
        let m = self.mlp.forward(cx, h)?;
        let x2 = cx.g.add(x1, m)?;
        Ok(x.with_values(x2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn linear_width_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let mut cx = Forward::new(&store);
        let x = cx.g.constant(Tensor::zeros([4, 2]));
        assert!(matches!(lin.forward(&mut cx, x), Err(Error::Dimension { .. })));
    }
}
