//! The assembled classifier for every integration variant.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gaze::{spatial_pe, FixationSequence, GazeEncoder};
use crate::integration::{image_spatial_pe, IntegrationLayer, IntegrationVariant, Streams};
use crate::nn::{EncoderBlock, Forward, Linear};
use crate::ragged::RaggedVar;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::vit::{ImageEncoder, ImageSample};

/// LoRA settings for the image encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0 }
    }
}

/// One classification input. Which fields are required depends on the variant.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: Option<&'a ImageSample>,
    pub gaze: Option<&'a FixationSequence>,
}

impl<'a> Example<'a> {
    pub fn new(image: &'a ImageSample, gaze: &'a FixationSequence) -> Self {
        Example {
            image: Some(image),
            gaze: Some(gaze),
        }
    }
}

/// Tape handles produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `B×n_classes`
    pub logits: Var,
    /// Image→gaze attention node of each integration layer.
    pub image_to_gaze: Vec<Var>,
    pub gaze_to_image: Vec<Var>,
    /// Gaze tokens after the last integration layer (or straight from the
    /// gaze encoder when there are no layers).
    pub gaze_tokens: Option<RaggedVar>,
}

/// Cross-attention weights of one (layer, head, batch element).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub element: usize,
    /// `(1+P)×T`: image-token queries by gaze-token keys.
    pub weights: Tensor,
}

// RNG stream per submodule, so variants built from one seed share the
// initialization of the parts they have in common.
const STREAM_ENCODER: u64 = 1;
const STREAM_LORA: u64 = 2;
const STREAM_GAZE: u64 = 3;
const STREAM_INTEGRATION: u64 = 4;
const STREAM_GAZE_ONLY: u64 = 5;
const STREAM_HEAD: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug)]
pub struct FixationFormer {
    pub config: ModelConfig,
    pub variant: IntegrationVariant,
    pub params: ParamStore,
    pub encoder: Option<ImageEncoder>,
    pub gaze_encoder: Option<GazeEncoder>,
    pub layers: Vec<IntegrationLayer>,
    /// Learned `[CLS]` of the gaze-only encoder.
    pub gaze_cls: Option<ParamId>,
    pub gaze_blocks: Vec<EncoderBlock>,
    pub head: Linear,
}

impl FixationFormer {
    pub fn new(
        cfg: &ModelConfig,
        variant: IntegrationVariant,
        lora: Option<LoraConfig>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let d = cfg.d_model;

        let encoder = if variant.uses_image() {
            let mut enc = ImageEncoder::new(&mut params, cfg, &mut stream(seed, STREAM_ENCODER))?;
            if let Some(l) = lora {
                if l.rank == 0 {
                    return Err(Error::contract("LoRA rank must be positive"));
                }
                enc.attach_lora(&mut params, l.rank, l.alpha, &mut stream(seed, STREAM_LORA));
            }
            Some(enc)
        } else {
            None
        };

        let gaze_encoder = variant
            .uses_gaze()
            .then(|| GazeEncoder::new(&mut params, "gaze_encoder", d, &mut stream(seed, STREAM_GAZE)));

        let layers = if variant.has_cross_attention() {
            let mut rng = stream(seed, STREAM_INTEGRATION);
            let two_way = variant == IntegrationVariant::TwoWay;
            (0..cfg.n_integration_layers)
                .map(|i| IntegrationLayer::new(&mut params, &format!("integration.{i}"), cfg, two_way, &mut rng))
                .collect()
        } else {
            Vec::new()
        };

        let (gaze_cls, gaze_blocks) = if variant == IntegrationVariant::GazeOnly {
            let mut rng = stream(seed, STREAM_GAZE_ONLY);
            let cls = params.register("gaze_only.cls", Tensor::zeros([1, d]), false);
            let blocks = (0..cfg.n_encoder_layers)
                .map(|i| {
                    EncoderBlock::new(&mut params, &format!("gaze_only.blocks.{i}"), d, cfg.n_heads, cfg.mlp_hidden(), &mut rng)
                })
                .collect();
            (Some(cls), blocks)
        } else {
            (None, Vec::new())
        };

        let head = Linear::new(&mut params, "head", d, cfg.n_classes, &mut stream(seed, STREAM_HEAD));

        Ok(FixationFormer {
            config: cfg.clone(),
            variant,
            params,
            encoder,
            gaze_encoder,
            layers,
            gaze_cls,
            gaze_blocks,
            head,
        })
    }

    /// The training setup: LoRA on the image encoder (when there is one) and
    /// its base weights frozen.
    pub fn for_training(cfg: &ModelConfig, variant: IntegrationVariant, lora: LoraConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(cfg, variant, variant.uses_image().then_some(lora), seed)?;
        m.freeze_image_encoder();
        Ok(m)
    }

    pub fn lora(&self) -> Option<LoraConfig> {
        let enc = self.encoder.as_ref()?;
        let l = enc.blocks.first()?.attn.q.lora.as_ref()?;
        Some(LoraConfig {
            rank: l.rank,
            alpha: l.alpha,
        })
    }

    /// Freezes the image encoder's base weights; only adapters (if any) stay trainable there.
    pub fn freeze_image_encoder(&mut self) {
        if let Some(enc) = &self.encoder {
            for id in enc.base_params() {
                self.params.set_requires_grad(id, false);
            }
        }
    }

    pub fn frozen_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| !p.requires_grad)
            .map(|(id, _)| id)
            .collect()
    }

    fn check_inputs(&self, batch: &[Example]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        for (i, ex) in batch.iter().enumerate() {
            if self.variant.uses_image() && ex.image.is_none() {
                return Err(Error::contract(format!(
                    "example {i}: variant {} requires an image",
                    self.variant
                )));
            }
            if self.variant.uses_gaze() && ex.gaze.is_none() {
                return Err(Error::contract(format!(
                    "example {i}: variant {} requires a gaze sequence",
                    self.variant
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut Forward, batch: &[Example]) -> Result<ModelOutput> {
        self.check_inputs(batch)?;
        let images: Vec<&ImageSample> = batch.iter().filter_map(|e| e.image).collect();
        let seqs: Vec<&FixationSequence> = batch.iter().filter_map(|e| e.gaze).collect();

        let mut image_to_gaze = Vec::new();
        let mut gaze_to_image = Vec::new();
        let mut gaze_tokens = None;

        let (tokens, cls_rows) = match self.variant {
            IntegrationVariant::ImageOnly => {
                let x = self.encoder.as_ref().expect("image encoder").forward(cx, &images)?;
                let rows = x.first_rows();
                (x.values, rows)
            }
            IntegrationVariant::GazeOnly => {
                let g = self.gaze_encoder.as_ref().expect("gaze encoder").forward(cx, &seqs)?;
                gaze_tokens = Some(g.clone());
                let x = self.prepend_gaze_cls(cx, &g)?;
                let mut x = x;
                for b in &self.gaze_blocks {
                    x = b.forward(cx, &x)?;
                }
                let rows = x.first_rows();
                (x.values, rows)
            }
            IntegrationVariant::CrossAttention | IntegrationVariant::TwoWay => {
                let img = self.encoder.as_ref().expect("image encoder").forward(cx, &images)?;
                let gaze = self.gaze_encoder.as_ref().expect("gaze encoder").forward(cx, &seqs)?;
                let image_pe = cx.g.constant(image_spatial_pe(&self.config, images.len())?);
                let coords: Vec<f64> = seqs
                    .iter()
                    .flat_map(|s| s.fixations().iter().flat_map(|f| [f.x, f.y]))
                    .collect();
                let coords = Tensor::new([coords.len() / 2, 2], coords)?;
                let gaze_pe = cx.g.constant(spatial_pe(&coords, self.config.d_model)?);
                let mut s = Streams {
                    image: img,
                    gaze,
                    image_pe,
                    gaze_pe,
                };
                for layer in &self.layers {
                    let out = layer.forward(cx, &s)?;
                    image_to_gaze.push(out.image_to_gaze);
                    gaze_to_image.extend(out.gaze_to_image);
                    s.image = out.image;
                    s.gaze = out.gaze;
                }
                gaze_tokens = Some(s.gaze);
                let rows = s.image.first_rows();
                (s.image.values, rows)
            }
        };

        let cls = cx.g.gather_rows(tokens, &cls_rows)?;
        let logits = self.head.forward(cx, cls)?;
        Ok(ModelOutput {
            logits,
            image_to_gaze,
            gaze_to_image,
            gaze_tokens,
        })
    }

    fn prepend_gaze_cls(&self, cx: &mut Forward, g: &RaggedVar) -> Result<RaggedVar> {
        let cls = cx.param(self.gaze_cls.expect("gaze-only cls"));
        let mut parts = Vec::with_capacity(2 * g.batch_size());
        let mut offsets = Vec::with_capacity(g.batch_size() + 1);
        offsets.push(0);
        for e in 0..g.batch_size() {
            let (a, b) = (g.offsets[e], g.offsets[e + 1]);
            parts.push(cls);
            parts.push(cx.g.slice_rows(g.values, a, b)?);
            offsets.push(offsets[e] + 1 + b - a);
        }
        let x = cx.g.concat_rows(&parts)?;
        Ok(RaggedVar::new(x, Arc::from(offsets)))
    }

    /// Mean cross-entropy of a labelled batch, recorded on `cx`.
    pub fn loss(&self, cx: &mut Forward, batch: &[Example], labels: &[usize]) -> Result<(Var, ModelOutput)> {
        let out = self.forward(cx, batch)?;
        let loss = cx.g.cross_entropy(out.logits, labels)?;
        Ok((loss, out))
    }

    /// Logits `B×n_classes` outside any training graph.
    pub fn predict(&self, batch: &[Example]) -> Result<Tensor> {
        let mut cx = Forward::new(&self.params);
        let out = self.forward(&mut cx, batch)?;
        Ok(cx.g.value(out.logits).clone())
    }

    /// Logits with LoRA adapters bypassed.
    pub fn predict_base(&self, batch: &[Example]) -> Result<Tensor> {
        let mut cx = Forward::new(&self.params);
        cx.use_lora = false;
        let out = self.forward(&mut cx, batch)?;
        Ok(cx.g.value(out.logits).clone())
    }

    /// Logits of a single example, length `n_classes`.
    pub fn classify(&self, ex: Example) -> Result<Vec<f64>> {
        Ok(self.predict(&[ex])?.into_data())
    }

    /// Image→gaze weights of every integration layer, head and batch element.
    pub fn export_attention(&self, batch: &[Example]) -> Result<Vec<AttentionMap>> {
        if !self.variant.has_cross_attention() {
            return Err(Error::contract("no cross-attention in this variant"));
        }
        let mut cx = Forward::new(&self.params);
        let out = self.forward(&mut cx, batch)?;
        let n_img = self.config.n_image_tokens();
        let heads = self.config.n_heads;
        let mut maps = Vec::new();
        for (layer, &att) in out.image_to_gaze.iter().enumerate() {
            let per_elem = cx.g.attention_weights(att).expect("attention node");
            for (element, (w, ex)) in per_elem.iter().zip(batch).enumerate() {
                let t = ex.gaze.expect("checked").len();
                for head in 0..heads {
                    let block = w[head * n_img * t..(head + 1) * n_img * t].to_vec();
                    maps.push(AttentionMap {
                        layer,
                        head,
                        element,
                        weights: Tensor::new([n_img, t], block)?,
                    });
                }
            }
        }
        Ok(maps)
    }

    /// Parameters grouped by name, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(_, p)| p.name.clone()).collect()
    }
}
