//! Vision transformer image encoder.
//!
//! Patches are embedded linearly, a learned `[CLS]` token is prepended and a
//! learned absolute position embedding added, then pre-norm self-attention
//! blocks run over the `1+P` tokens of each image.

use std::sync::Arc;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, EncoderBlock, Forward, Linear, INIT_STD};
use crate::ragged::RaggedVar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pixels: Tensor,
}

impl ImageSample {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 2 {
            return Err(Error::contract(format!(
                "image must be H×W, got {:?}",
                pixels.shape()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(ImageSample { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Encoder output: row 0 is `[CLS]`, rows `1..=P` are patch tokens in row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens {
    pub values: Tensor,
    pub patch_grid: (usize, usize),
}

/// `P×(patch·patch)` matrix of flattened patches, both levels row-major.
pub fn patchify(img: &ImageSample, cfg: &ModelConfig) -> Result<Tensor> {
    let p = cfg.patch_size;
    let (h, w) = (img.height(), img.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::contract(format!(
            "image {h}×{w} is not divisible into {p}×{p} patches"
        )));
    }
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::contract(format!(
            "image {h}×{w} does not match configured size {}",
            cfg.image_size
        )));
    }
    let px = img.pixels.data();
    let (gr, gc) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..gr {
        for pc in 0..gc {
            for r in 0..p {
                let start = (pr * p + r) * w + pc * p;
                data.extend_from_slice(&px[start..start + p]);
            }
        }
    }
    Tensor::new([gr * gc, p * p], data)
}

/// Normalized `(x, y)` centers of each patch, row-major.
pub fn patch_centers(cfg: &ModelConfig) -> Tensor {
    let n = cfg.grid();
    let data = (0..n)
        .flat_map(|r| (0..n).flat_map(move |c| [(c as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64]))
        .collect();
    Tensor::new([n * n, 2], data).expect("non-empty grid")
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    /// `(1+P)×d`, the first row belongs to `[CLS]`.
    pub pos_embed: ParamId,
    /// `1×d`
    pub cls: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub config: ModelConfig,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let patch_embed = Linear::new(store, "encoder.patch_embed", cfg.patch_size * cfg.patch_size, d, rng);
        let pos_embed = store.register(
            "encoder.pos_embed",
            trunc_normal(rng, &[cfg.n_image_tokens(), d], INIT_STD),
            false,
        );
        let cls = store.register("encoder.cls", Tensor::zeros([1, d]), false);
        let blocks = (0..cfg.n_encoder_layers)
            .map(|i| EncoderBlock::new(store, &format!("encoder.blocks.{i}"), d, cfg.n_heads, cfg.mlp_hidden(), rng))
            .collect();
        Ok(ImageEncoder {
            patch_embed,
            pos_embed,
            cls,
            blocks,
            config: cfg.clone(),
        })
    }

    /// Wraps the query and value projections of every block with LoRA adapters.
    pub fn attach_lora<R: Rng>(&mut self, store: &mut ParamStore, rank: usize, alpha: f64, rng: &mut R) {
        for b in &mut self.blocks {
            b.attn.q.attach_lora(store, rank, alpha, rng);
            b.attn.v.attach_lora(store, rank, alpha, rng);
        }
    }

    /// Base (non-adapter) parameters of the encoder.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_embed.weight, self.patch_embed.bias, self.pos_embed, self.cls];
        for b in &self.blocks {
            ids.extend([b.ln1.gain, b.ln1.bias, b.ln2.gain, b.ln2.bias]);
            for lin in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.mlp.fc1, &b.mlp.fc2] {
                ids.extend([lin.weight, lin.bias]);
            }
        }
        ids
    }

    pub fn lora_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.attn.q, &b.attn.v])
            .filter_map(|l| l.lora.as_ref())
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    /// Embeds a batch of images into `B` elements of `1+P` tokens each.
    pub fn embed(&self, cx: &mut Forward, images: &[&ImageSample]) -> Result<RaggedVar> {
        if images.is_empty() {
            return Err(Error::contract("image batch is empty"));
        }
        let cfg = &self.config;
        let n_p = cfg.n_patches();
        let mut flat = Vec::with_capacity(images.len() * cfg.image_size * cfg.image_size);
        for img in images {
            flat.extend(patchify(img, cfg)?.into_data());
        }
        let patches = cx.g.constant(Tensor::new(
            [images.len() * n_p, cfg.patch_size * cfg.patch_size],
            flat,
        )?);
        let emb = self.patch_embed.forward(cx, patches)?;
        let cls = cx.param(self.cls);
        let mut parts = Vec::with_capacity(2 * images.len());
        for e in 0..images.len() {
            parts.push(cls);
            parts.push(cx.g.slice_rows(emb, e * n_p, (e + 1) * n_p)?);
        }
        let tokens = cx.g.concat_rows(&parts)?;
        let pos = cx.param(self.pos_embed);
        let tokens = cx.g.add_tiled(tokens, pos)?;
        let offsets: Arc<[usize]> = (0..=images.len()).map(|e| e * (1 + n_p)).collect();
        Ok(RaggedVar::new(tokens, offsets))
    }

    pub fn forward(&self, cx: &mut Forward, images: &[&ImageSample]) -> Result<RaggedVar> {
        let mut x = self.embed(cx, images)?;
        for b in &self.blocks {
            x = b.forward(cx, &x)?;
        }
        Ok(x)
    }

    /// Tokens for one image, outside any training graph.
    pub fn encode_image(&self, img: &ImageSample, store: &ParamStore) -> Result<ImageTokens> {
        let mut cx = Forward::new(store);
        let x = self.forward(&mut cx, &[img])?;
        Ok(ImageTokens {
            values: cx.g.value(x.values).clone(),
            patch_grid: (self.config.grid(), self.config.grid()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(size: usize) -> ImageSample {
        let data = (0..size * size).map(|i| i as f64 / (size * size) as f64).collect();
        ImageSample::new(Tensor::new([size, size], data).unwrap()).unwrap()
    }

    fn cfg(size: usize, patch: usize) -> ModelConfig {
        ModelConfig {
            image_size: size,
            patch_size: patch,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn single_patch_is_the_flat_image() {
        let im = img(4);
        let p = patchify(&im, &cfg(4, 4)).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert_eq!(p.data(), im.pixels().data());
    }

    #[test]
    fn top_left_patch_first() {
        let p = patchify(&img(4), &cfg(4, 2)).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        let s = 1.0 / 16.0;
        assert_eq!(p.row(0), &[0.0, s, 4.0 * s, 5.0 * s]);
        assert_eq!(p.row(1), &[2.0 * s, 3.0 * s, 6.0 * s, 7.0 * s]);
    }

    #[test]
    fn indivisible_image_rejected() {
        let im = ImageSample::new(Tensor::zeros([6, 6])).unwrap();
        assert!(patchify(&im, &cfg(6, 4)).is_err());
        assert!(ImageSample::new(Tensor::full([2, 2], 1.5)).is_err());
    }

    #[test]
    fn centers_of_small_grids() {
        let c = patch_centers(&cfg(8, 4));
        assert_eq!(c.data(), &[0.25, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.75]);
        assert_eq!(patch_centers(&cfg(4, 4)).data(), &[0.5, 0.5]);
    }
}
