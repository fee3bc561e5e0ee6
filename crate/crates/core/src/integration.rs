//! Gaze integration layers.
//!
//! Each layer first lets image tokens attend to themselves, then to the gaze
//! tokens through unmasked cross-attention, then applies an MLP; every
//! sublayer is pre-norm with a residual connection. The spatial encoding of
//! patches and fixations is re-added to queries and keys (never values) in
//! every layer. The two-way layer mirrors the cross-attention so gaze tokens
//! are updated from the image tokens as well.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gaze::spatial_pe;
use crate::nn::{Forward, LayerNorm, Mlp, MultiHeadAttention};
use crate::ragged::{RaggedBatch, RaggedVar};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};
use crate::vit::patch_centers;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntegrationVariant {
    CrossAttention,
    TwoWay,
    ImageOnly,
    GazeOnly,
}

impl IntegrationVariant {
    pub const ALL: [IntegrationVariant; 4] = [
        IntegrationVariant::CrossAttention,
        IntegrationVariant::TwoWay,
        IntegrationVariant::ImageOnly,
        IntegrationVariant::GazeOnly,
    ];

    pub fn uses_image(self) -> bool {
        self != IntegrationVariant::GazeOnly
    }

    pub fn uses_gaze(self) -> bool {
        self != IntegrationVariant::ImageOnly
    }

    pub fn has_cross_attention(self) -> bool {
        matches!(self, IntegrationVariant::CrossAttention | IntegrationVariant::TwoWay)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IntegrationVariant::CrossAttention => "cross-attention",
            IntegrationVariant::TwoWay => "two-way",
            IntegrationVariant::ImageOnly => "image-only",
            IntegrationVariant::GazeOnly => "gaze-only",
        }
    }
}

impl fmt::Display for IntegrationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IntegrationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "crossattention" | "cross" => Ok(IntegrationVariant::CrossAttention),
            "twoway" => Ok(IntegrationVariant::TwoWay),
            "imageonly" => Ok(IntegrationVariant::ImageOnly),
            "gazeonly" => Ok(IntegrationVariant::GazeOnly),
            _ => Err(Error::contract(format!(
                "unknown variant {s:?} (expected cross-attention, two-way, image-only or gaze-only)"
            ))),
        }
    }
}

/// Image-stream sublayers, present in both fused variants.
#[derive(Clone, Debug)]
pub struct ImageUpdate {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_query: LayerNorm,
    /// Normalizes gaze tokens before they serve as keys and values.
    pub ln_gaze: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

/// Mirrored gaze-stream sublayers of the two-way variant.
#[derive(Clone, Debug)]
pub struct GazeUpdate {
    pub ln_query: LayerNorm,
    pub ln_image: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct IntegrationLayer {
    pub image: ImageUpdate,
    pub gaze: Option<GazeUpdate>,
}

/// Tokens of one integration step, with the spatial encodings aligned row by row.
#[derive(Clone, Debug)]
pub struct Streams {
    pub image: RaggedVar,
    pub gaze: RaggedVar,
    pub image_pe: Var,
    pub gaze_pe: Var,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub image: RaggedVar,
    pub gaze: RaggedVar,
    /// Attention node of the image→gaze cross-attention.
    pub image_to_gaze: Var,
    pub gaze_to_image: Option<Var>,
}

impl IntegrationLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        two_way: bool,
        rng: &mut R,
    ) -> Self {
        let (d, h, hid) = (cfg.d_model, cfg.n_heads, cfg.mlp_hidden());
        let image = ImageUpdate {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, h, rng),
            ln_query: LayerNorm::new(store, &format!("{name}.ln_query"), d),
            ln_gaze: LayerNorm::new(store, &format!("{name}.ln_gaze"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.image_to_gaze"), d, h, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hid, rng),
        };
        let gaze = two_way.then(|| GazeUpdate {
            ln_query: LayerNorm::new(store, &format!("{name}.gaze.ln_query"), d),
            ln_image: LayerNorm::new(store, &format!("{name}.gaze.ln_image"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.gaze_to_image"), d, h, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.gaze.ln_mlp"), d),
            mlp: Mlp::new(store, &format!("{name}.gaze.mlp"), d, hid, rng),
        });
        IntegrationLayer { image, gaze }
    }

    /// Output projections of every residual branch; zeroing them makes the layer the identity.
    pub fn output_projections(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lin in [&self.image.self_attn.o, &self.image.cross_attn.o, &self.image.mlp.fc2] {
            ids.extend([lin.weight, lin.bias]);
        }
        if let Some(g) = &self.gaze {
            for lin in [&g.cross_attn.o, &g.mlp.fc2] {
                ids.extend([lin.weight, lin.bias]);
            }
        }
        ids
    }

    pub fn forward(&self, cx: &mut Forward, s: &Streams) -> Result<LayerOutput> {
        if s.image.batch_size() != s.gaze.batch_size() {
            return Err(Error::contract(format!(
                "batch count mismatch: {} images vs {} gaze sequences",
                s.image.batch_size(),
                s.gaze.batch_size()
            )));
        }
        let (image, image_to_gaze) = image_update(&self.image, cx, s)?;
        match &self.gaze {
            None => Ok(LayerOutput {
                image,
                gaze: s.gaze.clone(),
                image_to_gaze,
                gaze_to_image: None,
            }),
            Some(gu) => {
                let (gaze, att) = gaze_update(gu, cx, &image, s)?;
                Ok(LayerOutput {
                    image,
                    gaze,
                    image_to_gaze,
                    gaze_to_image: Some(att),
                })
            }
        }
    }
}

fn image_update(p: &ImageUpdate, cx: &mut Forward, s: &Streams) -> Result<(RaggedVar, Var)> {
    let x = s.image.values;
    let h = p.ln_self.forward(cx, x)?;
    let (sa, _) = p.self_attn.self_attention(cx, &s.image.with_values(h))?;
    let x1 = cx.g.add(x, sa)?;

    let hq = p.ln_query.forward(cx, x1)?;
    let q = cx.g.add(hq, s.image_pe)?;
    let gn = p.ln_gaze.forward(cx, s.gaze.values)?;
    let k = cx.g.add(gn, s.gaze_pe)?;
    let (ca, att) = p
        .cross_attn
        .forward(cx, &s.image.with_values(q), k, gn, &s.gaze)?;
    let x2 = cx.g.add(x1, ca)?;

    let hm = p.ln_mlp.forward(cx, x2)?;
    let m = p.mlp.forward(cx, hm)?;
    let x3 = cx.g.add(x2, m)?;
    Ok((s.image.with_values(x3), att))
}

fn gaze_update(p: &GazeUpdate, cx: &mut Forward, image: &RaggedVar, s: &Streams) -> Result<(RaggedVar, Var)> {
    let g = s.gaze.values;
    let hq = p.ln_query.forward(cx, g)?;
    let q = cx.g.add(hq, s.gaze_pe)?;
    let xn = p.ln_image.forward(cx, image.values)?;
    let k = cx.g.add(xn, s.image_pe)?;
    let (ca, att) = p.cross_attn.forward(cx, &s.gaze.with_values(q), k, xn, image)?;
    let g1 = cx.g.add(g, ca)?;
    let hm = p.ln_mlp.forward(cx, g1)?;
    let m = p.mlp.forward(cx, hm)?;
    let g2 = cx.g.add(g1, m)?;
    Ok((s.gaze.with_values(g2), att))
}

/// Spatial encoding for the image stream of `batch` images: a zero row for
/// `[CLS]`, then the encoding of every patch center.
pub fn image_spatial_pe(cfg: &ModelConfig, batch: usize) -> Result<Tensor> {
    let patches = spatial_pe(&patch_centers(cfg), cfg.d_model)?;
    let one: Vec<f64> = std::iter::repeat_n(0.0, cfg.d_model)
        .chain(patches.data().iter().copied())
        .collect();
    Tensor::new([batch * cfg.n_image_tokens(), cfg.d_model], one.repeat(batch))
}

/// Spatial encoding of explicit per-row coordinates; `None` rows (such as
/// `[CLS]`) get the zero vector.
pub fn coords_spatial_pe(coords: &[Option<[f64; 2]>], d_model: usize) -> Result<Tensor> {
    if coords.is_empty() {
        return Err(Error::EmptyInput("no coordinates".into()));
    }
    let mut data = Vec::with_capacity(coords.len() * d_model);
    for c in coords {
        match c {
            Some([x, y]) => {
                let t = Tensor::new([1, 2], vec![*x, *y])?;
                data.extend(spatial_pe(&t, d_model)?.into_data());
            }
            None => data.extend(std::iter::repeat_n(0.0, d_model)),
        }
    }
    Tensor::new([coords.len(), d_model], data)
}

fn value_streams(
    cx: &mut Forward,
    img: &RaggedBatch,
    gaze: &RaggedBatch,
    img_coords: &[Option<[f64; 2]>],
    gaze_coords: &[[f64; 2]],
) -> Result<Streams> {
    if img.batch_size() != gaze.batch_size() {
        return Err(Error::contract(format!(
            "batch count mismatch: {} images vs {} gaze sequences",
            img.batch_size(),
            gaze.batch_size()
        )));
    }
    if img.width() != gaze.width() {
        return Err(Error::Dimension {
            op: "integration",
            lhs: img.values().shape().to_vec(),
            rhs: gaze.values().shape().to_vec(),
        });
    }
    if img_coords.len() != img.total_rows() || gaze_coords.len() != gaze.total_rows() {
        return Err(Error::contract("coordinates must be row-aligned with their tokens"));
    }
    let d = img.width();
    let gc: Vec<Option<[f64; 2]>> = gaze_coords.iter().copied().map(Some).collect();
    let image_pe = cx.g.constant(coords_spatial_pe(img_coords, d)?);
    let gaze_pe = cx.g.constant(coords_spatial_pe(&gc, d)?);
    let iv = cx.g.constant(img.values().clone());
    let gv = cx.g.constant(gaze.values().clone());
    Ok(Streams {
        image: RaggedVar::new(iv, img.offsets().into()),
        gaze: RaggedVar::new(gv, gaze.offsets().into()),
        image_pe,
        gaze_pe,
    })
}

/// One image→gaze layer on plain values; returns the updated image tokens.
pub fn cross_attention_layer(
    img: &RaggedBatch,
    gaze: &RaggedBatch,
    img_coords: &[Option<[f64; 2]>],
    gaze_coords: &[[f64; 2]],
    layer: &IntegrationLayer,
    store: &ParamStore,
) -> Result<RaggedBatch> {
    let mut cx = Forward::new(store);
    let s = value_streams(&mut cx, img, gaze, img_coords, gaze_coords)?;
    let (out, _) = image_update(&layer.image, &mut cx, &s)?;
    RaggedBatch::from_parts(cx.g.value(out.values).clone(), img.offsets().to_vec())
}

/// One two-way layer on plain values; returns updated `(image, gaze)` tokens.
pub fn two_way_layer(
    img: &RaggedBatch,
    gaze: &RaggedBatch,
    img_coords: &[Option<[f64; 2]>],
    gaze_coords: &[[f64; 2]],
    layer: &IntegrationLayer,
    store: &ParamStore,
) -> Result<(RaggedBatch, RaggedBatch)> {
    let gu = layer
        .gaze
        .as_ref()
        .ok_or_else(|| Error::contract("layer has no gaze update; it is not two-way"))?;
    let mut cx = Forward::new(store);
    let s = value_streams(&mut cx, img, gaze, img_coords, gaze_coords)?;
    let (image, _) = image_update(&layer.image, &mut cx, &s)?;
    let (g, _) = gaze_update(gu, &mut cx, &image, &s)?;
    Ok((
        RaggedBatch::from_parts(cx.g.value(image.values).clone(), img.offsets().to_vec())?,
        RaggedBatch::from_parts(cx.g.value(g.values).clone(), gaze.offsets().to_vec())?,
    ))
}
