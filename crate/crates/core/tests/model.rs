//! Encoder, fusion layers and the assembled classifier against dense
//! references and structural laws.

mod common;

use common::{rand_image, rand_sequence, rand_tensor, rng, Batch};
use fixformer_core::config::ModelConfig;
use fixformer_core::gaze::{Fixation, FixationSequence};
use fixformer_core::integration::{cross_attention_layer, two_way_layer, IntegrationLayer, IntegrationVariant};
use fixformer_core::model::{Example, FixationFormer, LoraConfig};
use fixformer_core::nn::{Forward, LayerNorm, Linear, Mlp, MultiHeadAttention, LN_EPS};
use fixformer_core::ragged::RaggedBatch;
use fixformer_core::tensor::{ParamStore, Tensor};
use fixformer_core::train::gradcheck::{gradcheck, GradcheckOptions};
use fixformer_core::vit::{patch_centers, patchify, ImageEncoder, ImageSample};
use fixformer_core::Error;
use rand::Rng;

use IntegrationVariant::{CrossAttention, GazeOnly, ImageOnly, TwoWay};

type M = Vec<Vec<f64>>;

fn jitter(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-amount..amount);
        }
    }
}

fn rows(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn d_ln(x: &M, l: &LayerNorm, s: &ParamStore) -> M {
    let (g, b) = (s.value(l.gain).data(), s.value(l.bias).data());
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mu) / (var + LN_EPS).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

fn d_lin(x: &M, l: &Linear, s: &ParamStore) -> M {
    let (w, b) = (s.value(l.weight), s.value(l.bias).data());
    let mut weff: M = rows(w);
    if let Some(lora) = &l.lora {
        let (a, bm) = (s.value(lora.a), s.value(lora.b));
        for (o, row) in weff.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v += lora.scale * (0..lora.rank).map(|k| bm.row(o)[k] * a.row(k)[i]).sum::<f64>();
            }
        }
    }
    x.iter()
        .map(|r| (0..l.d_out).map(|o| b[o] + r.iter().zip(&weff[o]).map(|(a, b)| a * b).sum::<f64>()).collect())
        .collect()
}

fn d_add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Dense multi-head attention of one element, plus its weights `[head][q][k]`.
fn d_mha(q: &M, k: &M, v: &M, a: &MultiHeadAttention, s: &ParamStore) -> (M, Vec<M>) {
    let (qp, kp, vp) = (d_lin(q, &a.q, s), d_lin(k, &a.k, s), d_lin(v, &a.v, s));
    let d = qp[0].len();
    let dh = d / a.heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    let mut weights = Vec::new();
    for h in 0..a.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut wh = Vec::new();
        for i in 0..q.len() {
            let sc: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sc.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / z).collect();
            for c in cols.clone() {
                ctx[i][c] = (0..k.len()).map(|j| p[j] * vp[j][c]).sum();
            }
            wh.push(p);
        }
        weights.push(wh);
    }
    (d_lin(&ctx, &a.o, s), weights)
}

fn d_mlp(x: &M, m: &Mlp, s: &ParamStore) -> M {
    let h: M = d_lin(x, &m.fc1, s).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    d_lin(&h, &m.fc2, s)
}

fn pe_rows(coords: &[Option<[f64; 2]>], d: usize) -> M {
    coords
        .iter()
        .map(|c| match c {
            None => vec![0.0; d],
            Some([x, y]) => {
                let half = d / 2;
                let enc = |v: f64| -> Vec<f64> {
                    (0..half)
                        .map(|j| {
                            let w = v / 0.01f64.powf((j - j % 2) as f64 / half as f64);
                            if j % 2 == 0 {
                                w.sin()
                            } else {
                                w.cos()
                            }
                        })
                        .collect()
                };
                let mut r = enc(*x);
                r.extend(enc(*y));
                r
            }
        })
        .collect()
}

/// One fusion layer on a single element, written out densely.
fn dense_layer(x: &M, g: &M, ipe: &M, gpe: &M, layer: &IntegrationLayer, s: &ParamStore) -> (M, M) {
    let p = &layer.image;
    let h = d_ln(x, &p.ln_self, s);
    let x1 = d_add(x, &d_mha(&h, &h, &h, &p.self_attn, s).0);
    let q = d_add(&d_ln(&x1, &p.ln_query, s), ipe);
    let gn = d_ln(g, &p.ln_gaze, s);
    let k = d_add(&gn, gpe);
    let x2 = d_add(&x1, &d_mha(&q, &k, &gn, &p.cross_attn, s).0);
    let x3 = d_add(&x2, &d_mlp(&d_ln(&x2, &p.ln_mlp, s), &p.mlp, s));
    let Some(gu) = &layer.gaze else {
        return (x3, g.clone());
    };
    let q = d_add(&d_ln(g, &gu.ln_query, s), gpe);
    let xn = d_ln(&x3, &gu.ln_image, s);
    let k = d_add(&xn, ipe);
    let g1 = d_add(g, &d_mha(&q, &k, &xn, &gu.cross_attn, s).0);
    let g2 = d_add(&g1, &d_mlp(&d_ln(&g1, &gu.ln_mlp, s), &gu.mlp, s));
    (x3, g2)
}

fn max_diff(a: &M, b: &Tensor) -> f64 {
    a.iter().flatten().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct LayerCase {
    layer: IntegrationLayer,
    store: ParamStore,
    img: Vec<Tensor>,
    gaze: Vec<Tensor>,
    img_coords: Vec<Option<[f64; 2]>>,
    gaze_coords: Vec<[f64; 2]>,
}

fn layer_case(seed: u64, two_way: bool, gaze_lens: &[usize]) -> LayerCase {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let layer = IntegrationLayer::new(&mut store, "l", &cfg, two_way, &mut r);
    jitter(&mut store, seed ^ 1, 0.3);
    let n_img = cfg.n_image_tokens();
    let d = cfg.d_model;
    let img = gaze_lens.iter().map(|_| rand_tensor(&mut r, &[n_img, d], 1.0)).collect();
    let gaze = gaze_lens.iter().map(|&t| rand_tensor(&mut r, &[t, d], 1.0)).collect();
    let centers = patch_centers(&cfg);
    let one: Vec<Option<[f64; 2]>> = std::iter::once(None)
        .chain((0..cfg.n_patches()).map(|i| Some([centers.row(i)[0], centers.row(i)[1]])))
        .collect();
    let img_coords = one.repeat(gaze_lens.len());
    let total: usize = gaze_lens.iter().sum();
    let gaze_coords = (0..total).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect();
    LayerCase { layer, store, img, gaze, img_coords, gaze_coords }
}

impl LayerCase {
    fn run(&self) -> (RaggedBatch, RaggedBatch) {
        let (i, g) = (RaggedBatch::build(&self.img).unwrap(), RaggedBatch::build(&self.gaze).unwrap());
        if self.layer.gaze.is_some() {
            two_way_layer(&i, &g, &self.img_coords, &self.gaze_coords, &self.layer, &self.store).unwrap()
        } else {
            let out = cross_attention_layer(&i, &g, &self.img_coords, &self.gaze_coords, &self.layer, &self.store).unwrap();
            (out, g)
        }
    }
}

#[test]
fn fusion_layers_match_dense_reference() {
    for (seed, two_way) in [(1, false), (2, true), (3, false), (4, true)] {
        let lens = [3, 1, 5];
        let c = layer_case(seed, two_way, &lens);
        let (img_out, gaze_out) = c.run();
        let d = c.img[0].cols();
        let n_img = c.img[0].rows();
        let mut goff = 0;
        for e in 0..lens.len() {
            let ipe = pe_rows(&c.img_coords[e * n_img..(e + 1) * n_img], d);
            let gc: Vec<Option<[f64; 2]>> = c.gaze_coords[goff..goff + lens[e]].iter().copied().map(Some).collect();
            let gpe = pe_rows(&gc, d);
            goff += lens[e];
            let (x, g) = dense_layer(&rows(&c.img[e]), &rows(&c.gaze[e]), &ipe, &gpe, &c.layer, &c.store);
            assert!(max_diff(&x, &img_out.element(e)) < 1e-10, "seed {seed} element {e}");
            assert!(max_diff(&g, &gaze_out.element(e)) < 1e-10, "seed {seed} element {e}");
        }
    }
}

#[test]
fn cross_attention_returns_gaze_unchanged_two_way_does_not() {
    let c = layer_case(5, false, &[4, 2]);
    let (_, g) = c.run();
    assert_eq!(g.split(), c.gaze);
    let c = layer_case(5, true, &[4, 2]);
    let (_, g) = c.run();
    assert!(g.element(0) != c.gaze[0] && g.element(1) != c.gaze[1]);
}

#[test]
fn two_way_image_stream_equals_cross_attention_layer() {
    let c = layer_case(6, true, &[3, 7]);
    let (i, g) = (RaggedBatch::build(&c.img).unwrap(), RaggedBatch::build(&c.gaze).unwrap());
    let (tw, _) = two_way_layer(&i, &g, &c.img_coords, &c.gaze_coords, &c.layer, &c.store).unwrap();
    let ca = cross_attention_layer(&i, &g, &c.img_coords, &c.gaze_coords, &c.layer, &c.store).unwrap();
    assert_eq!(tw.values().data(), ca.values().data());
}

#[test]
fn zero_output_projections_make_layers_identities() {
    for two_way in [false, true] {
        let mut c = layer_case(7, two_way, &[2, 3]);
        for id in c.layer.output_projections() {
            let shape = c.store.value(id).shape().to_vec();
            c.store.get_mut(id).value = Tensor::zeros(shape);
        }
        let (i, g) = c.run();
        assert_eq!(i.split(), c.img);
        assert_eq!(g.split(), c.gaze);
    }
}

#[test]
fn single_key_context_is_projected_value() {
    let c = layer_case(8, false, &[1]);
    let g = rows(&c.gaze[0]);
    let p = &c.layer.image;
    // Softmax over one key is 1, so the cross-attention output is o(v(ln(g))) for every query.
    let x = rows(&c.img[0]);
    let x1 = d_add(&x, &d_mha(&d_ln(&x, &p.ln_self, &c.store), &d_ln(&x, &p.ln_self, &c.store), &d_ln(&x, &p.ln_self, &c.store), &p.self_attn, &c.store).0);
    let gv = d_lin(&d_lin(&d_ln(&g, &p.ln_gaze, &c.store), &p.cross_attn.v, &c.store), &p.cross_attn.o, &c.store);
    let x2: M = x1.iter().map(|r| r.iter().zip(&gv[0]).map(|(a, b)| a + b).collect()).collect();
    let x3 = d_add(&x2, &d_mlp(&d_ln(&x2, &p.ln_mlp, &c.store), &p.mlp, &c.store));
    let (out, _) = c.run();
    assert!(max_diff(&x3, out.values()) < 1e-10);
}

#[test]
fn identical_keys_make_query_encoding_irrelevant() {
    let mut c = layer_case(9, false, &[4]);
    let row = c.gaze[0].row(0).to_vec();
    c.gaze[0] = Tensor::new([4, row.len()], row.repeat(4)).unwrap();
    c.gaze_coords = vec![[0.3, 0.6]; 4];
    let (a, _) = c.run();
    c.img_coords = vec![None; c.img_coords.len()];
    let (b, _) = c.run();
    assert!(a.values().max_abs_diff(b.values()) < 1e-13);

    // With distinct keys the query encoding does change the output.
    let mut c = layer_case(9, false, &[4]);
    let (a, _) = c.run();
    c.img_coords = vec![None; c.img_coords.len()];
    let (b, _) = c.run();
    assert!(a.values().max_abs_diff(b.values()) > 1e-8);
}

#[test]
fn layer_batch_mismatch_is_rejected() {
    let c = layer_case(10, false, &[2, 2]);
    let i = RaggedBatch::build(&c.img).unwrap();
    let g = RaggedBatch::build(&c.gaze[..1]).unwrap();
    assert!(cross_attention_layer(&i, &g, &c.img_coords, &c.gaze_coords[..2], &c.layer, &c.store).is_err());
}

// ---- image encoder ----

#[test]
fn patchify_examples() {
    let img = ImageSample::new(Tensor::new([4, 4], (0..16).map(|v| v as f64 / 15.0).collect()).unwrap()).unwrap();
    let one = ModelConfig { image_size: 4, patch_size: 4, d_model: 8, n_heads: 2, ..ModelConfig::tiny() };
    let p = patchify(&img, &one).unwrap();
    assert_eq!(p.shape(), &[1, 16]);
    assert_eq!(p.data(), img.pixels().data());

    let four = ModelConfig { patch_size: 2, ..one.clone() };
    let p = patchify(&img, &four).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0 / 15.0, 4.0 / 15.0, 5.0 / 15.0]);

    let cfg = ModelConfig { image_size: 8, patch_size: 2, ..one.clone() };
    let checker = ImageSample::new(Tensor::new([8, 8], (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect()).unwrap()).unwrap();
    let p = patchify(&checker, &cfg).unwrap();
    for (k, row) in (0..16).map(|k| (k, p.row(k))) {
        let (pr, pc) = (k / 4, k % 4);
        for (j, &v) in row.iter().enumerate() {
            let (r, c) = (pr * 2 + j / 2, pc * 2 + j % 2);
            assert_eq!(v, ((r + c) % 2) as f64);
        }
    }
    let bad = ModelConfig { patch_size: 3, ..one };
    assert!(patchify(&img, &bad).is_err());
}

#[test]
fn patch_center_examples() {
    let two = ModelConfig { image_size: 8, patch_size: 4, ..ModelConfig::tiny() };
    assert_eq!(patch_centers(&two).data(), &[0.25, 0.25, 0.75, 0.25, 0.25, 0.75, 0.75, 0.75]);
    let one = ModelConfig { image_size: 4, patch_size: 4, ..ModelConfig::tiny() };
    assert_eq!(patch_centers(&one).data(), &[0.5, 0.5]);
    let seven = ModelConfig { image_size: 28, patch_size: 4, ..ModelConfig::tiny() };
    let c = patch_centers(&seven);
    for i in 0..49 {
        assert_eq!(c.row(i), &[((i % 7) as f64 + 0.5) / 7.0, ((i / 7) as f64 + 0.5) / 7.0]);
    }
}

#[test]
fn encoder_token_count_and_determinism() {
    for (size, patch) in [(8, 4), (16, 4), (12, 2), (8, 8)] {
        let cfg = ModelConfig { image_size: size, patch_size: patch, ..ModelConfig::tiny() };
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, &cfg, &mut rng(1)).unwrap();
        let img = rand_image(&mut rng(2), size);
        let a = enc.encode_image(&img, &store).unwrap();
        assert_eq!(a.values.rows(), 1 + (size / patch).pow(2));
        assert_eq!(a.patch_grid, (size / patch, size / patch));
        assert_eq!(a, enc.encode_image(&img.clone(), &store).unwrap());
    }
}

#[test]
fn encoder_with_zero_outputs_is_embedding_plus_position() {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(&mut store, &cfg, &mut rng(3)).unwrap();
    jitter(&mut store, 4, 0.2);
    for b in &enc.blocks {
        for lin in [&b.attn.o, &b.mlp.fc2] {
            for id in [lin.weight, lin.bias] {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).value = Tensor::zeros(shape);
            }
        }
    }
    let img = rand_image(&mut rng(5), cfg.image_size);
    let tokens = enc.encode_image(&img, &store).unwrap().values;
    let patches = rows(&patchify(&img, &cfg).unwrap());
    let emb = d_lin(&patches, &enc.patch_embed, &store);
    let pos = store.value(enc.pos_embed);
    let cls = store.value(enc.cls).data();
    for c in 0..cfg.d_model {
        assert!((tokens.row(0)[c] - (cls[c] + pos.row(0)[c])).abs() < 1e-14);
        for p in 0..cfg.n_patches() {
            assert!((tokens.row(1 + p)[c] - (emb[p][c] + pos.row(1 + p)[c])).abs() < 1e-14);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = ModelConfig { image_size: 8, patch_size: 4, d_model: 16, n_heads: 2, n_encoder_layers: 1, ..ModelConfig::tiny() };
    let model = FixationFormer::new(&cfg, ImageOnly, None, 1).unwrap();
    let b = Batch::random(2, &[1, 1], cfg.image_size, cfg.n_classes);
    let rows = gradcheck(&model, &b.examples(), &b.labels, &GradcheckOptions::default()).unwrap();
    for r in &rows {
        assert!(r.passed, "{} rel {}", r.group, r.rel_error);
    }
    assert!(rows.iter().all(|r| !r.group.starts_with("gaze")));
}

// ---- assembled model ----

#[test]
fn every_variant_yields_n_classes_logits() {
    let cfg = ModelConfig::tiny();
    let b = Batch::random(1, &[1, 4, 9], cfg.image_size, cfg.n_classes);
    for v in IntegrationVariant::ALL {
        let m = FixationFormer::new(&cfg, v, Some(LoraConfig { rank: 2, alpha: 4.0 }), 0).unwrap();
        let logits = m.predict(&b.examples()).unwrap();
        assert_eq!(logits.shape(), &[3, cfg.n_classes], "{v}");
        assert_eq!(m.classify(b.examples()[1]).unwrap().len(), cfg.n_classes);
    }
}

#[test]
fn missing_modality_is_a_contract_error() {
    let cfg = ModelConfig::tiny();
    let b = Batch::random(1, &[2], cfg.image_size, cfg.n_classes);
    let img_only = Example { image: Some(&b.images[0]), gaze: None };
    let gaze_only = Example { image: None, gaze: Some(&b.gaze[0]) };
    for v in [CrossAttention, TwoWay] {
        let m = FixationFormer::new(&cfg, v, None, 0).unwrap();
        assert!(matches!(m.predict(&[img_only]), Err(Error::Contract(_))));
        assert!(matches!(m.predict(&[gaze_only]), Err(Error::Contract(_))));
    }
    assert!(FixationFormer::new(&cfg, ImageOnly, None, 0).unwrap().predict(&[img_only]).is_ok());
    assert!(FixationFormer::new(&cfg, GazeOnly, None, 0).unwrap().predict(&[gaze_only]).is_ok());
}

#[test]
fn image_only_is_encoder_plus_head() {
    let cfg = ModelConfig::tiny();
    let mut m = FixationFormer::new(&cfg, ImageOnly, None, 3).unwrap();
    jitter(&mut m.params, 1, 0.2);
    let b = Batch::random(4, &[1, 1], cfg.image_size, cfg.n_classes);
    let logits = m.predict(&b.examples()).unwrap();
    for e in 0..2 {
        let tok = m.encoder.as_ref().unwrap().encode_image(&b.images[e], &m.params).unwrap();
        let want = d_lin(&vec![tok.values.row(0).to_vec()], &m.head, &m.params).remove(0);
        for c in 0..cfg.n_classes {
            assert!((logits.row(e)[c] - want[c]).abs() < 1e-13);
        }
    }
}

#[test]
fn lora_at_init_is_bitwise_no_op() {
    let cfg = ModelConfig::tiny();
    let lora = LoraConfig { rank: 2, alpha: 4.0 };
    let b = Batch::random(5, &[3, 6], cfg.image_size, cfg.n_classes);
    let plain = FixationFormer::new(&cfg, ImageOnly, None, 11).unwrap();
    let wrapped = FixationFormer::new(&cfg, ImageOnly, Some(lora), 11).unwrap();
    assert_eq!(plain.predict(&b.examples()).unwrap(), wrapped.predict(&b.examples()).unwrap());

    // The fused model's image pathway is the same encoder.
    let fused = FixationFormer::for_training(&cfg, CrossAttention, lora, 11).unwrap();
    let enc_plain = plain.encoder.as_ref().unwrap();
    let enc_fused = fused.encoder.as_ref().unwrap();
    for img in &b.images {
        assert_eq!(
            enc_plain.encode_image(img, &plain.params).unwrap(),
            enc_fused.encode_image(img, &fused.params).unwrap()
        );
    }
    assert_eq!(fused.predict(&b.examples()).unwrap(), fused.predict_base(&b.examples()).unwrap());
}

#[test]
fn lora_matches_materialized_weight() {
    let mut store = ParamStore::new();
    let mut r = rng(12);
    let mut lin = Linear::new(&mut store, "l", 5, 4, &mut r);
    lin.attach_lora(&mut store, 2, 3.0, &mut r);
    jitter(&mut store, 13, 0.5);
    let x = rand_tensor(&mut r, &[6, 5], 1.0);
    let mut cx = Forward::new(&store);
    let xv = cx.g.constant(x.clone());
    let y = lin.forward(&mut cx, xv).unwrap();
    let want = d_lin(&rows(&x), &lin, &store);
    assert!(max_diff(&want, cx.g.value(y)) < 1e-13);
    assert_eq!(lin.lora.as_ref().unwrap().scale, 1.5);

    let bad = cx.g.constant(Tensor::zeros([2, 4]));
    assert!(matches!(lin.forward(&mut cx, bad), Err(Error::Dimension { .. })));
}

#[test]
fn frozen_base_gets_no_gradient() {
    let cfg = ModelConfig::tiny();
    let m = FixationFormer::for_training(&cfg, CrossAttention, LoraConfig { rank: 2, alpha: 4.0 }, 1).unwrap();
    let b = Batch::random(3, &[2, 5], cfg.image_size, cfg.n_classes);
    let mut cx = Forward::new(&m.params);
    let (loss, _) = m.loss(&mut cx, &b.examples(), &b.labels).unwrap();
    let grads = cx.g.backward(loss).unwrap();
    let enc = m.encoder.as_ref().unwrap();
    for id in enc.base_params() {
        assert!(grads.param(id).is_none(), "{}", m.params.get(id).name);
    }
    for id in enc.lora_params() {
        assert!(grads.param(id).is_some(), "{}", m.params.get(id).name);
    }
}

#[test]
fn attention_export_laws() {
    let cfg = ModelConfig { n_integration_layers: 2, ..ModelConfig::tiny() };
    let b = Batch::random(6, &[1, 5, 3], cfg.image_size, cfg.n_classes);
    for v in [CrossAttention, TwoWay] {
        let mut m = FixationFormer::new(&cfg, v, None, 2).unwrap();
        jitter(&mut m.params, 3, 0.3);
        let maps = m.export_attention(&b.examples()).unwrap();
        assert_eq!(maps.len(), 2 * cfg.n_heads * 3);
        for map in &maps {
            let t = b.gaze[map.element].len();
            assert_eq!(map.weights.shape(), &[cfg.n_image_tokens(), t]);
            for row in map.weights.data().chunks(t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&w| w > 0.0), "unmasked softmax is strictly positive");
                if t == 1 {
                    assert_eq!(row, &[1.0]);
                }
            }
        }
    }
    for v in [ImageOnly, GazeOnly] {
        let m = FixationFormer::new(&cfg, v, None, 2).unwrap();
        let err = m.export_attention(&b.examples()).unwrap_err();
        assert!(err.to_string().contains("no cross-attention in this variant"));
    }
}

#[test]
fn identical_gaze_keys_give_uniform_weights() {
    let cfg = ModelConfig::tiny();
    let f = Fixation { start: 0.2, duration: 0.3, x: 0.4, y: 0.7 };
    let seq = FixationSequence::unordered(vec![f; 4]).unwrap();
    let img = rand_image(&mut rng(1), cfg.image_size);
    let mut m = FixationFormer::new(&cfg, CrossAttention, None, 4).unwrap();
    jitter(&mut m.params, 5, 0.3);
    for map in m.export_attention(&[Example::new(&img, &seq)]).unwrap() {
        for &w in map.weights.data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn gaze_stream_is_untouched_by_cross_attention_only() {
    let cfg = ModelConfig { n_integration_layers: 2, ..ModelConfig::tiny() };
    let b = Batch::random(7, &[3, 4], cfg.image_size, cfg.n_classes);
    for (v, changed) in [(CrossAttention, false), (TwoWay, true)] {
        let mut m = FixationFormer::new(&cfg, v, None, 8).unwrap();
        jitter(&mut m.params, 9, 0.3);
        let mut cx = Forward::new(&m.params);
        let out = m.forward(&mut cx, &b.examples()).unwrap();
        let last = cx.g.value(out.gaze_tokens.unwrap().values).clone();
        let enc = m.gaze_encoder.as_ref().unwrap();
        let first: Vec<f64> = b.gaze.iter().flat_map(|s| enc.encode(s, &m.params).unwrap().values.into_data()).collect();
        assert_eq!(last.data() != first.as_slice(), changed, "{v}");
    }
}

#[test]
fn fixation_order_only_matters_through_start_times() {
    let cfg = ModelConfig::tiny();
    let mut r = rng(10);
    let img = rand_image(&mut r, cfg.image_size);
    let seq = rand_sequence(&mut r, 6);
    let mut reversed: Vec<Fixation> = seq.fixations().to_vec();
    reversed.reverse();
    let reversed = FixationSequence::unordered(reversed).unwrap();
    let mut swapped: Vec<Fixation> = seq.fixations().to_vec();
    let (s0, s5) = (swapped[0].start, swapped[5].start);
    swapped[0].start = s5;
    swapped[5].start = s0;
    let swapped = FixationSequence::unordered(swapped).unwrap();
    for v in [CrossAttention, TwoWay, GazeOnly] {
        let mut m = FixationFormer::new(&cfg, v, None, 11).unwrap();
        jitter(&mut m.params, 12, 0.3);
        let a = m.classify(Example::new(&img, &seq)).unwrap();
        let b = m.classify(Example::new(&img, &reversed)).unwrap();
        let c = m.classify(Example::new(&img, &swapped)).unwrap();
        for k in 0..cfg.n_classes {
            assert!((a[k] - b[k]).abs() < 1e-12, "{v}");
        }
        assert!(a.iter().zip(&c).any(|(x, y)| (x - y).abs() > 1e-9), "{v}");
    }
}

#[test]
fn batching_does_not_change_per_example_logits() {
    let cfg = ModelConfig::tiny();
    let b = Batch::random(13, &[2, 7, 1, 4], cfg.image_size, cfg.n_classes);
    for v in IntegrationVariant::ALL {
        let mut m = FixationFormer::new(&cfg, v, None, 14).unwrap();
        jitter(&mut m.params, 15, 0.3);
        let all = m.predict(&b.examples()).unwrap();
        for (e, ex) in b.examples().into_iter().enumerate() {
            assert_eq!(m.classify(ex).unwrap(), all.row(e), "{v}");
        }
    }
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::tiny();
    for v in IntegrationVariant::ALL {
        let a = FixationFormer::new(&cfg, v, Some(LoraConfig::default()), 21).unwrap();
        let b = FixationFormer::new(&cfg, v, Some(LoraConfig::default()), 21).unwrap();
        let c = FixationFormer::new(&cfg, v, Some(LoraConfig::default()), 22).unwrap();
        let vals = |m: &FixationFormer| m.params.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let b = Batch::random(16, &[2, 3], cfg.image_size, cfg.n_classes);
    for v in IntegrationVariant::ALL {
        let m = FixationFormer::for_training(&cfg, v, LoraConfig { rank: 2, alpha: 4.0 }, 17).unwrap();
        let rows = gradcheck(&m, &b.examples(), &b.labels, &GradcheckOptions::default()).unwrap();
        assert_eq!(rows.len(), m.params.len());
        for r in &rows {
            assert!(r.passed, "{v} {} rel {}", r.group, r.rel_error);
        }
        if v == ImageOnly {
            assert!(rows.iter().all(|r| !r.group.contains("gaze")));
        }
    }
}

#[test]
fn corrupted_gradient_is_reported() {
    let cfg = ModelConfig::tiny();
    let b = Batch::random(18, &[2], cfg.image_size, cfg.n_classes);
    let m = FixationFormer::new(&cfg, CrossAttention, None, 19).unwrap();
    let opts = GradcheckOptions { corrupt: Some("head.weight".into()), ..Default::default() };
    let rows = gradcheck(&m, &b.examples(), &b.labels, &opts).unwrap();
    let bad: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| r.group.as_str()).collect();
    assert_eq!(bad, vec!["head.weight"]);
}
