//! On-disk formats: PGM, raw tensors, gaze CSV and checkpoints.

mod common;

use std::path::{Path, PathBuf};

use common::{rand_image, rand_tensor, rng};
use fixformer_core::config::ModelConfig;
use fixformer_core::gaze::io::{format_raw_gaze, parse_raw_gaze};
use fixformer_core::gaze::RawGazeSample;
use fixformer_core::imageio::{decode_pgm, decode_raw_tensor, encode_pgm, encode_raw_tensor, read_image, RAW_TENSOR_MAGIC};
use fixformer_core::integration::IntegrationVariant;
use fixformer_core::model::{FixationFormer, LoraConfig};
use fixformer_core::train::Checkpoint;
use fixformer_core::Error;
use proptest::prelude::*;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn golden_pgm_decodes_to_gradient() {
    let img = read_image(&golden("gradient_4x4.pgm")).unwrap();
    assert_eq!((img.height(), img.width()), (4, 4));
    let want: Vec<f64> = (0..16).map(|k| (17 * k) as f64 / 255.0).collect();
    assert_eq!(img.pixels().data(), want.as_slice());
    let bytes = std::fs::read(golden("gradient_4x4.pgm")).unwrap();
    assert_eq!(encode_pgm(&img).unwrap()[bytes.len() - 16..], bytes[bytes.len() - 16..]);
}

#[test]
fn golden_raw_tensor_decodes() {
    let path = golden("tensor_2x3.fxt");
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], RAW_TENSOR_MAGIC);
    assert_eq!(bytes.len(), 4 + 4 + 2 * 8 + 6 * 8);
    let t = decode_raw_tensor(&path, &bytes).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(t.data(), &[0.0, 0.5, 1.0, -1.5, 2.25, 1e-3]);
    assert_eq!(encode_raw_tensor(&t), bytes);
}

#[test]
fn raw_tensor_image_outside_unit_range_is_rejected() {
    assert!(read_image(&golden("tensor_2x3.fxt")).is_err());
}

#[test]
fn malformed_inputs_are_format_errors() {
    let p = Path::new("x");
    assert!(matches!(decode_raw_tensor(p, b"FXT2\0\0\0\0"), Err(Error::Format { .. })));
    let mut short = encode_raw_tensor(&rand_tensor(&mut rng(1), &[2, 2], 1.0));
    short.pop();
    assert!(matches!(decode_raw_tensor(p, &short), Err(Error::Format { .. })));
    assert!(matches!(decode_pgm(p, b"P5\n2 2\n255\n\x00"), Err(Error::Format { .. })));
    assert!(matches!(parse_raw_gaze(p, "t,x\n0,1\n".as_bytes()), Err(Error::Format { .. })));
    assert!(matches!(parse_raw_gaze(p, "t_s,x,y,valid\n0,0.5,0.5,maybe\n".as_bytes()), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trip_restores_model_exactly() {
    let cfg = ModelConfig::tiny();
    let lora = LoraConfig { rank: 2, alpha: 4.0 };
    let mut m = FixationFormer::for_training(&cfg, IntegrationVariant::TwoWay, lora, 3).unwrap();
    for p in m.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.01;
        }
    }
    let ck = Checkpoint::capture(&m, Some(lora), None, 7);
    let bytes = ck.encode();
    let back = Checkpoint::decode(Path::new("ck"), &bytes).unwrap();
    assert_eq!(back.meta.epoch, 7);
    let restored = back.restore().unwrap();
    assert_eq!(restored.variant, m.variant);
    for ((_, a), (_, b)) in m.params.iter().zip(restored.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let img = rand_image(&mut rng(4), cfg.image_size);
    let seq = common::rand_sequence(&mut rng(5), 4);
    let ex = fixformer_core::model::Example::new(&img, &seq);
    assert_eq!(m.classify(ex).unwrap(), restored.classify(ex).unwrap());

    assert!(matches!(Checkpoint::decode(Path::new("ck"), &bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(Path::new("ck"), &bad), Err(Error::Format { .. })));

    let other = FixationFormer::new(&cfg, IntegrationVariant::ImageOnly, None, 0).unwrap();
    let mut target = other.clone();
    assert!(ck.load_into(&mut target).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgm_round_trip_is_exact_on_byte_grid(bytes in prop::collection::vec(any::<u8>(), 1..=64), w in 1usize..=8) {
        let h = bytes.len() / w;
        prop_assume!(h > 0);
        let data: Vec<f64> = bytes[..h * w].iter().map(|&b| b as f64 / 255.0).collect();
        let img = fixformer_core::vit::ImageSample::new(fixformer_core::tensor::Tensor::new([h, w], data).unwrap()).unwrap();
        let back = decode_pgm(Path::new("p"), &encode_pgm(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn raw_tensor_round_trip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let t = rand_tensor(&mut rng(seed), &[rows, cols], 1e3);
        let back = decode_raw_tensor(Path::new("t"), &encode_raw_tensor(&t)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn raw_gaze_round_trip(n in 1usize..30, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let samples: Vec<RawGazeSample> = (0..n)
            .map(|i| RawGazeSample { t: i as f64 / 60.0, x: r.random_range(0.0..1.0), y: r.random_range(0.0..1.0), valid: r.random_bool(0.9) })
            .collect();
        let text = format_raw_gaze(&samples);
        let back = parse_raw_gaze(Path::new("g"), text.as_bytes()).unwrap();
        prop_assert_eq!(back.samples, samples);
        prop_assert_eq!(back.clamped, 0);
    }
}
