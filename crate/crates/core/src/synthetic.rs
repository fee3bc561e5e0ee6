//! Deterministic synthetic tasks whose label evidence is split between an
//! image motif and a gaze dwell program.
//!
//! Class `k` owns a center `c_k` on a circle around the image center. The
//! image gets a Gaussian blob at a jittered `c_k` with amplitude `(1−λ)·A`
//! over a noisy background. Each fixation of the gaze program lands near
//! `c_k` with probability `λ` and uniformly otherwise, and its dwell time is
//! stretched by `1 + λ·k/(K−1)`. At `λ = 0` the gaze is label-independent, at
//! `λ = 1` the image is.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::io::{read_raw_gaze, write_raw_gaze};
use crate::gaze::{detect_fixations, IdtParams, RawGazeSample};
use crate::imageio::{read_pgm, write_pgm};
use crate::tensor::Tensor;
use crate::train::LabeledExample;
use crate::vit::ImageSample;

pub const SAMPLE_RATE_HZ: f64 = 60.0;
pub const CENTER_RADIUS: f64 = 0.28;
pub const BLOB_SIGMA: f64 = 0.08;
pub const BLOB_AMPLITUDE: f64 = 0.5;
pub const BACKGROUND: f64 = 0.4;
pub const MIN_FIXATIONS: usize = 4;
pub const MAX_FIXATIONS: usize = 24;
const MOTIF_JITTER: f64 = 0.02;
const DWELL_SPREAD: f64 = 0.05;
const SAMPLE_JITTER: f64 = 0.004;
const SACCADE_SAMPLES: usize = 3;
const INVALID_RATE: f64 = 0.01;
const MANIFEST_HEADER: [&str; 5] = ["id", "image_path", "gaze_path", "label", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Share of the label signal carried by gaze, in `[0, 1]`.
    pub lambda: f64,
    /// Std of the per-pixel background noise.
    pub noise: f64,
    pub priors: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 3,
            n_train: 240,
            n_val: 60,
            n_test: 600,
            image_size: 32,
            lambda: 0.5,
            noise: 0.25,
            priors: vec![1.0 / 3.0; 3],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Balanced three-class task at gaze share `lambda`.
    pub fn standard(lambda: f64, seed: u64) -> Self {
        SyntheticSpec {
            lambda,
            seed,
            ..Self::default()
        }
    }

    /// Two classes at 4:1 with label-independent gaze.
    pub fn imbalanced(seed: u64) -> Self {
        SyntheticSpec {
            n_classes: 2,
            n_train: 200,
            n_val: 50,
            n_test: 100,
            lambda: 0.0,
            priors: vec![0.8, 0.2],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.n_classes < 2 {
            return bad("data.n_classes must be at least 2".into());
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if self.image_size < 4 {
            return bad(format!("image size {} is too small", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("data.lambda {} must lie in [0, 1]", self.lambda));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("data.noise must be finite and non-negative".into());
        }
        if self.priors.len() != self.n_classes {
            return bad(format!(
                "{} priors given for {} classes",
                self.priors.len(),
                self.n_classes
            ));
        }
        if self.priors.iter().any(|&p| !(p >= 0.0)) || (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("data.priors must be non-negative and sum to 1".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else if index < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.n_train,
            Split::Val => self.n_train..self.n_train + self.n_val,
            Split::Test => self.n_train + self.n_val..self.len(),
        }
    }

    /// Center of class `k` in normalized `(x, y)`.
    pub fn class_center(&self, k: usize) -> [f64; 2] {
        let a = 2.0 * PI * k as f64 / self.n_classes as f64 + PI / 4.0;
        [0.5 + CENTER_RADIUS * a.cos(), 0.5 + CENTER_RADIUS * a.sin()]
    }

    /// Dwell-time multiplier of class `k`.
    pub fn dwell_factor(&self, k: usize) -> f64 {
        1.0 + self.lambda * k as f64 / (self.n_classes - 1) as f64
    }

    /// Per-class counts of a split of size `n`, largest remainder first.
    pub fn class_counts(&self, n: usize) -> Vec<usize> {
        let raw: Vec<f64> = self.priors.iter().map(|p| p * n as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut rem: Vec<usize> = (0..counts.len()).collect();
        rem.sort_by(|&a, &b| (raw[b] - counts[b] as f64).total_cmp(&(raw[a] - counts[a] as f64)).then(a.cmp(&b)));
        let missing = n - counts.iter().sum::<usize>();
        for &k in rem.iter().take(missing) {
            counts[k] += 1;
        }
        counts
    }

    /// Labels of every sample, global index order. Each split matches the priors exactly.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (s, split) in Split::ALL.iter().enumerate() {
            let n = self.split_range(*split).len();
            let mut labels: Vec<usize> = self
                .class_counts(n)
                .iter()
                .enumerate()
                .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(u64::MAX - s as u64);
            labels.shuffle(&mut rng);
            out.extend(labels);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub index: usize,
    pub split: Split,
    pub label: usize,
    pub image: ImageSample,
    pub raw_gaze: Vec<RawGazeSample>,
    /// Planned fixation centers, before sampling and detection.
    pub dwell_targets: Vec<[f64; 2]>,
}

impl SyntheticSample {
    pub fn id(&self) -> String {
        sample_id(self.index)
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sample_rng(spec: &SyntheticSpec, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    rng
}

fn render_image<R: Rng>(spec: &SyntheticSpec, label: usize, rng: &mut R) -> Result<ImageSample> {
    let n = spec.image_size;
    let jitter = Normal::new(0.0, MOTIF_JITTER).expect("valid std");
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let c = spec.class_center(label);
    let (cx, cy) = (c[0] + jitter.sample(rng), c[1] + jitter.sample(rng));
    let amp = (1.0 - spec.lambda) * BLOB_AMPLITUDE;
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for col in 0..n {
            let (x, y) = ((col as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64);
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            let blob = amp * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
            let e = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(quantize(BACKGROUND + blob + e));
        }
    }
    ImageSample::new(Tensor::new([n, n], data)?)
}

fn dwell_program<R: Rng>(spec: &SyntheticSpec, label: usize, rng: &mut R) -> Vec<([f64; 2], f64)> {
    let count = rng.random_range(MIN_FIXATIONS..=MAX_FIXATIONS);
    let spread = Normal::new(0.0, DWELL_SPREAD).expect("valid std");
    let c = spec.class_center(label);
    (0..count)
        .map(|_| {
            let informative = rng.random::<f64>() < spec.lambda;
            let at = if informative {
                [
                    (c[0] + spread.sample(rng)).clamp(0.02, 0.98),
                    (c[1] + spread.sample(rng)).clamp(0.02, 0.98),
                ]
            } else {
                [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
            };
            let dwell = rng.random_range(0.15..0.6) * spec.dwell_factor(label);
            (at, dwell)
        })
        .collect()
}

fn emit_trace<R: Rng>(program: &[([f64; 2], f64)], rng: &mut R) -> Vec<RawGazeSample> {
    let dt = 1.0 / SAMPLE_RATE_HZ;
    let mut out = Vec::new();
    let push = |out: &mut Vec<RawGazeSample>, rng: &mut R, x: f64, y: f64| {
        let t = out.len() as f64 * dt;
        let valid = rng.random::<f64>() >= INVALID_RATE;
        out.push(if valid {
            RawGazeSample { t, x, y, valid }
        } else {
            RawGazeSample { t, x: 0.0, y: 0.0, valid }
        });
    };
    for (j, &(at, dwell)) in program.iter().enumerate() {
        let n = (dwell / dt).ceil() as usize + 1;
        for _ in 0..n {
            let x = (at[0] + rng.random_range(-SAMPLE_JITTER..SAMPLE_JITTER)).clamp(0.0, 1.0);
            let y = (at[1] + rng.random_range(-SAMPLE_JITTER..SAMPLE_JITTER)).clamp(0.0, 1.0);
            push(&mut out, rng, x, y);
        }
        if let Some(&(next, _)) = program.get(j + 1) {
            for s in 1..=SACCADE_SAMPLES {
                let f = s as f64 / (SACCADE_SAMPLES + 1) as f64;
                push(&mut out, rng, at[0] + f * (next[0] - at[0]), at[1] + f * (next[1] - at[1]));
            }
        }
    }
    out
}

/// Sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &SyntheticSpec, labels: &[usize], index: usize) -> Result<SyntheticSample> {
    let label = labels[index];
    let mut rng = sample_rng(spec, index);
    let image = render_image(spec, label, &mut rng)?;
    let program = dwell_program(spec, label, &mut rng);
    let raw_gaze = emit_trace(&program, &mut rng);
    Ok(SyntheticSample {
        index,
        split: spec.split_of(index),
        label,
        image,
        raw_gaze,
        dwell_targets: program.iter().map(|p| p.0).collect(),
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let labels = spec.labels();
    let samples = (0..spec.len())
        .map(|i| generate_sample(spec, &labels, i))
        .collect::<Result<_>>()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        samples,
    })
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image_path: String,
    pub gaze_path: String,
    pub label: usize,
    pub split: String,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes `images/<id>.pgm`, `gaze/<id>.csv` and `manifest.csv` under `dir`.
pub fn emit_dataset_files(ds: &SyntheticDataset, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "gaze"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::format(&manifest, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(&manifest, e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for s in &ds.samples {
        let id = s.id();
        let image_path = format!("images/{id}.pgm");
        let gaze_path = format!("gaze/{id}.csv");
        write_pgm(&dir.join(&image_path), &s.image)?;
        write_raw_gaze(&dir.join(&gaze_path), &s.raw_gaze)?;
        w.write_record([
            id.as_str(),
            &image_path,
            &gaze_path,
            &s.label.to_string(),
            s.split.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| Error::format(&path, e.to_string()))?;
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::format(
            &path,
            format!("expected header {}", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: ManifestRow = rec.map_err(|e| Error::format(&path, e.to_string()))?;
        row.split.parse::<Split>().map_err(|e| Error::format(&path, e.to_string()))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no samples", path.display())));
    }
    Ok(rows)
}

/// Emitted sample read back from disk, raw gaze included.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub row: ManifestRow,
    pub image: ImageSample,
    pub raw_gaze: Vec<RawGazeSample>,
}

pub fn load_samples(dir: &Path) -> Result<Vec<LoadedSample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let image = read_pgm(&dir.join(&row.image_path))?;
            let raw_gaze = read_raw_gaze(&dir.join(&row.gaze_path))?.samples;
            Ok(LoadedSample { row, image, raw_gaze })
        })
        .collect()
}

/// Train, validation and test examples with detected fixations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[LabeledExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn push(&mut self, split: Split, ex: LabeledExample) {
        match split {
            Split::Train => self.train.push(ex),
            Split::Val => self.val.push(ex),
            Split::Test => self.test.push(ex),
        }
    }

    pub fn n_classes(&self) -> usize {
        [&self.train, &self.val, &self.test]
            .iter()
            .flat_map(|s| s.iter().map(|e| e.label + 1))
            .max()
            .unwrap_or(0)
    }
}

fn labeled(id: String, label: usize, image: ImageSample, raw: &[RawGazeSample], idt: IdtParams) -> Result<LabeledExample> {
    let gaze = detect_fixations(raw, idt).map_err(|e| match e {
        Error::EmptyResult(m) | Error::EmptyInput(m) => Error::EmptyResult(format!("sample {id}: {m}")),
        other => other,
    })?;
    Ok(LabeledExample {
        id,
        image: Some(image),
        gaze: Some(gaze),
        label,
    })
}

/// Runs fixation detection on every in-memory sample.
pub fn to_splits(ds: &SyntheticDataset, idt: IdtParams) -> Result<Splits> {
    let mut out = Splits::default();
    for s in &ds.samples {
        out.push(s.split, labeled(s.id(), s.label, s.image.clone(), &s.raw_gaze, idt)?);
    }
    Ok(out)
}

/// Loads an emitted dataset and runs fixation detection on every trace.
pub fn load_splits(dir: &Path, idt: IdtParams) -> Result<Splits> {
    let mut out = Splits::default();
    for s in load_samples(dir)? {
        let split = s.row.split.parse()?;
        out.push(split, labeled(s.row.id, s.row.label, s.image, &s.raw_gaze, idt)?);
    }
    Ok(out)
}
