//! Resolved run configuration.
//!
//! The file is TOML with `[model]`, `[train]`, `[data]`, `[idt]`, `[paths]`,
//! `[bench]` and `[gradcheck]` tables plus a top-level `variant`. Every key
//! flattens to a dotted name (`train.lr`) and goes through the same setter
//! as `--set key=value`, so the schema is checked in one place.

use std::path::{Path, PathBuf};

use fixformer_core::config::ModelConfig;
use fixformer_core::gaze::IdtParams;
use fixformer_core::integration::IntegrationVariant;
use fixformer_core::model::LoraConfig;
use fixformer_core::synthetic::SyntheticSpec;
use fixformer_core::train::TrainConfig;
use fixformer_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    /// `all`, `equal`, `mixed` or `skewed`.
    pub profile: String,
    pub batch: usize,
    /// Sequence length of the `equal` profile.
    pub equal_len: usize,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSettings {
    pub step: f64,
    pub tolerance: f64,
    pub batch: usize,
    /// Parameter group whose analytic gradient is perturbed; empty for none.
    pub corrupt: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: IntegrationVariant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub idt: IdtParams,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub bench: BenchSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            variant: IntegrationVariant::CrossAttention,
            data: SyntheticSpec {
                image_size: model.image_size,
                n_classes: model.n_classes,
                ..SyntheticSpec::default()
            },
            model,
            train: TrainConfig::default(),
            idt: IdtParams::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            bench: BenchSettings {
                profile: "all".into(),
                batch: 20,
                equal_len: 16,
                reps: 5,
            },
            gradcheck: GradcheckSettings {
                step: 1e-5,
                tolerance: 1e-4,
                batch: 3,
                corrupt: String::new(),
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::contract(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse(key, s)).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "variant",
    "model.image_size",
    "model.patch_size",
    "model.d_model",
    "model.n_heads",
    "model.n_encoder_layers",
    "model.n_integration_layers",
    "model.mlp_ratio",
    "train.epochs",
    "train.lr",
    "train.weight_decay",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.lora_rank",
    "train.lora_alpha",
    "train.seed",
    "data.preset",
    "data.n_classes",
    "data.n_train",
    "data.n_val",
    "data.n_test",
    "data.lambda",
    "data.noise",
    "data.priors",
    "data.seed",
    "idt.max_dispersion",
    "idt.min_duration",
    "paths.data_dir",
    "paths.out_dir",
    "bench.profile",
    "bench.batch",
    "bench.equal_len",
    "bench.reps",
    "gradcheck.step",
    "gradcheck.tolerance",
    "gradcheck.batch",
    "gradcheck.corrupt",
];

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "variant" => self.variant = v.parse()?,
            "model.image_size" => m.image_size = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.n_encoder_layers" => m.n_encoder_layers = parse(key, v)?,
            "model.n_integration_layers" => m.n_integration_layers = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.lora_rank" => t.lora_rank = parse(key, v)?,
            "train.lora_alpha" => t.lora_alpha = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "data.preset" => {
                let base = match v.trim() {
                    "standard" => SyntheticSpec::default(),
                    "imbalanced" => SyntheticSpec::imbalanced(0),
                    other => return Err(Error::contract(format!("unknown data.preset {other:?}"))),
                };
                *d = SyntheticSpec { seed: d.seed, ..base };
            }
            "data.n_classes" => {
                d.n_classes = parse(key, v)?;
                if d.priors.len() != d.n_classes && d.n_classes > 0 {
                    d.priors = vec![1.0 / d.n_classes as f64; d.n_classes];
                }
            }
            "data.n_train" => d.n_train = parse(key, v)?,
            "data.n_val" => d.n_val = parse(key, v)?,
            "data.n_test" => d.n_test = parse(key, v)?,
            "data.lambda" => d.lambda = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "data.priors" => d.priors = parse_list(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "idt.max_dispersion" => self.idt.max_dispersion = parse(key, v)?,
            "idt.min_duration" => self.idt.min_duration = parse(key, v)?,
            "paths.data_dir" => self.data_dir = PathBuf::from(v),
            "paths.out_dir" => self.out_dir = PathBuf::from(v),
            "bench.profile" => self.bench.profile = v.trim().to_string(),
            "bench.batch" => self.bench.batch = parse(key, v)?,
            "bench.equal_len" => self.bench.equal_len = parse(key, v)?,
            "bench.reps" => self.bench.reps = parse(key, v)?,
            "gradcheck.step" => self.gradcheck.step = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "gradcheck.batch" => self.gradcheck.batch = parse(key, v)?,
            "gradcheck.corrupt" => self.gradcheck.corrupt = v.trim().to_string(),
            _ => return Err(Error::contract(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` as it would be written back.
    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        Some(match key {
            "variant" => self.variant.to_string(),
            "model.image_size" => m.image_size.to_string(),
            "model.patch_size" => m.patch_size.to_string(),
            "model.d_model" => m.d_model.to_string(),
            "model.n_heads" => m.n_heads.to_string(),
            "model.n_encoder_layers" => m.n_encoder_layers.to_string(),
            "model.n_integration_layers" => m.n_integration_layers.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.lora_rank" => t.lora_rank.to_string(),
            "train.lora_alpha" => t.lora_alpha.to_string(),
            "train.seed" => t.seed.to_string(),
            "data.preset" => return None,
            "data.n_classes" => d.n_classes.to_string(),
            "data.n_train" => d.n_train.to_string(),
            "data.n_val" => d.n_val.to_string(),
            "data.n_test" => d.n_test.to_string(),
            "data.lambda" => d.lambda.to_string(),
            "data.noise" => d.noise.to_string(),
            "data.priors" => join(&d.priors),
            "data.seed" => d.seed.to_string(),
            "idt.max_dispersion" => self.idt.max_dispersion.to_string(),
            "idt.min_duration" => self.idt.min_duration.to_string(),
            "paths.data_dir" => self.data_dir.display().to_string(),
            "paths.out_dir" => self.out_dir.display().to_string(),
            "bench.profile" => self.bench.profile.clone(),
            "bench.batch" => self.bench.batch.to_string(),
            "bench.equal_len" => self.bench.equal_len.to_string(),
            "bench.reps" => self.bench.reps.to_string(),
            "gradcheck.step" => self.gradcheck.step.to_string(),
            "gradcheck.tolerance" => self.gradcheck.tolerance.to_string(),
            "gradcheck.batch" => self.gradcheck.batch.to_string(),
            "gradcheck.corrupt" => self.gradcheck.corrupt.clone(),
            _ => return None,
        })
    }

    /// The fully resolved configuration as `(key, value)` pairs.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .filter_map(|k| self.get(k).map(|v| (k.to_string(), v)))
            .collect()
    }

    /// Applies assignments in order; a `data.preset` is applied before everything else.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if let Some((k, v)) = pairs.iter().rev().find(|(k, _)| k == "data.preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "data.preset") {
            self.set(k, v)?;
        }
        self.sync();
        Ok(())
    }

    fn sync(&mut self) {
        self.data.image_size = self.model.image_size;
        self.model.n_classes = self.data.n_classes;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if !(self.idt.max_dispersion > 0.0) || !(self.idt.min_duration >= 0.0) {
            return Err(Error::contract("idt thresholds must be positive"));
        }
        if self.bench.batch == 0 || self.bench.equal_len == 0 {
            return Err(Error::contract("bench.batch and bench.equal_len must be positive"));
        }
        if self.gradcheck.batch == 0 || !(self.gradcheck.step > 0.0) {
            return Err(Error::contract("gradcheck.batch and gradcheck.step must be positive"));
        }
        Ok(())
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.train.lora_rank,
            alpha: self.train.lora_alpha,
        }
    }

    /// Defaults, then the file, then overrides; validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                parse_file(p, &text)?
            }
            None => Vec::new(),
        };
        for o in overrides {
            pairs.push(parse_override(o)?);
        }
        let mut cfg = RunConfig::default();
        cfg.apply(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the resolved configuration back as TOML accepted by [`parse_file`].
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = String::new();
        for (k, v) in self.entries() {
            match k.split_once('.') {
                None => out.push_str(&format!("{k} = {v:?}\n")),
                Some((sec, name)) => {
                    if sec != section {
                        out.push_str(&format!("\n[{sec}]\n"));
                        section = sec.to_string();
                    }
                    out.push_str(&format!("{name} = {v:?}\n"));
                }
            }
        }
        out
    }
}

/// `key=value` from the command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::contract(format!("override {s:?} is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.to_string()))
}

/// Flattens a TOML document into dotted `(key, value)` pairs.
pub fn parse_file(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.message().to_string(),
    })?;
    let mut out = Vec::new();
    flatten("", &table, path, &mut out)?;
    Ok(out)
}

fn scalar(path: &Path, key: &str, v: &toml::Value) -> Result<String> {
    use toml::Value::*;
    Ok(match v {
        String(s) => s.clone(),
        Integer(i) => i.to_string(),
        Float(f) => f.to_string(),
        Boolean(b) => b.to_string(),
        Array(items) => items
            .iter()
            .map(|i| scalar(path, key, i))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported value for {key}"),
            })
        }
    })
}

fn flatten(prefix: &str, t: &toml::Table, path: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => flatten(&key, inner, path, out)?,
            other => out.push((key.clone(), scalar(path, &key, other)?)),
        }
    }
    Ok(())
}
