use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fixformer_core::bench::{bench_profile, BenchOptions, BenchRow, LengthProfile};
use fixformer_core::model::{Example, FixationFormer};
use fixformer_core::synthetic::{emit_dataset_files, generate, load_splits, to_splits, Split, Splits, SyntheticSpec};
use fixformer_core::train::gradcheck::{gradcheck, GradcheckOptions, GradcheckRow};
use fixformer_core::train::{evaluate, train, Checkpoint, MetricsReport, TrainOutcome};
use fixformer_core::{Error, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::report::{io, parse_text, Report};

pub const CHECKPOINT_FILE: &str = "checkpoint.fxck";
pub const REPORT_STEM: &str = "report";
pub const ATTENTION_DIR: &str = "attention";
pub const ATTENTION_HEADER: &str = "# fixformer-attention";

/// Generates the synthetic dataset into `paths.data_dir`; returns the manifest path.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = generate(&cfg.data)?;
    emit_dataset_files(&ds, &cfg.data_dir)
}

fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let manifest = cfg.data_dir.join(fixformer_core::synthetic::MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::Io {
            path: manifest,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found; run `fixformer generate` first"),
        });
    }
    let splits = load_splits(&cfg.data_dir, cfg.idt)?;
    let k = splits.n_classes();
    if k > cfg.data.n_classes {
        return Err(Error::contract(format!(
            "dataset has labels up to {} but data.n_classes is {}",
            k - 1,
            cfg.data.n_classes
        )));
    }
    Ok(splits)
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub report: Report,
    pub checkpoint: PathBuf,
    pub report_paths: (PathBuf, PathBuf),
}

impl TrainRun {
    pub fn summary(&self) -> String {
        let o = &self.outcome;
        let mut s = String::new();
        writeln!(s, "best epoch {} (validation accuracy {:.4})", o.best_epoch, o.val.accuracy).unwrap();
        write!(s, "{}", metrics_summary("test", &o.test)).unwrap();
        writeln!(s, "checkpoint {}", self.checkpoint.display()).unwrap();
        writeln!(s, "report {}", self.report_paths.0.display()).unwrap();
        s
    }
}

pub fn metrics_summary(name: &str, m: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{name}: accuracy {:.4}  macro-F1 {:.4}  AUC {:.4}",
        m.accuracy, m.macro_f1, m.auc
    )
    .unwrap();
    for c in 0..m.n_classes {
        writeln!(
            s,
            "  class {c}: precision {:.4} recall {:.4} support {}  confusion {:?}",
            m.precision[c], m.recall[c], m.support[c], m.confusion[c]
        )
        .unwrap();
    }
    s
}

/// Trains on samples already in memory and writes checkpoint and reports into `paths.out_dir`.
pub fn train_on(cfg: &RunConfig, splits: &Splits) -> Result<TrainRun> {
    let model = FixationFormer::for_training(&cfg.model, cfg.variant, cfg.lora(), cfg.train.seed)?;
    let lora = model.lora();
    let outcome = train(model, &splits.train, &splits.val, &splits.test, &cfg.train)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io(&cfg.out_dir, e))?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    Checkpoint::capture(&outcome.model, lora, Some(cfg.train.clone()), outcome.best_epoch).write(&checkpoint)?;

    let mut report = Report::new("train", &cfg.entries());
    report.integer("samples.train", splits.train.len());
    report.integer("samples.val", splits.val.len());
    report.integer("samples.test", splits.test.len());
    report.integer("steps", outcome.step_losses.len());
    report.integer("best_epoch", outcome.best_epoch);
    report.history(&outcome.history);
    report.metrics("val", &outcome.val);
    report.metrics("test", &outcome.test);
    let report_paths = report.write(&cfg.out_dir, REPORT_STEM)?;
    Ok(TrainRun {
        outcome,
        report,
        checkpoint,
        report_paths,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun> {
    let splits = load_data(cfg)?;
    train_on(cfg, &splits)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<(MetricsReport, Report)> {
    let ck = Checkpoint::read(checkpoint)?;
    let model = ck.restore()?;
    let splits = load_data(cfg)?;
    let m = evaluate(&model, splits.get(split))?;
    let mut report = Report::new("eval", &cfg.entries());
    report.scalar("checkpoint", checkpoint.display());
    report.scalar("checkpoint.variant", &ck.meta.variant);
    report.integer("checkpoint.epoch", ck.meta.epoch);
    report.scalar("split", split);
    report.metrics(split.as_str(), &m);
    report.write(&cfg.out_dir, &format!("eval_{split}"))?;
    Ok((m, report))
}

pub struct GradcheckRun {
    pub rows: Vec<GradcheckRow>,
    pub tolerance: f64,
}

impl GradcheckRun {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.group.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:>7}  {:>12}  {:>12}  result\n", "group", "entries", "|grad|", "rel error");
        for r in &self.rows {
            writeln!(
                s,
                "{:<w$}  {:>7}  {:>12.4e}  {:>12.4e}  {}",
                r.group,
                r.entries,
                r.analytic_norm,
                r.rel_error,
                if r.passed { "pass" } else { "FAIL" }
            )
            .unwrap();
        }
        let failed = self.rows.iter().filter(|r| !r.passed).count();
        writeln!(s, "{} groups, {failed} failed (tolerance {:e})", self.rows.len(), self.tolerance).unwrap();
        s
    }
}

/// Finite-difference check of every parameter group on a few synthetic samples.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckRun> {
    let spec = SyntheticSpec {
        n_train: cfg.gradcheck.batch,
        n_val: 1,
        n_test: 1,
        ..cfg.data.clone()
    };
    let splits = to_splits(&generate(&spec)?, cfg.idt)?;
    let model = FixationFormer::for_training(&cfg.model, cfg.variant, cfg.lora(), cfg.train.seed)?;
    let batch: Vec<Example> = splits.train.iter().map(|e| e.example()).collect();
    let labels: Vec<usize> = splits.train.iter().map(|e| e.label).collect();
    let opts = GradcheckOptions {
        step: cfg.gradcheck.step,
        tolerance: cfg.gradcheck.tolerance,
        seed: cfg.train.seed,
        corrupt: (!cfg.gradcheck.corrupt.is_empty()).then(|| cfg.gradcheck.corrupt.clone()),
        ..GradcheckOptions::default()
    };
    if let Some(name) = &opts.corrupt {
        if model.params.id(name).is_none() {
            return Err(Error::contract(format!("gradcheck.corrupt names unknown group {name:?}")));
        }
    }
    let rows = gradcheck(&model, &batch, &labels, &opts)?;
    Ok(GradcheckRun {
        rows,
        tolerance: opts.tolerance,
    })
}

pub fn bench_profiles(cfg: &RunConfig) -> Result<Vec<LengthProfile>> {
    let b = cfg.bench.batch;
    let equal = LengthProfile::Equal {
        batch: b,
        len: cfg.bench.equal_len,
    };
    Ok(match cfg.bench.profile.as_str() {
        "all" => vec![equal, LengthProfile::Mixed { batch: b }, LengthProfile::Skewed { batch: b }],
        "equal" => vec![equal],
        "mixed" => vec![LengthProfile::Mixed { batch: b }],
        "skewed" => vec![LengthProfile::Skewed { batch: b }],
        other => {
            if let Some(list) = other.strip_prefix("custom:") {
                let lens = list
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::contract(format!("bad bench.profile {other:?}")))?;
                vec![LengthProfile::Custom(lens)]
            } else {
                return Err(Error::contract(format!(
                    "unknown bench.profile {other:?} (all, equal, mixed, skewed or custom:<lengths>)"
                )));
            }
        }
    })
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<8} {:>5} {:>6} {:>12} {:>12} {:>8} {:>11} {:>10} {:>10} {:>9}\n",
        "profile", "B", "max T", "ragged", "padded", "ratio", "closed form", "ragged ms", "padded ms", "max diff"
    );
    for r in rows {
        writeln!(
            s,
            "{:<8} {:>5} {:>6} {:>12} {:>12} {:>8.4} {:>11.4} {:>10.3} {:>10.3} {:>9.1e}",
            r.profile,
            r.lengths.len(),
            r.lengths.iter().max().unwrap_or(&0),
            r.ragged_values,
            r.padded_values,
            r.ratio,
            r.closed_form_ratio,
            r.ragged_ms,
            r.padded_ms,
            r.max_abs_diff
        )
        .unwrap();
    }
    s
}

/// Ragged versus padded cross-attention at the configured width.
///
/// Writes `bench.txt` and `bench.json`; timings vary between runs, buffer sizes do not.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let opts = BenchOptions {
        width: cfg.model.d_model,
        heads: cfg.model.n_heads,
        queries: cfg.model.n_image_tokens(),
        reps: cfg.bench.reps,
        seed: cfg.train.seed,
    };
    let rows = bench_profiles(cfg)?
        .iter()
        .map(|p| bench_profile(p, &opts))
        .collect::<Result<Vec<_>>>()?;
    let mut report = Report::new("bench", &cfg.entries());
    let mut lines = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let p = format!("bench.{i}");
        lines.push((format!("{p}.profile"), r.profile.clone()));
        lines.push((format!("{p}.batch"), r.lengths.len().to_string()));
        lines.push((format!("{p}.ragged_values"), r.ragged_values.to_string()));
        lines.push((format!("{p}.padded_values"), r.padded_values.to_string()));
        lines.push((format!("{p}.ratio"), r.ratio.to_string()));
        lines.push((format!("{p}.closed_form_ratio"), r.closed_form_ratio.to_string()));
        lines.push((format!("{p}.ragged_ms"), r.ragged_ms.to_string()));
        lines.push((format!("{p}.padded_ms"), r.padded_ms.to_string()));
    }
    report.table("bench", json!(rows), lines);
    report.write(&cfg.out_dir, "bench")?;
    Ok(rows)
}

/// Writes one plain-text matrix per (layer, head) of the image→gaze
/// cross-attention for sample `id`.
pub fn cmd_export_attention(cfg: &RunConfig, checkpoint: &Path, id: &str) -> Result<Vec<PathBuf>> {
    let model = Checkpoint::read(checkpoint)?.restore()?;
    if !model.variant.has_cross_attention() {
        return Err(Error::contract("no cross-attention in this variant"));
    }
    let splits = load_data(cfg)?;
    let sample = Split::ALL
        .iter()
        .flat_map(|&s| splits.get(s))
        .find(|e| e.id == id)
        .ok_or_else(|| Error::contract(format!("sample {id:?} is not in the dataset")))?;
    let maps = model.export_attention(&[sample.example()])?;
    let dir = cfg.out_dir.join(ATTENTION_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let mut paths = Vec::with_capacity(maps.len());
    for m in &maps {
        let path = dir.join(format!("{id}_layer{}_head{}.txt", m.layer, m.head));
        let (rows, cols) = (m.weights.rows(), m.weights.cols());
        let mut s = format!(
            "{ATTENTION_HEADER} layer={} head={} sample={id} queries={rows} keys={cols}\n",
            m.layer, m.head
        );
        for r in 0..rows {
            let line: Vec<String> = m.weights.row(r).iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        std::fs::write(&path, s).map_err(|e| io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parsed attention dump.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub header: Vec<(String, String)>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_attention_dump(path: &Path) -> Result<AttentionDump> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    let head = lines
        .next()
        .and_then(|l| l.strip_prefix(ATTENTION_HEADER))
        .ok_or_else(|| bad("missing attention header".into()))?;
    let header = head
        .split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("bad header field {kv:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = lines
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value {v:?}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionDump { header, rows })
}

/// Human-readable summary of a report file or an attention dump directory.
pub fn cmd_report(path: &Path) -> Result<String> {
    let mut s = String::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyInput(format!("{} holds no attention dumps", path.display())));
        }
        for f in files {
            let d = read_attention_dump(&f)?;
            let fields: Vec<String> = d.header.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let worst = d
                .rows
                .iter()
                .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            let cls = d.rows.first().map(|r| fixformer_core::train::metrics::argmax(r)).unwrap_or(0);
            writeln!(
                s,
                "{}: {}  max |row sum - 1| {:.1e}  [CLS] attends most to gaze token {cls}",
                f.file_name().unwrap().to_string_lossy(),
                fields.join(" "),
                worst
            )
            .unwrap();
        }
        return Ok(s);
    }
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let pairs = parse_text(path, &text)?;
    for (k, v) in pairs.iter().filter(|(k, _)| !k.starts_with("config.") && !k.starts_with("epoch.")) {
        writeln!(s, "{k:<32} {v}").unwrap();
    }
    Ok(s)
}
