//! Line-oriented `key=value` reports and their JSON twins.
//!
//! Neither format carries timestamps or host information, so a report is a
//! pure function of the resolved configuration and the data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fixformer_core::train::{EpochRecord, MetricsReport};
use fixformer_core::{Error, Result};
use serde_json::{json, Map, Value};

pub const REPORT_FORMAT: &str = "fixformer-report-1";

/// Ordered key/value pairs mirrored into both formats.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    lines: Vec<(String, String)>,
    json: Map<String, Value>,
}

impl Report {
    pub fn new(command: &str, config: &[(String, String)]) -> Self {
        let mut r = Report::default();
        r.scalar("format", REPORT_FORMAT);
        r.scalar("command", command);
        let mut cfg = Map::new();
        for (k, v) in config {
            r.lines.push((format!("config.{k}"), v.clone()));
            cfg.insert(k.clone(), Value::String(v.clone()));
        }
        r.json.insert("config".into(), Value::Object(cfg));
        r
    }

    pub fn scalar(&mut self, key: &str, v: impl ToString) {
        let s = v.to_string();
        self.lines.push((key.to_string(), s.clone()));
        self.json.insert(key.to_string(), Value::String(s));
    }

    pub fn number(&mut self, key: &str, v: f64) {
        self.lines.push((key.to_string(), v.to_string()));
        self.json.insert(key.to_string(), json!(v));
    }

    pub fn integer(&mut self, key: &str, v: usize) {
        self.lines.push((key.to_string(), v.to_string()));
        self.json.insert(key.to_string(), json!(v));
    }

    pub fn metrics(&mut self, prefix: &str, m: &MetricsReport) {
        self.lines.push((format!("{prefix}.accuracy"), m.accuracy.to_string()));
        self.lines.push((format!("{prefix}.macro_f1"), m.macro_f1.to_string()));
        self.lines.push((format!("{prefix}.auc"), m.auc.to_string()));
        for c in 0..m.n_classes {
            self.lines.push((format!("{prefix}.class.{c}.precision"), m.precision[c].to_string()));
            self.lines.push((format!("{prefix}.class.{c}.recall"), m.recall[c].to_string()));
            self.lines.push((format!("{prefix}.class.{c}.f1"), m.f1[c].to_string()));
            self.lines.push((format!("{prefix}.class.{c}.support"), m.support[c].to_string()));
            let row: Vec<String> = m.confusion[c].iter().map(|v| v.to_string()).collect();
            self.lines.push((format!("{prefix}.confusion.{c}"), row.join(",")));
        }
        self.json
            .insert(prefix.to_string(), serde_json::to_value(m).expect("metrics serialize"));
    }

    pub fn history(&mut self, h: &[EpochRecord]) {
        let mut arr = Vec::with_capacity(h.len());
        for r in h {
            let e = r.epoch;
            if let Some(l) = r.train_loss {
                self.lines.push((format!("epoch.{e}.train_loss"), l.to_string()));
            }
            self.lines.push((format!("epoch.{e}.val_accuracy"), r.val_accuracy.to_string()));
            self.lines.push((format!("epoch.{e}.lr"), r.lr.to_string()));
            arr.push(json!({
                "epoch": e,
                "train_loss": r.train_loss,
                "val_accuracy": r.val_accuracy,
                "lr": r.lr,
            }));
        }
        self.json.insert("history".into(), Value::Array(arr));
    }

    /// Arbitrary structured payload, JSON only; `lines` are added alongside.
    pub fn table(&mut self, key: &str, value: Value, lines: Vec<(String, String)>) {
        self.lines.extend(lines);
        self.json.insert(key.to_string(), value);
    }

    pub fn lines(&self) -> &[(String, String)] {
        &self.lines
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            writeln!(s, "{k}={v}").expect("write to string");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.json.clone())).expect("json");
        s.push('\n');
        s
    }

    /// Writes `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        let js = dir.join(format!("{stem}.json"));
        std::fs::write(&txt, self.to_text()).map_err(|e| io(&txt, e))?;
        std::fs::write(&js, self.to_json()).map_err(|e| io(&js, e))?;
        Ok((txt, js))
    }
}

pub(crate) fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Parses a `key=value` report back into pairs; blank and `#` lines are skipped.
pub fn parse_text(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {l:?} is not key=value"),
                })
        })
        .collect()
}
