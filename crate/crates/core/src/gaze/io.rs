//! Plain-text gaze formats.
//!
//! Raw gaze: header `t_s,x,y,valid`, one sample per line, `valid` is `1`/`0`.
//! Fixations: header `start_s,duration_s,x,y`. Both are UTF-8 with LF line
//! endings. Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Fixation, FixationSequence, RawGazeSample};
use crate::error::{Error, Result};

pub const RAW_HEADER: [&str; 4] = ["t_s", "x", "y", "valid"];
pub const FIXATION_HEADER: [&str; 4] = ["start_s", "duration_s", "x", "y"];

/// Raw samples read from disk, plus how many had coordinates clamped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGazeTrace {
    pub samples: Vec<RawGazeSample>,
    pub clamped: usize,
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(r)
}

fn check_header(path: &Path, rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let got = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if got.iter().ne(expected.iter().copied()) {
        return Err(Error::format(
            path,
            format!("expected header {}, got {}", expected.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::format(path, format!("line {line}: missing column {i}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: cannot parse {raw:?}")))
}

pub fn parse_raw_gaze<R: Read>(path: &Path, input: R) -> Result<RawGazeTrace> {
    let mut rdr = reader(input);
    check_header(path, &mut rdr, &RAW_HEADER)?;
    let mut samples = Vec::new();
    let mut clamped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let t: f64 = field(path, line, &rec, 0)?;
        let x: f64 = field(path, line, &rec, 1)?;
        let y: f64 = field(path, line, &rec, 2)?;
        let valid = match rec.get(3).map(str::trim) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            other => {
                return Err(Error::format(path, format!("line {line}: bad valid flag {other:?}")));
            }
        };
        if !(t.is_finite() && x.is_finite() && y.is_finite()) || t < 0.0 {
            return Err(Error::format(path, format!("line {line}: non-finite or negative value")));
        }
        let (cx, cy) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
        if valid && (cx != x || cy != y) {
            clamped += 1;
        }
        samples.push(RawGazeSample { t, x: cx, y: cy, valid });
    }
    if samples.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::format(path, "sample times must be strictly increasing"));
    }
    Ok(RawGazeTrace { samples, clamped })
}

pub fn read_raw_gaze(path: &Path) -> Result<RawGazeTrace> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_raw_gaze(path, f)
}

pub fn format_raw_gaze(samples: &[RawGazeSample]) -> String {
    let mut s = RAW_HEADER.join(",");
    s.push('\n');
    for p in samples {
        s.push_str(&format!("{},{},{},{}\n", p.t, p.x, p.y, u8::from(p.valid)));
    }
    s
}

pub fn write_raw_gaze(path: &Path, samples: &[RawGazeSample]) -> Result<()> {
    write_text(path, &format_raw_gaze(samples))
}

pub fn parse_fixations<R: Read>(path: &Path, input: R) -> Result<FixationSequence> {
    let mut rdr = reader(input);
    check_header(path, &mut rdr, &FIXATION_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let (fix, _) = Fixation::checked(
            field(path, line, &rec, 0)?,
            field(path, line, &rec, 1)?,
            field(path, line, &rec, 2)?,
            field(path, line, &rec, 3)?,
        )
        .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        out.push(fix);
    }
    FixationSequence::new(out).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_fixations(path: &Path) -> Result<FixationSequence> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_fixations(path, f)
}

pub fn format_fixations(seq: &FixationSequence) -> String {
    let mut s = FIXATION_HEADER.join(",");
    s.push('\n');
    for f in seq.fixations() {
        s.push_str(&format!("{},{},{},{}\n", f.start, f.duration, f.x, f.y));
    }
    s
}

pub fn write_fixations(path: &Path, seq: &FixationSequence) -> Result<()> {
    write_text(path, &format_fixations(seq))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
