//! Message parsing, windowing and normalization.
//!
//! Records arrive as one JSON object per line in the VeReMi Extension layout
//! or as CSV rows with [`CSV_HEADER`]. Labels are not part of either format;
//! they come from a `sender,class` sidecar.

use std::collections::BTreeMap;
use std::io::BufRead;

use ids_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const FEATURES: usize = 8;
pub const FEATURE_NAMES: [&str; FEATURES] = [
    "pos_x", "pos_y", "spd_x", "spd_y", "acl_x", "acl_y", "hed_x", "hed_y",
];
pub const MAX_LABEL: usize = 19;
/// Message-kind tag of a broadcast safety message; other kinds are ignored.
pub const BSM_TYPE: i64 = 3;
pub const CSV_HEADER: &str =
    "send_time,sender_id,pseudo_id,message_id,pos_x,pos_y,spd_x,spd_y,acl_x,acl_y,hed_x,hed_y";

#[derive(Clone, Debug, PartialEq)]
pub struct BsmRecord {
    pub send_time: f64,
    pub sender_id: u64,
    pub pseudo_id: u64,
    pub message_id: u64,
    pub pos_x: f64,
    pub pos_y: f64,
    pub spd_x: f64,
    pub spd_y: f64,
    pub acl_x: f64,
    pub acl_y: f64,
    pub hed_x: f64,
    pub hed_y: f64,
    /// 0 is normal, 1..=19 are attack classes.
    pub label: usize,
}

impl BsmRecord {
    pub fn features(&self) -> [f64; FEATURES] {
        [
            self.pos_x, self.pos_y, self.spd_x, self.spd_y, self.acl_x, self.acl_y, self.hed_x,
            self.hed_y,
        ]
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !self.send_time.is_finite() {
            return Err("sendTime is not finite".into());
        }
        if self.label > MAX_LABEL {
            return Err(format!("label {} out of range", self.label));
        }
        if self.features().iter().any(|v| !v.is_finite()) {
            return Err("non-finite motion field".into());
        }
        Ok(())
    }

    /// One JSON line in the input layout. Labels are not serialized.
    pub fn to_json_line(&self) -> String {
        let raw = RawMessage {
            kind: BSM_TYPE,
            send_time: self.send_time,
            sender: self.sender_id,
            sender_pseudo: self.pseudo_id,
            message_id: self.message_id,
            pos: vec![self.pos_x, self.pos_y, 0.0],
            spd: vec![self.spd_x, self.spd_y, 0.0],
            acl: vec![self.acl_x, self.acl_y, 0.0],
            hed: vec![self.hed_x, self.hed_y, 0.0],
        };
        serde_json::to_string(&raw).expect("plain struct serializes")
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.send_time,
            self.sender_id,
            self.pseudo_id,
            self.message_id,
            self.pos_x,
            self.pos_y,
            self.spd_x,
            self.spd_y,
            self.acl_x,
            self.acl_y,
            self.hed_x,
            self.hed_y
        )
    }
}

#[derive(Serialize, Deserialize)]
struct RawMessage {
    #[serde(rename = "type")]
    kind: i64,
    #[serde(rename = "sendTime")]
    send_time: f64,
    sender: u64,
    #[serde(rename = "senderPseudo")]
    sender_pseudo: u64,
    #[serde(rename = "messageID")]
    message_id: u64,
    pos: Vec<f64>,
    spd: Vec<f64>,
    acl: Vec<f64>,
    hed: Vec<f64>,
}

fn xy(v: &[f64], field: &str) -> std::result::Result<(f64, f64), String> {
    match v {
        [x, y, ..] => Ok((*x, *y)),
        _ => Err(format!("`{field}` needs at least 2 components")),
    }
}

impl TryFrom<RawMessage> for BsmRecord {
    type Error = String;

    fn try_from(m: RawMessage) -> std::result::Result<Self, String> {
        let (pos_x, pos_y) = xy(&m.pos, "pos")?;
        let (spd_x, spd_y) = xy(&m.spd, "spd")?;
        let (acl_x, acl_y) = xy(&m.acl, "acl")?;
        let (hed_x, hed_y) = xy(&m.hed, "hed")?;
        let r = BsmRecord {
            send_time: m.send_time,
            sender_id: m.sender,
            pseudo_id: m.sender_pseudo,
            message_id: m.message_id,
            pos_x,
            pos_y,
            spd_x,
            spd_y,
            acl_x,
            acl_y,
            hed_x,
            hed_y,
            label: 0,
        };
        r.check()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Parsed {
    pub records: Vec<BsmRecord>,
    /// Malformed lines.
    pub skipped: usize,
    /// Well-formed lines of another message kind.
    pub ignored: usize,
    /// Line number and reason for the first few skipped lines.
    pub errors: Vec<(usize, String)>,
}

impl Parsed {
    fn skip(&mut self, line: usize, why: String) {
        self.skipped += 1;
        if self.errors.len() < 16 {
            self.errors.push((line, why));
        }
    }
}

/// Parses JSON-lines records. Blank lines are ignored.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Parsed> {
    let mut out = Parsed::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str::<RawMessage>(text) {
            Ok(raw) if raw.kind != BSM_TYPE => out.ignored += 1,
            Ok(raw) => match BsmRecord::try_from(raw) {
                Ok(r) => out.records.push(r),
                Err(e) => out.skip(i + 1, e),
            },
            Err(e) => out.skip(i + 1, e.to_string()),
        }
    }
    Ok(out)
}

/// Parses the CSV variant. The first row must be [`CSV_HEADER`], optionally
/// followed by a `label` column.
pub fn parse_csv<R: std::io::Read>(reader: R) -> Result<Parsed> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CoreError::Parse(e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    let has_label = names.len() == expected.len() + 1 && names.last() == Some(&"label");
    if names[..expected.len().min(names.len())] != expected[..] || !(names.len() == expected.len() || has_label) {
        return Err(CoreError::Parse(format!("unexpected CSV header {names:?}")));
    }
    let mut out = Parsed::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                if e.is_io_error() {
                    return Err(CoreError::Parse(e.to_string()));
                }
                out.skip(line, e.to_string());
                continue;
            }
        };
        match csv_record(&row, has_label) {
            Ok(r) => out.records.push(r),
            Err(e) => out.skip(line, e),
        }
    }
    Ok(out)
}

fn csv_record(row: &csv::StringRecord, has_label: bool) -> std::result::Result<BsmRecord, String> {
    let want = if has_label { 13 } else { 12 };
    if row.len() != want {
        return Err(format!("expected {want} fields, found {}", row.len()));
    }
    let f = |i: usize| -> std::result::Result<f64, String> {
        row[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"))
    };
    let u = |i: usize| -> std::result::Result<u64, String> {
        row[i].parse::<u64>().map_err(|e| format!("field {i}: {e}"))
    };
    let r = BsmRecord {
        send_time: f(0)?,
        sender_id: u(1)?,
        pseudo_id: u(2)?,
        message_id: u(3)?,
        pos_x: f(4)?,
        pos_y: f(5)?,
        spd_x: f(6)?,
        spd_y: f(7)?,
        acl_x: f(8)?,
        acl_y: f(9)?,
        hed_x: f(10)?,
        hed_y: f(11)?,
        label: if has_label { u(12)? as usize } else { 0 },
    };
    r.check()?;
    Ok(r)
}

/// Reads a `sender,class` sidecar. A header row is tolerated.
pub fn parse_labels<R: BufRead>(reader: R) -> Result<BTreeMap<u64, usize>> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let mut parts = text.split(',').map(str::trim);
        let (Some(s), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CoreError::Parse(format!("labels line {}: `{text}`", i + 1)));
        };
        match (s.parse::<u64>(), c.parse::<usize>()) {
            (Ok(sender), Ok(class)) if class <= MAX_LABEL => {
                out.insert(sender, class);
            }
            _ if i == 0 => {}
            _ => return Err(CoreError::Parse(format!("labels line {}: `{text}`", i + 1))),
        }
    }
    Ok(out)
}

/// Assigns sidecar labels; senders absent from the map are normal.
pub fn apply_labels(records: &mut [BsmRecord], labels: &BTreeMap<u64, usize>) {
    for r in records {
        r.label = labels.get(&r.sender_id).copied().unwrap_or(0);
    }
}

/// A `FEATURES × w` slice of one sender's stream, stored feature-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureWindow {
    pub values: Vec<f64>,
    pub len: usize,
    pub sender_id: u64,
    pub label: usize,
}

impl FeatureWindow {
    pub fn get(&self, feature: usize, t: usize) -> f64 {
        self.values[feature * self.len + t]
    }
}

/// Sliding windows over each sender's time-ordered stream.
///
/// A sender's stream is cut wherever its label changes and windows never
/// cross a cut. Output is ordered by sender id, then time.
pub fn make_windows(records: &[BsmRecord], w: usize, stride: usize) -> Result<Vec<FeatureWindow>> {
    if w == 0 || stride == 0 {
        return Err(CoreError::Config("window size and stride must be positive".into()));
    }
    let mut by_sender: BTreeMap<u64, Vec<&BsmRecord>> = BTreeMap::new();
    for r in records {
        by_sender.entry(r.sender_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (sender, mut msgs) in by_sender {
        msgs.sort_by(|a, b| a.send_time.total_cmp(&b.send_time));
        for segment in msgs.chunk_by(|a, b| a.label == b.label) {
            if segment.len() < w {
                continue;
            }
            let mut start = 0;
            while start + w <= segment.len() {
                let mut values = vec![0.0; FEATURES * w];
                for (t, r) in segment[start..start + w].iter().enumerate() {
                    for (f, v) in r.features().into_iter().enumerate() {
                        values[f * w + t] = v;
                    }
                }
                out.push(FeatureWindow {
                    values,
                    len: w,
                    sender_id: sender,
                    label: segment[0].label,
                });
                start += stride;
            }
        }
    }
    Ok(out)
}

/// Stacks windows into a `[B, FEATURES, w]` batch.
pub fn batch_tensor(windows: &[&FeatureWindow]) -> Result<Tensor> {
    let first = windows.first().ok_or(CoreError::Empty { what: "batch" })?;
    let w = first.len;
    let mut data = Vec::with_capacity(windows.len() * FEATURES * w);
    for win in windows {
        if win.len != w {
            return Err(CoreError::Config("windows of mixed length in one batch".into()));
        }
        data.extend_from_slice(&win.values);
    }
    Ok(Tensor::from_f64(vec![windows.len(), FEATURES, w], data)?)
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature standardization fitted on training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl NormStats {
    /// Population mean and standard deviation over every time step of every
    /// window.
    pub fn fit(train: &[FeatureWindow]) -> Result<Self> {
        if train.is_empty() {
            return Err(CoreError::Empty { what: "training set" });
        }
        let mut mean = [0.0; FEATURES];
        let mut std = [0.0; FEATURES];
        for f in 0..FEATURES {
            let mut n = 0usize;
            let mut m = 0.0;
            let mut m2 = 0.0;
            for win in train {
                for &v in &win.values[f * win.len..(f + 1) * win.len] {
                    n += 1;
                    let d = v - m;
                    m += d / n as f64;
                    m2 += d * (v - m);
                }
            }
            mean[f] = m;
            std[f] = (m2 / n as f64).sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn apply_one(&self, win: &FeatureWindow) -> FeatureWindow {
        let mut out = win.clone();
        for f in 0..FEATURES {
            for v in &mut out.values[f * win.len..(f + 1) * win.len] {
                *v = (*v - self.mean[f]) / self.std[f];
            }
        }
        out
    }

    pub fn apply(&self, windows: &[FeatureWindow]) -> Vec<FeatureWindow> {
        windows.iter().map(|w| self.apply_one(w)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut v = self.mean.to_vec();
        v.extend_from_slice(&self.std);
        Tensor::from_f64(vec![2, FEATURES], v).expect("fixed shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.to_f64_vec();
        if t.shape() != [2, FEATURES] {
            return Err(CoreError::Container(format!(
                "normalization tensor has shape {:?}",
                t.shape()
            )));
        }
        let mut mean = [0.0; FEATURES];
        let mut std = [0.0; FEATURES];
        mean.copy_from_slice(&v[..FEATURES]);
        std.copy_from_slice(&v[FEATURES..]);
        Ok(Self { mean, std })
    }
}

/// Seeded shuffle then split by fractions; the remainder forms the last part.
pub fn split<T: Clone>(items: &[T], fractions: &[f64], seed: u64) -> Vec<Vec<T>> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(fractions.len() + 1);
    let mut start = 0;
    for f in fractions {
        let n = ((items.len() as f64) * f).floor() as usize;
        let end = (start + n).min(items.len());
        out.push(idx[start..end].iter().map(|&i| items[i].clone()).collect());
        start = end;
    }
    out.push(idx[start..].iter().map(|&i| items[i].clone()).collect());
    out
}
