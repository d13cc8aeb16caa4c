//! Feature matrices, partially labelled datasets and their on-disk formats.
//!
//! Binary feature layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `CIPR`                   |
//! | 4      | 2    | version (u16, = 1)             |
//! | 6      | 8    | n (u64)                        |
//! | 14     | 4    | d (u32)                        |
//! | 18     | 1    | flags (bit 0: rows normalized) |
//! | 19     | 5    | reserved, zero                 |
//! | 24     | 4·n·d| f32 values, row-major          |

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CIPR";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
const FLAG_NORMALIZED: u8 = 1;

/// Tolerance on row norms for a matrix flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Dense row-major `n × d` matrix of embedding coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        if values.len() != n * d {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a {n}x{d} matrix, got {}",
                n * d,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            n,
            d,
            values,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::InvalidInput(format!(
                "row {i} has {} columns, expected {d}",
                rows[i].len()
            )));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Copies the selected rows into a new matrix, keeping the normalized flag.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        let mut m = Self::new(rows.len(), self.d, values)?;
        m.normalized = self.normalized;
        Ok(m)
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    if m.normalized {
        return Ok(m.clone());
    }
    let mut values = Vec::with_capacity(m.values.len());
    for i in 0..m.n {
        let row = m.row(i);
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!(
                "row {i} has zero norm and cannot be normalized"
            )));
        }
        values.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(FeatureMatrix {
        n: m.n,
        d: m.d,
        values,
        normalized: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// `.csv` / `.txt` are CSV, anything else is the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") || ext.eq_ignore_ascii_case("txt") => {
                FeatureFormat::Csv
            }
            _ => FeatureFormat::Binary,
        }
    }
}

pub fn load_features(path: impl AsRef<Path>, format: FeatureFormat) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        FeatureFormat::Binary => decode_binary(path, &bytes),
        FeatureFormat::Csv => decode_csv(path, &bytes),
    }
}

pub fn write_features(
    path: impl AsRef<Path>,
    m: &FeatureMatrix,
    format: FeatureFormat,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        FeatureFormat::Binary => encode_binary(m),
        FeatureFormat::Csv => {
            let mut out = String::new();
            for i in 0..m.n {
                let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            out.into_bytes()
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_binary(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n as u64).to_le_bytes());
    out.extend_from_slice(&(m.d as u32).to_le_bytes());
    out.push(if m.normalized { FLAG_NORMALIZED } else { 0 });
    out.extend_from_slice(&[0u8; 5]);
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_binary(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(
            path,
            format!("byte {}", bytes.len()),
            "file shorter than the 24-byte header",
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::parse(path, "byte 0", "bad magic, expected `CIPR`"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::parse(
            path,
            "byte 4",
            format!("unsupported version {version}"),
        ));
    }
    let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let flags = bytes[18];
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(Error::parse(
            path,
            "byte 18",
            format!("unknown flag bits {flags:#04x}"),
        ));
    }
    if let Some(p) = bytes[19..24].iter().position(|&b| b != 0) {
        return Err(Error::parse(
            path,
            format!("byte {}", 19 + p),
            "reserved header bytes must be zero",
        ));
    }
    let n = usize::try_from(n).map_err(|_| Error::parse(path, "byte 6", "n overflows"))?;
    if n == 0 || d == 0 {
        return Err(Error::parse(path, "byte 6", format!("empty shape {n}x{d}")));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::parse(path, "byte 6", "shape overflows"))?;
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            format!("byte {}", bytes.len().min(expected)),
            format!("expected {expected} bytes for {n}x{d}, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(n * d);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(
                path,
                format!("byte {}", HEADER_LEN + 4 * k),
                format!("non-finite value {v}"),
            ));
        }
        values.push(v);
    }
    let normalized = flags & FLAG_NORMALIZED != 0;
    let mut m = FeatureMatrix {
        n,
        d,
        values,
        normalized: false,
    };
    if normalized {
        if let Some(i) = (0..n).find(|&i| (row_norm(m.row(i)) - 1.0).abs() > UNIT_NORM_TOL) {
            return Err(Error::parse(
                path,
                format!("byte {}", HEADER_LEN + 4 * i * d),
                format!("row {i} is flagged normalized but its norm is not 1"),
            ));
        }
        m.normalized = true;
    }
    Ok(m)
}

fn decode_csv(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut values = Vec::new();
    let mut d: Option<usize> = None;
    let mut n = 0usize;
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, "csv", e.to_string()))?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f32>, _> = rec.iter().map(str::parse::<f32>).collect();
        let row = match parsed {
            Ok(row) => row,
            // a non-numeric first row is a header
            Err(_) if n == 0 && d.is_none() => {
                d = Some(rec.len());
                continue;
            }
            Err(e) => {
                return Err(Error::parse(
                    path,
                    format!("line {line}"),
                    format!("non-numeric field: {e}"),
                ))
            }
        };
        let width = *d.get_or_insert(row.len());
        if row.len() != width {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("row has {} columns, expected {width}", row.len()),
            ));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("non-finite value in column {c}"),
            ));
        }
        values.extend(row);
        n += 1;
    }
    let d = d.unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(Error::parse(path, "line 1", "no feature rows"));
    }
    FeatureMatrix::new(n, d, values)
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Per-instance labels after contiguous remapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub ids: Vec<Option<u32>>,
    /// `original[c]` is the label value in the file that maps to class `c`.
    pub original: Vec<u64>,
}

impl Labels {
    pub fn num_classes(&self) -> usize {
        self.original.len()
    }

    /// Contiguous id of an original label value, if it occurs.
    pub fn class_of(&self, original: u64) -> Option<u32> {
        self.original.iter().position(|&o| o == original).map(|c| c as u32)
    }
}

/// Reads an `index,label` CSV. Unlisted indices and empty labels are unlabelled;
/// label values are remapped to `0..N_L` in first-seen order.
pub fn load_labels(path: impl AsRef<Path>, n: usize) -> Result<Labels> {
    let path = path.as_ref();
    let rows = read_index_csv(path, n)?;
    let mut ids = vec![None; n];
    let mut original = Vec::new();
    let mut remap: HashMap<u64, u32> = HashMap::new();
    for (index, raw) in rows {
        if let Some(raw) = raw {
            let next = remap.len() as u32;
            let id = *remap.entry(raw).or_insert_with(|| {
                original.push(raw);
                next
            });
            ids[index] = Some(id);
        }
    }
    Ok(Labels { ids, original })
}

/// Reads an `index,value` CSV without remapping. Used for predictions and raw
/// ground truth where the ids carry meaning.
pub fn read_index_csv(path: &Path, n: usize) -> Result<Vec<(usize, Option<u64>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, "csv", e.to_string()))?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let index_field = rec.get(0).unwrap_or("");
        if k == 0 && index_field.parse::<i64>().is_err() {
            continue; // header
        }
        if rec.len() > 2 {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("expected 2 columns, found {}", rec.len()),
            ));
        }
        let index: i64 = index_field.parse().map_err(|_| {
            Error::parse(path, format!("line {line}"), format!("bad index `{index_field}`"))
        })?;
        if index < 0 || index as usize >= n {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("index {index} out of range 0..{n}"),
            ));
        }
        let index = index as usize;
        if std::mem::replace(&mut seen[index], true) {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!("duplicate index {index}"),
            ));
        }
        let field = rec.get(1).unwrap_or("");
        let value = if field.is_empty() {
            None
        } else {
            let v: i64 = field.parse().map_err(|_| {
                Error::parse(path, format!("line {line}"), format!("bad label `{field}`"))
            })?;
            if v < 0 {
                return Err(Error::parse(
                    path,
                    format!("line {line}"),
                    format!("negative label {v}"),
                ));
            }
            Some(v as u64)
        };
        out.push((index, value));
    }
    Ok(out)
}

/// Writes `index,<column>` rows for every instance; `None` becomes an empty field.
pub fn write_index_csv<T: std::fmt::Display>(
    path: impl AsRef<Path>,
    column: &str,
    values: &[Option<T>],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    write_index_csv_to(&mut out, column, values).map_err(|e| Error::io(path, e))?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_index_csv_to<T: std::fmt::Display, W: Write>(
    out: &mut W,
    column: &str,
    values: &[Option<T>],
) -> std::io::Result<()> {
    writeln!(out, "index,{column}")?;
    for (i, v) in values.iter().enumerate() {
        match v {
            Some(v) => writeln!(out, "{i},{v}")?,
            None => writeln!(out, "{i},")?,
        }
    }
    Ok(())
}

/// Features plus optional per-instance class ids (`0..N_L`, contiguous).
#[derive(Debug, Clone)]
pub struct GcdDataset {
    features: FeatureMatrix,
    labels: Vec<Option<u32>>,
    labelled: Vec<usize>,
    unlabelled: Vec<usize>,
    num_classes: usize,
}

impl GcdDataset {
    pub fn new(features: FeatureMatrix, labels: Vec<Option<u32>>) -> Result<Self> {
        if labels.len() != features.n() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} instances",
                labels.len(),
                features.n()
            )));
        }
        let num_classes = labels.iter().flatten().map(|&c| c as usize + 1).max().unwrap_or(0);
        let mut present = vec![false; num_classes];
        for &c in labels.iter().flatten() {
            present[c as usize] = true;
        }
        if let Some(c) = present.iter().position(|&p| !p) {
            return Err(Error::InvalidInput(format!(
                "class ids must be contiguous; class {c} has no instance"
            )));
        }
        let (labelled, unlabelled) = (0..labels.len()).partition(|&i| labels[i].is_some());
        Ok(Self {
            features,
            labels,
            labelled,
            unlabelled,
            num_classes,
        })
    }

    pub fn unlabelled_only(features: FeatureMatrix) -> Self {
        let n = features.n();
        Self::new(features, vec![None; n]).expect("all-unlabelled dataset is always valid")
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels[i]
    }

    pub fn n(&self) -> usize {
        self.features.n()
    }

    /// `I_L`, ascending.
    pub fn labelled_indices(&self) -> &[usize] {
        &self.labelled
    }

    /// `I_U`, ascending.
    pub fn unlabelled_indices(&self) -> &[usize] {
        &self.unlabelled
    }

    /// `N_L`, the number of distinct labelled classes.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Same features with the labels of `hide` dropped. Class ids are kept as
    /// they are, so every class must retain at least one labelled instance.
    pub fn with_hidden_labels(&self, hide: &[usize]) -> Result<Self> {
        let mut labels = self.labels.clone();
        for &i in hide {
            labels[i] = None;
        }
        Self::new(self.features.clone(), labels)
    }

    pub fn with_features(&self, features: FeatureMatrix) -> Result<Self> {
        Self::new(features, self.labels.clone())
    }
}

/// Stratified split of `I_L` into a clustering part and a validation part.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelledSplit {
    /// `D^l_L`, ascending.
    pub train: Vec<usize>,
    /// `D^v_L`, ascending.
    pub val: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of instances of a `k`-sized class sent to the training side.
pub fn train_count(ratio: f64, k: usize) -> usize {
    // the epsilon absorbs representation error in products like 0.6 * 10
    let c = (ratio * k as f64 - 1e-9).ceil() as usize;
    c.clamp(1, k)
}

pub fn split_labelled(ds: &GcdDataset, ratio: f64, seed: u64) -> Result<LabelledSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    if ds.labelled_indices().is_empty() {
        return Err(Error::InvalidInput(
            "cannot split: dataset has no labelled instances".into(),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for &i in ds.labelled_indices() {
        by_class[ds.labels[i].unwrap() as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut members in by_class {
        members.shuffle(&mut rng);
        let k = train_count(ratio, members.len());
        train.extend_from_slice(&members[..k]);
        val.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(LabelledSplit {
        train,
        val,
        ratio,
        seed,
    })
}
