//! Little-endian binary feature and knowledge-base files, plus a CSV
//! ingestion path for hand-written fixtures.
//!
//! Feature file: `"IFSLFEA1"`, u32 dim, u32 n_classes, u64 n_samples, then
//! `n_samples` records of `{u32 label, dim × f32}`.
//!
//! Knowledge-base file: `"IFSLKB01"`, u32 dim, u32 m, `m × dim` f32 class
//! means (class-major), `m × dim` f32 classifier weights, `m` f32 biases.
//!
//! Values are stored as f32 and widened to f64 on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{FeatureDataset, KnowledgeBase};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"IFSLFEA1";
pub const KB_MAGIC: &[u8; 8] = b"IFSLKB01";

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.offset(),
                format!(
                    "truncated file: need {n} bytes for {what}, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.offset();
        let v = f64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(at, format!("non-finite {what}: {v}")));
        }
        Ok(v)
    }

    /// Reads `n` finite f32 values, widened to f64.
    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.offset();
        let raw = self.take(n * 4, what)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let v = f32::from_le_bytes(b.try_into().unwrap());
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(Error::format(
                        start + 4 * i as u64,
                        format!("non-finite value {v} in {what}"),
                    ))
                }
            })
            .collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    for &v in values {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::invalid(format!("value {v} does not fit in f32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(())
}

pub fn read_features(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut cur = Cursor::new(bytes);
    cur.magic(FEATURE_MAGIC)?;
    let dim = cur.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::format(8, "feature dimension is zero"));
    }
    let n_classes = cur.u32("n_classes")? as usize;
    let n_samples = cur.u64("n_samples")?;
    let record = 4 + 4 * dim as u64;
    let remaining = (bytes.len() as u64).saturating_sub(cur.offset());
    if n_samples.saturating_mul(record) > remaining {
        return Err(Error::format(
            cur.offset(),
            format!("truncated file: header promises {n_samples} records of {record} bytes, {remaining} bytes remain"),
        ));
    }
    let mut classes: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_classes];
    for _ in 0..n_samples {
        let at = cur.offset();
        let label = cur.u32("label")? as usize;
        if label >= n_classes {
            return Err(Error::format(
                at,
                format!("label {label} out of range for {n_classes} classes"),
            ));
        }
        classes[label].push(cur.f32s(dim, "features")?);
    }
    cur.finish()?;
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::format(cur.offset(), format!("class {c} has no samples")));
    }
    FeatureDataset::new(dim, classes).map_err(|e| Error::format(cur.offset(), e.to_string()))
}

pub fn write_features(ds: &FeatureDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + ds.num_samples() * (4 + 4 * ds.dim()));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_samples() as u64).to_le_bytes());
    for (label, x) in ds.iter() {
        out.extend_from_slice(&(label as u32).to_le_bytes());
        put_f32s(&mut out, x)?;
    }
    Ok(out)
}

/// Parses `label,f0,...,f{N-1}` CSV (header required).
pub fn read_features_csv(text: &str) -> Result<FeatureDataset> {
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| Error::format(0, "empty CSV file"))?;
    let columns: Vec<&str> = header.trim_end().split(',').map(str::trim).collect();
    if columns.first() != Some(&"label") || columns.len() < 2 {
        return Err(Error::format(0, "CSV header must be `label,f0,...,f{N-1}`"));
    }
    for (i, col) in columns[1..].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(Error::format(0, format!("unexpected CSV column {col:?}")));
        }
    }
    let dim = columns.len() - 1;
    offset += header.len() as u64;

    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for line in lines {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::format(
                at,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(at, format!("bad label {:?}", fields[0])))?;
        let x = fields[1..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::format(at, format!("bad feature value {f:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((label, x));
    }
    let n_classes = rows.iter().map(|(l, _)| l + 1).max().unwrap_or(0);
    let mut classes = vec![Vec::new(); n_classes];
    for (label, x) in rows {
        classes[label].push(x);
    }
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::format(offset, format!("class {c} has no samples")));
    }
    FeatureDataset::new(dim, classes).map_err(|e| Error::format(offset, e.to_string()))
}

pub fn read_kb(bytes: &[u8]) -> Result<KnowledgeBase> {
    let mut cur = Cursor::new(bytes);
    cur.magic(KB_MAGIC)?;
    let dim = cur.u32("dim")? as usize;
    let m = cur.u32("m")? as usize;
    if dim == 0 || m == 0 {
        return Err(Error::format(8, format!("degenerate shape dim={dim} m={m}")));
    }
    let expected = 16 + 4 * (2 * m * dim + m) as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated file: expected {expected} bytes"),
        ));
    }
    let means = cur.f32s(m * dim, "class means")?;
    let weights = cur.f32s(m * dim, "classifier weights")?;
    let bias = cur.f32s(m, "classifier bias")?;
    cur.finish()?;
    let class_means = means.chunks_exact(dim).map(<[f64]>::to_vec).collect();
    KnowledgeBase::new(class_means, Matrix::from_vec(m, dim, weights)?, bias)
        .map_err(|e| Error::format(cur.offset(), e.to_string()))
}

pub fn write_kb(kb: &KnowledgeBase) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(KB_MAGIC);
    out.extend_from_slice(&(kb.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(kb.m() as u32).to_le_bytes());
    for mean in kb.class_means() {
        put_f32s(&mut out, mean)?;
    }
    put_f32s(&mut out, kb.pre_weights().as_slice())?;
    put_f32s(&mut out, kb.pre_bias())?;
    Ok(out)
}

/// Loads a feature file. Binary files are recognised by their magic; a
/// `.csv` extension selects the CSV reader.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv && !bytes.starts_with(FEATURE_MAGIC) {
        let text =
            std::str::from_utf8(&bytes).map_err(|e| Error::format(e.valid_up_to() as u64, "CSV is not valid UTF-8"))?;
        return read_features_csv(text);
    }
    read_features(&bytes)
}

pub fn store_features(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::File::create(path)?.write_all(&write_features(ds)?)?;
    Ok(())
}

pub fn load_kb(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    read_kb(&fs::read(path)?)
}

pub fn store_kb(kb: &KnowledgeBase, path: impl AsRef<Path>) -> Result<()> {
    fs::File::create(path)?.write_all(&write_kb(kb)?)?;
    Ok(())
}
