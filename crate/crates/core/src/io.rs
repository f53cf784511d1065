//! Binary embedding dataset files and CSV import.
//!
//! Layout (little-endian): the 8 magic bytes `CIOSL1\0\0`, then `u32` record
//! count, `u32` embedding dimension, `u32` class count and `u32` flags
//! (bit 0: records carry instance/frame metadata). Each record is
//! `f32 x dim` embedding, `u16` label, `u16` instance id, `u32` frame index.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::{Dataset, DatasetRecord};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 8] = *b"CIOSL1\0\0";
pub const HEADER_LEN: usize = 24;
pub const FLAG_INSTANCES: u32 = 1;

const MAX_CLASSES: u64 = 1 << 16;

fn record_len(dim: usize) -> u64 {
    4 * dim as u64 + 8
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn u16_at(bytes: &[u8], offset: usize) -> u16 {
    u16::from_le_bytes(bytes[offset..offset + 2].try_into().expect("2 bytes"))
}

/// Parses a complete dataset file image.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let actual = bytes.len() as u64;
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 8 && bytes[..8] != MAGIC {
            return Err(bad_magic(bytes).into());
        }
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual,
        }
        .into());
    }
    if bytes[..8] != MAGIC {
        return Err(bad_magic(bytes).into());
    }
    let n = u32_at(bytes, 8);
    let dim = u32_at(bytes, 12);
    let classes = u32_at(bytes, 16);
    let flags = u32_at(bytes, 20);
    for (field, offset, value) in [("record count", 8, n), ("dim", 12, dim), ("classes", 16, classes)] {
        if value == 0 {
            return Err(FormatError::ZeroField { field, offset }.into());
        }
    }
    if u64::from(classes) > MAX_CLASSES {
        return Err(FormatError::FieldTooLarge {
            field: "classes",
            offset: 16,
            value: classes.into(),
            limit: MAX_CLASSES,
        }
        .into());
    }
    if flags & !FLAG_INSTANCES != 0 {
        return Err(FormatError::FieldTooLarge {
            field: "flags",
            offset: 20,
            value: flags.into(),
            limit: FLAG_INSTANCES.into(),
        }
        .into());
    }
    let dim = dim as usize;
    let has_instances = flags & FLAG_INSTANCES != 0;
    let expected = HEADER_LEN as u64 + u64::from(n) * record_len(dim);
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual }.into());
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes { expected, actual }.into());
    }

    let mut records = Vec::with_capacity(n as usize);
    let mut frames = HashSet::new();
    let mut offset = HEADER_LEN;
    for record in 0..n as usize {
        let mut z = Vec::with_capacity(dim);
        for j in 0..dim {
            let at = offset + 4 * j;
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(FormatError::NonFiniteEmbedding {
                    record,
                    offset: at as u64,
                }
                .into());
            }
            z.push(f64::from(v));
        }
        let meta = offset + 4 * dim;
        let label = u16_at(bytes, meta);
        let instance = u16_at(bytes, meta + 2);
        let frame = u32_at(bytes, meta + 4);
        if u32::from(label) >= classes {
            return Err(FormatError::LabelOutOfRange {
                record,
                offset: meta as u64,
                label: label.into(),
                classes,
            }
            .into());
        }
        if has_instances && !frames.insert((label, instance, frame)) {
            return Err(FormatError::DuplicateFrame {
                record,
                offset: (meta + 2) as u64,
                label: label.into(),
                instance: instance.into(),
                frame,
            }
            .into());
        }
        records.push(DatasetRecord {
            z,
            y: label.into(),
            instance_id: instance.into(),
            frame_index: frame,
        });
        offset += record_len(dim) as usize;
    }
    Dataset::new(dim, classes as usize, has_instances, records)
}

fn bad_magic(bytes: &[u8]) -> FormatError {
    FormatError::BadMagic {
        expected: MAGIC,
        found: bytes[..bytes.len().min(8)].to_vec(),
    }
}

/// Serializes a dataset. Embeddings are stored as `f32`.
pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let too_large = |what: &str| Err(Error::InvalidParameter(format!("{what} does not fit the file format")));
    if ds.records.len() > u32::MAX as usize || ds.dim > u32::MAX as usize {
        return too_large("record count or dimension");
    }
    if ds.num_classes as u64 > MAX_CLASSES {
        return too_large("class count");
    }
    if ds.records.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + ds.records.len() * record_len(ds.dim) as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(ds.records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    let flags = if ds.has_instances { FLAG_INSTANCES } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for r in &ds.records {
        let instance = match u16::try_from(r.instance_id) {
            Ok(i) => i,
            Err(_) => return too_large("instance id"),
        };
        for &v in &r.z {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite("embedding (after f32 conversion)"));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&(r.y as u16).to_le_bytes());
        out.extend_from_slice(&instance.to_le_bytes());
        out.extend_from_slice(&r.frame_index.to_le_bytes());
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode(ds)?)
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary sibling and renames it into place, so a
/// failure never leaves a half-written file at `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Reads a CSV with a header row. The `label` column is required; optional
/// `instance` and `frame` columns supply temporal metadata; every other
/// column is an embedding coordinate, in file order.
pub fn import_csv(path: impl AsRef<Path>, classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, classes)
}

pub fn parse_csv(reader: impl std::io::Read, classes: Option<usize>) -> Result<Dataset> {
    let csv_err = |line: u64, message: String| Error::from(FormatError::Csv { line, message });
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let label_col = find("label").ok_or_else(|| csv_err(1, "missing `label` column".into()))?;
    let instance_col = find("instance");
    let frame_col = find("frame");
    if instance_col.is_some() != frame_col.is_some() {
        return Err(csv_err(1, "`instance` and `frame` columns must appear together".into()));
    }
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_col && Some(i) != instance_col && Some(i) != frame_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(csv_err(1, "no embedding columns".into()));
    }
    let mut records = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let rec = result.map_err(|e| csv_err(line, e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let int = |i: usize, what: &str| -> Result<u64> {
            field(i)
                .parse::<u64>()
                .map_err(|_| csv_err(line, format!("{what} `{}` is not a nonnegative integer", field(i))))
        };
        let y = int(label_col, "label")?;
        let (instance_id, frame_index) = match (instance_col, frame_col) {
            (Some(i), Some(f)) => {
                let instance = int(i, "instance")?;
                let frame = int(f, "frame")?;
                if instance > u64::from(u16::MAX) || frame > u64::from(u32::MAX) {
                    return Err(csv_err(line, "instance or frame out of range".into()));
                }
                (instance as u32, frame as u32)
            }
            _ => (0, 0),
        };
        let mut z = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let v: f64 = field(c)
                .parse()
                .map_err(|_| csv_err(line, format!("`{}` is not a number", field(c))))?;
            if !v.is_finite() {
                return Err(csv_err(line, "non-finite embedding value".into()));
            }
            z.push(v);
        }
        records.push(DatasetRecord {
            z,
            y: y as usize,
            instance_id,
            frame_index,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("csv dataset"));
    }
    let max_label = records.iter().map(|r| r.y).max().unwrap_or(0);
    let num_classes = classes.unwrap_or(max_label + 1);
    if let Some(r) = records.iter().position(|r| r.y >= num_classes) {
        return Err(csv_err(
            r as u64 + 2,
            format!("label {} out of range for {num_classes} classes", records[r].y),
        ));
    }
    Dataset::new(feature_cols.len(), num_classes, instance_col.is_some(), records)
}
