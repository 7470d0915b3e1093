//! CSV and IDX readers, and atomic CSV/JSON writers.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn parse_records<T: Real, R: Read>(reader: R, source: &str) -> Result<Array2<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{source}: row {}: {e}", r + 1)))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse(format!(
                    "{source}: row {} has {} fields, expected {w}",
                    r + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!("{source}: row {}, column {}: '{field}' is not a number", r + 1, c + 1))
            })?;
            values.push(T::lit(v));
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Parse(format!("{source}: no data")))?;
    Array2::from_shape_vec((rows, width), values).map_err(|e| Error::Parse(format!("{source}: {e}")))
}

/// Rectangular numeric CSV without a header.
pub fn read_csv<T: Real>(path: impl AsRef<Path>) -> Result<Array2<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(file, &path.display().to_string())
}

pub fn parse_csv<T: Real>(text: &str) -> Result<Array2<T>> {
    parse_records(text.as_bytes(), "input")
}

/// A single column (or a single row) of values.
pub fn read_vector<T: Real>(path: impl AsRef<Path>) -> Result<Array1<T>> {
    let a = read_csv::<T>(path.as_ref())?;
    match a.dim() {
        (_, 1) | (1, _) => Ok(Array1::from_iter(a.iter().copied())),
        (r, c) => Err(Error::Parse(format!("{}: expected a vector, found {r}×{c}", path.as_ref().display()))),
    }
}

/// 0/1 mask CSV; `1` marks an observed entry.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Array2<bool>> {
    let path = path.as_ref();
    let a = read_csv::<f64>(path)?;
    let mut out = Array2::from_elem(a.raw_dim(), true);
    for ((i, j), &v) in a.indexed_iter() {
        out[[i, j]] = match v {
            x if x == 1.0 => true,
            x if x == 0.0 => false,
            x => {
                return Err(Error::Parse(format!(
                    "{}: row {}, column {}: mask entries must be 0 or 1, got {x}",
                    path.display(),
                    i + 1,
                    j + 1
                )))
            }
        };
    }
    Ok(out)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Shortest representation that reads back to the same `f64`, which never
/// needs more than 17 significant digits.
pub fn format_csv<T: Real>(a: &Array2<T>) -> String {
    let mut out = String::new();
    for row in a.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv<T: Real>(path: impl AsRef<Path>, a: &Array2<T>) -> Result<()> {
    write_atomic(path, format_csv(a).as_bytes())
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Array2<bool>) -> Result<()> {
    write_csv(path, &mask.mapv(|o| if o { 1.0 } else { 0.0 }))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(path, text.as_bytes())
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |_| Error::Parse(format!("{}: file is truncated", path.display()))
}

/// Big-endian IDX image file (one row per image, pixels scaled to `[0, 1]`)
/// and its label file.
pub fn load_idx<T: Real>(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(Array2<T>, Vec<usize>)> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let mut cur = Cursor::new(read_bytes(ip)?);
    let magic = cur.read_u32::<BigEndian>().map_err(truncated(ip))?;
    if magic != IDX_IMAGES {
        return Err(Error::Parse(format!("{}: bad image magic {magic:#010x}", ip.display())));
    }
    let count = cur.read_u32::<BigEndian>().map_err(truncated(ip))? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(truncated(ip))? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(truncated(ip))? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    cur.read_exact(&mut pixels).map_err(truncated(ip))?;
    let x = Array2::from_shape_vec((count, rows * cols), pixels.into_iter().map(|p| T::lit(p as f64 / 255.0)).collect())
        .map_err(|e| Error::Parse(e.to_string()))?;

    let mut cur = Cursor::new(read_bytes(lp)?);
    let magic = cur.read_u32::<BigEndian>().map_err(truncated(lp))?;
    if magic != IDX_LABELS {
        return Err(Error::Parse(format!("{}: bad label magic {magic:#010x}", lp.display())));
    }
    let n_labels = cur.read_u32::<BigEndian>().map_err(truncated(lp))? as usize;
    if n_labels != count {
        return Err(Error::Parse(format!("{n_labels} labels for {count} images")));
    }
    let mut labels = vec![0u8; n_labels];
    cur.read_exact(&mut labels).map_err(truncated(lp))?;
    Ok((x, labels.into_iter().map(usize::from).collect()))
}
