//! Flat little-endian tensor archive plus a plain-text manifest.
//!
//! The manifest sits next to the binary file (same stem, `.manifest`
//! extension) and has one line per tensor:
//!
//! ```text
//! # name shape dtype offset
//! conv1.weight 128x16x7x7 f64 0
//! conv1.bias 128 f64 802816
//! ```
//!
//! Offsets are in bytes from the start of the binary file. Readers accept
//! `f32` and `f64`; the writer always emits `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{DntError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn manifest_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("manifest")
}

pub fn write_archive(bin_path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut bin = Vec::new();
    let mut manifest = String::from("# name shape dtype offset\n");
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.values.len() || t.name.contains(char::is_whitespace) {
            return Err(DntError::Checkpoint(format!("bad tensor entry {}", t.name)));
        }
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} f64 {}\n", t.name, dims.join("x"), bin.len()));
        for v in &t.values {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(bin_path, bin)?;
    let mut f = fs::File::create(manifest_path(bin_path))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn read_archive(bin_path: &Path) -> Result<BTreeMap<String, NamedTensor>> {
    let bin = fs::read(bin_path)?;
    let manifest = fs::read_to_string(manifest_path(bin_path))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| DntError::Checkpoint(format!("manifest line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("expected `name shape dtype offset`"));
        }
        let shape = fields[1]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("unparsable shape"))?;
        let offset: usize = fields[3].parse().map_err(|_| bad("unparsable offset"))?;
        let count: usize = shape.iter().product();
        let width = match fields[2] {
            "f64" => 8,
            "f32" => 4,
            other => return Err(bad(&format!("unsupported dtype {other}"))),
        };
        let end = offset + count * width;
        if end > bin.len() {
            return Err(bad("tensor extends past end of archive"));
        }
        let raw = &bin[offset..end];
        let values: Vec<f64> = if width == 8 {
            raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        } else {
            raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect()
        };
        out.insert(fields[0].to_string(), NamedTensor { name: fields[0].to_string(), shape, values });
    }
    Ok(out)
}

/// Appends `(iteration, loss)` rows, writing the header on a new file.
pub fn append_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "iteration,loss")?;
    }
    for (i, l) in trace.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    Ok(())
}
