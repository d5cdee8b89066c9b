//! `x,y,w,h` result logs and the JSON-lines sidecar.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use dnt_core::tracking::FrameReport;
use dnt_core::Rect;
use serde::Serialize;

use crate::dataset::parse_groundtruth;
use crate::protocol::Variant;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Appends one rectangle per line and flushes after each, so a crash
/// leaves every finished frame on disk.
pub struct RectWriter {
    out: BufWriter<File>,
}

impl RectWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(RectWriter { out: create(path)? })
    }

    pub fn push(&mut self, r: &Rect) -> Result<()> {
        writeln!(self.out, "{:.2},{:.2},{:.2},{:.2}", r.x, r.y, r.w, r.h)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_rects(path: &Path, rects: &[Rect]) -> Result<()> {
    let mut w = RectWriter::create(path)?;
    rects.iter().try_for_each(|r| w.push(r))
}

pub fn read_rects(path: &Path) -> Result<Vec<Rect>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_groundtruth(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct Header<'a> {
    sequence: &'a str,
    variant: &'a Variant,
    seed: u64,
}

/// Per-frame diagnostics, one JSON object per line; the first line names
/// the run.
pub struct Sidecar {
    out: BufWriter<File>,
}

impl Sidecar {
    pub fn create(path: &Path, sequence: &str, variant: &Variant, seed: u64) -> Result<Self> {
        let mut out = create(path)?;
        serde_json::to_writer(&mut out, &Header { sequence, variant, seed })?;
        writeln!(out)?;
        Ok(Sidecar { out })
    }

    pub fn push(&mut self, report: &FrameReport) -> Result<()> {
        serde_json::to_writer(&mut self.out, report)?;
        writeln!(self.out)?;
        self.out.flush()?;
        Ok(())
    }
}

/// `results.txt` -> `results.json`.
pub fn sidecar_path(results: &Path) -> std::path::PathBuf {
    results.with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Protocol;

    #[test]
    fn rects_round_trip_at_two_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        let rects = vec![Rect::new(1.0, 2.5, 30.25, 4.0), Rect::new(-3.0, 0.0, 7.126, 8.0)];
        write_rects(&p, &rects).unwrap();
        let back = read_rects(&p).unwrap();
        assert_eq!(back[0], rects[0]);
        assert!((back[1].w - 7.13).abs() < 1e-12);
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next().unwrap(), "1.00,2.50,30.25,4.00");
    }

    #[test]
    fn sidecar_lines_are_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        let v = Variant { protocol: Protocol::Ope, id: 0, start: 0, init: Rect::new(0.0, 0.0, 2.0, 2.0) };
        let mut s = Sidecar::create(&p, "Toy", &v, 3).unwrap();
        let report = FrameReport {
            frame: 1,
            rect: Rect::new(1.0, 1.0, 2.0, 2.0),
            scale: 1.0,
            confidence: 0.25,
            mean_confidence: 0.3,
            stream_scores: [0.1, 0.2],
            anomaly: true,
            stochastic_update: true,
            periodic_update: false,
            icar_converged: [true, false],
            update_loss: Some([0.5, 0.4]),
        };
        s.push(&report).unwrap();
        drop(s);
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["sequence"], "Toy");
        assert_eq!(lines[0]["variant"]["protocol"], "ope");
        assert_eq!(lines[1]["anomaly"], true);
        assert_eq!(lines[1]["confidence"], 0.25);
        assert_eq!(sidecar_path(Path::new("a/b.txt")), Path::new("a/b.json"));
    }
}
