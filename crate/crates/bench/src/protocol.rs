//! One-pass, spatially perturbed and temporally shifted evaluation runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dnt_core::Rect;
use serde::Serialize;

use crate::dataset::{Attribute, SequenceSpec};
use crate::metrics::{curves, MetricCurves};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Ope,
    Sre,
    Tre,
}

impl FromStr for Protocol {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ope" => Ok(Protocol::Ope),
            "sre" => Ok(Protocol::Sre),
            "tre" => Ok(Protocol::Tre),
            _ => bail!("unknown protocol {s:?} (ope|sre|tre)"),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Ope => "ope",
            Protocol::Sre => "sre",
            Protocol::Tre => "tre",
        })
    }
}

/// One run of a sequence: where it starts and the box it starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Variant {
    pub protocol: Protocol,
    pub id: usize,
    pub start: usize,
    pub init: Rect,
}

pub const SRE_SHIFT: f64 = 0.1;
pub const SRE_SCALES: [f64; 4] = [0.8, 0.9, 1.1, 1.2];
pub const TRE_SEGMENTS: usize = 20;

fn sre_inits(gt: Rect) -> Vec<Rect> {
    let (dx, dy) = (SRE_SHIFT * gt.w, SRE_SHIFT * gt.h);
    let shifts = [(-dx, 0.0), (dx, 0.0), (0.0, -dy), (0.0, dy), (-dx, -dy), (dx, -dy), (-dx, dy), (dx, dy)];
    let (cx, cy) = gt.center();
    shifts
        .iter()
        .map(|&(sx, sy)| Rect::new(gt.x + sx, gt.y + sy, gt.w, gt.h))
        .chain(SRE_SCALES.iter().map(|&s| Rect::from_center(cx, cy, gt.w * s, gt.h * s)))
        .collect()
}

/// Start frames `floor(k * n / 20)`, repeats removed, each leaving at least
/// two frames to track.
pub fn tre_starts(n: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..TRE_SEGMENTS).map(|k| k * n / TRE_SEGMENTS).filter(|&s| s + 2 <= n).collect();
    starts.dedup();
    starts
}

/// Variants of `protocol` for `seq`, in a fixed order.
pub fn variants(protocol: Protocol, seq: &SequenceSpec) -> Vec<Variant> {
    let gt = &seq.groundtruth;
    match protocol {
        Protocol::Ope => vec![Variant { protocol, id: 0, start: 0, init: gt[0] }],
        Protocol::Sre => sre_inits(gt[0])
            .into_iter()
            .enumerate()
            .map(|(id, init)| Variant { protocol, id, start: 0, init })
            .collect(),
        Protocol::Tre => tre_starts(seq.len())
            .into_iter()
            .enumerate()
            .map(|(id, start)| Variant { protocol, id, start, init: gt[start] })
            .collect(),
    }
}

/// Something that can track a span of a sequence from a given box.
pub trait TrackerFactory {
    /// One rectangle per frame from `variant.start` to the end, the first
    /// being the initial box.
    fn track(&self, seq: &SequenceSpec, variant: &Variant) -> Result<Vec<Rect>>;
}

/// Tracked boxes for one variant of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultLog {
    pub sequence: String,
    pub variant: Variant,
    pub rects: Vec<Rect>,
}

impl ResultLog {
    /// `<seq>.txt` for one-pass runs, `<seq>_<protocol>_<id>.txt` otherwise.
    pub fn file_name(sequence: &str, variant: &Variant) -> String {
        match variant.protocol {
            Protocol::Ope => format!("{sequence}.txt"),
            p => format!("{sequence}_{p}_{}.txt", variant.id),
        }
    }

    pub fn evaluate(&self, seq: &SequenceSpec) -> Result<MetricCurves> {
        let truth = seq
            .groundtruth
            .get(self.variant.start..)
            .with_context(|| format!("{}: start frame {} out of range", seq.name, self.variant.start))?;
        curves(&self.rects, truth).with_context(|| format!("{} {} variant {}", seq.name, self.variant.protocol, self.variant.id))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceReport {
    pub name: String,
    pub attributes: Vec<String>,
    pub variants: usize,
    pub curves: MetricCurves,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributeReport {
    pub attribute: String,
    pub sequences: usize,
    pub curves: MetricCurves,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub sequences: Vec<SequenceReport>,
    pub attributes: Vec<AttributeReport>,
    pub overall: MetricCurves,
}

/// Averages variant curves per sequence, then sequences per attribute and
/// overall. `logs` holds every variant of every sequence.
pub fn evaluate(protocol: Protocol, sequences: &[SequenceSpec], logs: &[ResultLog]) -> Result<EvalReport> {
    let mut by_seq: BTreeMap<&str, Vec<&ResultLog>> = BTreeMap::new();
    for l in logs {
        by_seq.entry(l.sequence.as_str()).or_default().push(l);
    }
    let mut reports = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let expected = variants(protocol, seq).len();
        let runs = by_seq.get(seq.name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if runs.len() != expected {
            bail!("{}: {} {protocol} results, expected {expected}", seq.name, runs.len());
        }
        let per: Vec<MetricCurves> = runs.iter().map(|l| l.evaluate(seq)).collect::<Result<_>>()?;
        let curves = MetricCurves::average(&per)?;
        curves.check().with_context(|| seq.name.clone())?;
        reports.push(SequenceReport {
            name: seq.name.clone(),
            attributes: seq.attributes.iter().map(|a| a.tag().to_string()).collect(),
            variants: per.len(),
            curves,
        });
    }
    let attributes = attribute_averages(&reports)?;
    let all: Vec<MetricCurves> = reports.iter().map(|r| r.curves.clone()).collect();
    let overall = MetricCurves::average(&all)?;
    overall.check()?;
    Ok(EvalReport { protocol, sequences: reports, attributes, overall })
}

/// Mean curves over the sequences carrying each tag; tags nobody carries
/// are left out.
pub fn attribute_averages(reports: &[SequenceReport]) -> Result<Vec<AttributeReport>> {
    let mut out = Vec::new();
    for attr in Attribute::ALL {
        let tagged: Vec<MetricCurves> = reports
            .iter()
            .filter(|r| r.attributes.iter().any(|t| t == attr.tag()))
            .map(|r| r.curves.clone())
            .collect();
        if tagged.is_empty() {
            continue;
        }
        let curves = MetricCurves::average(&tagged)?;
        curves.check()?;
        out.push(AttributeReport { attribute: attr.tag().to_string(), sequences: tagged.len(), curves });
    }
    Ok(out)
}

/// Runs every variant with `factory` and evaluates the results.
pub fn run_protocol(
    protocol: Protocol,
    sequences: &[SequenceSpec],
    factory: &dyn TrackerFactory,
) -> Result<(EvalReport, Vec<ResultLog>)> {
    let mut logs = Vec::new();
    for seq in sequences {
        for v in variants(protocol, seq) {
            let rects = factory.track(seq, &v)?;
            logs.push(ResultLog { sequence: seq.name.clone(), variant: v, rects });
        }
    }
    Ok((evaluate(protocol, sequences, &logs)?, logs))
}

pub fn run_ope(sequences: &[SequenceSpec], factory: &dyn TrackerFactory) -> Result<(EvalReport, Vec<ResultLog>)> {
    run_protocol(Protocol::Ope, sequences, factory)
}

pub fn run_sre(sequences: &[SequenceSpec], factory: &dyn TrackerFactory) -> Result<(EvalReport, Vec<ResultLog>)> {
    run_protocol(Protocol::Sre, sequences, factory)
}

pub fn run_tre(sequences: &[SequenceSpec], factory: &dyn TrackerFactory) -> Result<(EvalReport, Vec<ResultLog>)> {
    run_protocol(Protocol::Tre, sequences, factory)
}
