//! Drives the tracker over a sequence on disk.

use std::path::PathBuf;

use anyhow::{Context, Result};
use dnt_core::features::{Backbone, VggBackbone, TEST_WIDTHS};
use dnt_core::tracking::{FrameReport, Tracker, TrackerConfig};
use dnt_core::Rect;

use crate::dataset::SequenceSpec;
use crate::protocol::{TrackerFactory, Variant};

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneChoice {
    /// Randomly initialised narrow trunk, for tests and demos.
    Test { seed: u64 },
    /// VGG-16 weights from a tensor archive.
    Pretrained { weights: PathBuf },
}

impl BackboneChoice {
    pub fn build(&self, cfg: &TrackerConfig) -> Result<Box<dyn Backbone>> {
        Ok(match self {
            BackboneChoice::Test { seed } => Box::new(VggBackbone::seeded(TEST_WIDTHS, cfg.input_size, *seed)),
            BackboneChoice::Pretrained { weights } => Box::new(
                VggBackbone::from_archive(weights, cfg.input_size)?.with_preprocessing(cfg.pixel_scale, cfg.pixel_mean),
            ),
        })
    }
}

/// Tracks `seq` from `variant.start` and calls `observe` after every step.
/// The returned list starts with the initial box.
pub fn track_sequence(
    seq: &SequenceSpec,
    variant: &Variant,
    cfg: &TrackerConfig,
    backbone: &BackboneChoice,
    mut observe: impl FnMut(&FrameReport, &Tracker) -> Result<()>,
) -> Result<Vec<Rect>> {
    let first = seq.load_frame(variant.start)?;
    let mut tracker = Tracker::init(&first, variant.init, cfg.clone(), backbone.build(cfg)?)
        .with_context(|| format!("{}: initialising at frame {}", seq.name, variant.start + 1))?;
    let mut rects = Vec::with_capacity(seq.len() - variant.start);
    rects.push(variant.init);
    for t in variant.start + 1..seq.len() {
        let frame = seq.load_frame(t)?;
        let report = tracker.step(&frame).with_context(|| format!("{}: frame {}", seq.name, t + 1))?;
        observe(&report, &tracker)?;
        rects.push(report.rect);
    }
    Ok(rects)
}

pub struct DntFactory {
    pub config: TrackerConfig,
    pub backbone: BackboneChoice,
}

impl TrackerFactory for DntFactory {
    fn track(&self, seq: &SequenceSpec, variant: &Variant) -> Result<Vec<Rect>> {
        log::info!("{} {} variant {}", seq.name, variant.protocol, variant.id);
        track_sequence(seq, variant, &self.config, &self.backbone, |_, _| Ok(()))
    }
}
