//! OTB-layout sequence directories: `img/` frames, `groundtruth_rect.txt`,
//! optional `attrs.txt`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dnt_core::image::Frame;
use dnt_core::Rect;

/// The eleven OTB challenge attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    IlluminationVariation,
    ScaleVariation,
    Occlusion,
    Deformation,
    MotionBlur,
    FastMotion,
    InPlaneRotation,
    OutOfPlaneRotation,
    OutOfView,
    BackgroundClutter,
    LowResolution,
}

impl Attribute {
    pub const ALL: [Attribute; 11] = [
        Attribute::IlluminationVariation,
        Attribute::ScaleVariation,
        Attribute::Occlusion,
        Attribute::Deformation,
        Attribute::MotionBlur,
        Attribute::FastMotion,
        Attribute::InPlaneRotation,
        Attribute::OutOfPlaneRotation,
        Attribute::OutOfView,
        Attribute::BackgroundClutter,
        Attribute::LowResolution,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Attribute::IlluminationVariation => "IV",
            Attribute::ScaleVariation => "SV",
            Attribute::Occlusion => "OCC",
            Attribute::Deformation => "DEF",
            Attribute::MotionBlur => "MB",
            Attribute::FastMotion => "FM",
            Attribute::InPlaneRotation => "IPR",
            Attribute::OutOfPlaneRotation => "OPR",
            Attribute::OutOfView => "OV",
            Attribute::BackgroundClutter => "BC",
            Attribute::LowResolution => "LR",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Attribute {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Attribute::ALL
            .into_iter()
            .find(|a| a.tag() == up)
            .with_context(|| format!("unknown attribute tag {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub groundtruth: Vec<Rect>,
    pub attributes: Vec<Attribute>,
}

impl SequenceSpec {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let path = self.frames.get(index).with_context(|| format!("{}: no frame {index}", self.name))?;
        read_frame(path).with_context(|| format!("{}: frame {index}", self.name))
    }
}

/// Splits on commas, tabs or spaces and parses `x, y, w, h`.
pub fn parse_rect_line(line: &str) -> Result<Rect> {
    let nums: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("bad number {t:?}")))
        .collect::<Result<_>>()?;
    if nums.len() != 4 {
        bail!("expected 4 values, found {}", nums.len());
    }
    Ok(Rect::new(nums[0], nums[1], nums[2], nums[3]))
}

pub fn parse_groundtruth(text: &str) -> Result<Vec<Rect>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_rect_line(l).with_context(|| format!("line {}", n + 1)))
        .collect()
}

pub fn parse_attributes(text: &str) -> Result<Vec<Attribute>> {
    let mut out: Vec<Attribute> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

pub fn load_sequence(dir: &Path) -> Result<SequenceSpec> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .with_context(|| format!("{} has no usable name", dir.display()))?
        .to_string();
    let img = dir.join("img");
    let mut frames: Vec<PathBuf> = std::fs::read_dir(&img)
        .with_context(|| format!("reading {}", img.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    frames.sort();
    let gt_path = dir.join("groundtruth_rect.txt");
    let gt_text = std::fs::read_to_string(&gt_path).with_context(|| format!("reading {}", gt_path.display()))?;
    let groundtruth = parse_groundtruth(&gt_text).with_context(|| format!("parsing {}", gt_path.display()))?;
    if frames.len() != groundtruth.len() {
        bail!("{name}: {} frames but {} ground-truth rectangles", frames.len(), groundtruth.len());
    }
    if frames.len() < 2 {
        bail!("{name}: need at least 2 frames");
    }
    if let Some(i) = groundtruth.iter().position(|r| !(r.w > 0.0 && r.h > 0.0)) {
        bail!("{name}: ground-truth rectangle {} has no area", i + 1);
    }
    let attrs_path = dir.join("attrs.txt");
    let attributes = if attrs_path.exists() {
        parse_attributes(&std::fs::read_to_string(&attrs_path)?).with_context(|| format!("parsing {}", attrs_path.display()))?
    } else {
        Vec::new()
    };
    Ok(SequenceSpec { name, frames, groundtruth, attributes })
}

/// Every sequence directory directly under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceSpec>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth_rect.txt").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Frame::new(w as usize, h as usize, pixels)?)
}

pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    let raw: Vec<u8> = frame.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, raw).context("frame buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Writes frames and ground truth as an OTB-layout directory.
pub fn write_sequence(dir: &Path, frames: &[Frame], truth: &[Rect], attributes: &[Attribute]) -> Result<SequenceSpec> {
    if frames.len() != truth.len() {
        bail!("{} frames but {} rectangles", frames.len(), truth.len());
    }
    std::fs::create_dir_all(dir.join("img"))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(f, &dir.join("img").join(format!("{:04}.png", i + 1)))?;
    }
    let gt: String = truth.iter().map(|r| format!("{},{},{},{}\n", r.x, r.y, r.w, r.h)).collect();
    std::fs::write(dir.join("groundtruth_rect.txt"), gt)?;
    if !attributes.is_empty() {
        let tags: Vec<&str> = attributes.iter().map(|a| a.tag()).collect();
        std::fs::write(dir.join("attrs.txt"), tags.join(",") + "\n")?;
    }
    load_sequence(dir)
}
