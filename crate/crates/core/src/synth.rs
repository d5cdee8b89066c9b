//! Generated tracking sequences with analytic ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Rect;
use crate::image::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Initial side of the square target.
    pub target_side: f64,
    /// Horizontal and vertical sway amplitudes, pixels.
    pub amplitude: (f64, f64),
    /// Sway periods, frames.
    pub period: (f64, f64),
    /// Final scale factor reached gradually over `scale_frames`.
    pub scale_to: f64,
    pub scale_frames: (usize, usize),
    /// Frames `[start, end)` hidden behind a flat grey occluder.
    pub occlusion: Option<(usize, usize)>,
    /// Texture blocks per target side.
    pub texture_blocks: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 160,
            height: 120,
            frames: 50,
            target_side: 24.0,
            amplitude: (25.0, 15.0),
            period: (50.0, 35.0),
            scale_to: 1.2,
            scale_frames: (10, 25),
            occlusion: Some((32, 37)),
            texture_blocks: 6,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// A target that never moves, scales or hides.
    pub fn stationary(frames: usize) -> Self {
        SyntheticSpec {
            frames,
            amplitude: (0.0, 0.0),
            scale_to: 1.0,
            occlusion: None,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub truth: Vec<Rect>,
    pub occluded: Vec<bool>,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Ground-truth rectangle at frame `t`.
pub fn truth_at(spec: &SyntheticSpec, t: usize) -> Rect {
    let tau = std::f64::consts::TAU;
    let cx = spec.width as f64 / 2.0 + spec.amplitude.0 * (tau * t as f64 / spec.period.0).sin();
    let cy = spec.height as f64 / 2.0 + spec.amplitude.1 * (tau * t as f64 / spec.period.1).sin();
    let (s0, s1) = spec.scale_frames;
    let progress = if s1 > s0 { (t as f64 - s0 as f64) / (s1 - s0) as f64 } else { 1.0 };
    let side = spec.target_side * (1.0 + (spec.scale_to - 1.0) * smoothstep(progress));
    Rect::from_center(cx, cy, side, side)
}

fn background(x: f64, y: f64) -> [f64; 3] {
    [
        0.35 + 0.08 * (x / 45.0).sin(),
        0.40 + 0.06 * (y / 38.0).cos(),
        0.45 + 0.04 * ((x + y) / 60.0).sin(),
    ]
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.texture_blocks.max(1);
    let texture: Vec<[f64; 3]> = (0..n * n)
        .map(|k| {
            let bright = (k / n + k % n) % 2 == 0;
            let base = if bright { 0.8 } else { 0.1 };
            [
                base + rng.random_range(-0.1..0.1),
                base + rng.random_range(-0.1..0.1),
                base + rng.random_range(-0.1..0.1),
            ]
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    let mut occluded = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let rect = truth_at(spec, t);
        let hidden = spec.occlusion.is_some_and(|(a, b)| t >= a && t < b);
        let cover = {
            let (cx, cy) = rect.center();
            Rect::from_center(cx, cy, rect.w * 1.6, rect.h * 1.6)
        };
        let mut frame = Frame::filled(spec.width, spec.height, [0.0; 3]);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let rgb = if hidden && cover.contains_point(px, py) {
                    [0.5; 3]
                } else if rect.contains_point(px, py) {
                    let u = (((px - rect.x) / rect.w * n as f64) as usize).min(n - 1);
                    let v = (((py - rect.y) / rect.h * n as f64) as usize).min(n - 1);
                    texture[v * n + u]
                } else {
                    background(px, py)
                };
                frame.set(x, y, rgb);
            }
        }
        frames.push(frame);
        truth.push(rect);
        occluded.push(hidden);
    }
    SyntheticSequence { frames, truth, occluded }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sequence_meets_motion_limits() {
        let spec = SyntheticSpec::default();
        let seq = generate(&spec);
        assert_eq!(seq.frames.len(), 50);
        assert_eq!(seq.occluded.iter().filter(|o| **o).count(), 5);
        for pair in seq.truth.windows(2) {
            let (a, b) = (pair[0].center(), pair[1].center());
            assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= 5.0);
        }
        let ratio = seq.truth[49].w / seq.truth[0].w;
        assert!((ratio - 1.2).abs() < 1e-12);
        for r in &seq.truth {
            assert!(r.x >= 0.0 && r.y >= 0.0 && r.right() <= 160.0 && r.bottom() <= 120.0);
        }
    }

    #[test]
    fn occluder_hides_the_target() {
        let spec = SyntheticSpec::default();
        let seq = generate(&spec);
        let (a, _) = spec.occlusion.unwrap();
        let r = seq.truth[a];
        let f = &seq.frames[a];
        for y in r.y.ceil() as usize..r.bottom().floor() as usize {
            for x in r.x.ceil() as usize..r.right().floor() as usize {
                assert_eq!(f.get(x, y, 0), 0.5);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec { frames: 3, ..Default::default() };
        assert_eq!(generate(&spec).frames, generate(&spec).frames);
    }
}
