use crate::error::{DntError, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor3;

/// A decoded RGB video frame, values in `[0, 1]`, interleaved `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(DntError::Shape(format!(
                "frame {width}x{height} needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Frame { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Frame { width, height, pixels }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    #[inline]
    fn get_or_zero(&self, x: isize, y: isize, c: usize) -> f64 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0.0
        } else {
            self.get(x as usize, y as usize, c)
        }
    }

    /// Crops `rect` (frame pixels, may leave the frame) and resamples it to
    /// `out_w x out_h` bilinearly. Samples outside the frame read as zero.
    pub fn crop(&self, rect: Rect, out_w: usize, out_h: usize, frame_index: usize) -> Result<ImagePatch> {
        if out_w == 0 || out_h == 0 || !(rect.w > 0.0 && rect.h > 0.0) || !rect.is_finite() {
            return Err(DntError::InvalidArgument(format!("cannot crop {rect:?} to {out_w}x{out_h}")));
        }
        let sx = rect.w / out_w as f64;
        let sy = rect.h / out_h as f64;
        let mut pixels = vec![0.0; out_w * out_h * 3];
        for i in 0..out_h {
            let fy = rect.y + (i as f64 + 0.5) * sy - 0.5;
            let y0 = fy.floor();
            let ty = fy - y0;
            let y0 = y0 as isize;
            for j in 0..out_w {
                let fx = rect.x + (j as f64 + 0.5) * sx - 0.5;
                let x0 = fx.floor();
                let tx = fx - x0;
                let x0 = x0 as isize;
                for c in 0..3 {
                    let mut v = self.get_or_zero(x0, y0, c) * (1.0 - tx) * (1.0 - ty);
                    if tx > 0.0 {
                        v += self.get_or_zero(x0 + 1, y0, c) * tx * (1.0 - ty);
                    }
                    if ty > 0.0 {
                        v += self.get_or_zero(x0, y0 + 1, c) * (1.0 - tx) * ty;
                        if tx > 0.0 {
                            v += self.get_or_zero(x0 + 1, y0 + 1, c) * tx * ty;
                        }
                    }
                    pixels[(i * out_w + j) * 3 + c] = v;
                }
            }
        }
        Ok(ImagePatch { width: out_w, height: out_h, pixels, source_rect: rect, frame_index })
    }
}

/// A resampled crop of a frame together with the frame window it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub width: usize,
    pub height: usize,
    /// Interleaved `H x W x 3`, nominally in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub source_rect: Rect,
    pub frame_index: usize,
}

impl ImagePatch {
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(DntError::Shape(format!("patch {width}x{height} with {} values", pixels.len())));
        }
        Ok(ImagePatch {
            width,
            height,
            pixels,
            source_rect: Rect::new(0.0, 0.0, width as f64, height as f64),
            frame_index: 0,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.pixels.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DntError::NonFinite("image patch"))
        }
    }

    /// ITU-R BT.601 luma, row-major `H x W`.
    pub fn grayscale(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Channel-major tensor `(pixel * scale - mean[c])`, the backbone input.
    pub fn to_tensor(&self, scale: f64, mean: [f64; 3]) -> Tensor3 {
        let mut t = Tensor3::zeros(3, self.height, self.width);
        let plane = self.width * self.height;
        for (idx, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                t.data[c * plane + idx] = px[c] * scale - mean[c];
            }
        }
        t
    }

    /// Resamples the patch content to a new pixel size over the same source
    /// window.
    pub fn resized(&self, out_w: usize, out_h: usize) -> ImagePatch {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let as_frame = Frame { width: self.width, height: self.height, pixels: self.pixels.clone() };
        let mut p = as_frame
            .crop(Rect::new(0.0, 0.0, self.width as f64, self.height as f64), out_w, out_h, self.frame_index)
            .expect("positive patch size");
        p.source_rect = self.source_rect;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_frame(w: usize, h: usize) -> Frame {
        let mut f = Frame::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let v = (y * w + x) as f64 / (w * h) as f64;
                f.set(x, y, [v, 1.0 - v, 0.5 * v]);
            }
        }
        f
    }

    #[test]
    fn unit_scale_crop_copies_pixels() {
        let f = ramp_frame(40, 30);
        let p = f.crop(Rect::new(5.0, 7.0, 10.0, 8.0), 10, 8, 0).unwrap();
        for i in 0..8 {
            for j in 0..10 {
                for c in 0..3 {
                    assert_eq!(p.pixels[(i * 10 + j) * 3 + c], f.get(j + 5, i + 7, c));
                }
            }
        }
    }

    #[test]
    fn out_of_frame_region_is_zero() {
        let f = Frame::filled(10, 10, [1.0, 1.0, 1.0]);
        let p = f.crop(Rect::new(-5.0, 0.0, 10.0, 10.0), 10, 10, 0).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let expect = if j < 5 { 0.0 } else { 1.0 };
                assert_eq!(p.pixels[(i * 10 + j) * 3], expect);
            }
        }
    }

    #[test]
    fn degenerate_crop_rejected() {
        let f = Frame::filled(10, 10, [1.0; 3]);
        assert!(f.crop(Rect::new(0.0, 0.0, 0.0, 4.0), 4, 4, 0).is_err());
    }
}
