use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle, top-left convention, in whatever pixel grid the
/// caller works in (frame, patch or heat-map coordinates).
///
/// Pixel `(i, j)` of a grid covers the unit cell `[j, j+1) x [i, i+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Rect { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Maps this rectangle from the coordinate system of `from` (a window in
    /// the parent grid) into a grid of `grid_w x grid_h` cells covering that
    /// window.
    pub fn to_grid(&self, from: &Rect, grid_w: usize, grid_h: usize) -> Rect {
        let sx = grid_w as f64 / from.w;
        let sy = grid_h as f64 / from.h;
        Rect {
            x: (self.x - from.x) * sx,
            y: (self.y - from.y) * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }
}
