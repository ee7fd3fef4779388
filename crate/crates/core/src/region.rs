//! Axis-aligned pixel boxes and the coordinate frame they live in.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Coordinate frame of a [`Region`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Frame {
    /// Pixel coordinates of the original source image.
    Original,
    /// Pixel coordinates of a sub-image cut from `parent_image_id` at
    /// (`offset_x`, `offset_y`) and resized by `scale`.
    Crop {
        parent_image_id: String,
        offset_x: u32,
        offset_y: u32,
        scale: f64,
    },
}

impl Frame {
    pub fn is_original(&self) -> bool {
        matches!(self, Frame::Original)
    }
}

/// An axis-aligned box: top-left corner plus width and height, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("region ({x},{y},{w},{h}) invalid for {frame_w}x{frame_h} frame")]
pub struct RegionBoundsError {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub frame_w: u32,
    pub frame_h: u32,
}

impl Region {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self {
            x,
            y,
            w,
            h,
            frame: Frame::Original,
        }
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn intersection_area(&self, other: &Region) -> u64 {
        let left = self.x.max(other.x) as u64;
        let top = self.y.max(other.y) as u64;
        let right = self.right().min(other.right());
        let bottom = self.bottom().min(other.bottom());
        if right <= left || bottom <= top {
            0
        } else {
            (right - left) * (bottom - top)
        }
    }

    pub fn union_area(&self, other: &Region) -> u64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    /// Tight bounding box of both regions, in `self`'s frame.
    pub fn bounding_union(&self, other: &Region) -> Region {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        let right = self.right().max(other.right());
        let bottom = self.bottom().max(other.bottom());
        Region {
            x,
            y,
            w: (right - x as u64) as u32,
            h: (bottom - y as u64) as u32,
            frame: self.frame.clone(),
        }
    }

    pub fn contains(&self, other: &Region) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn fits(&self, frame_w: u32, frame_h: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.right() <= frame_w as u64
            && self.bottom() <= frame_h as u64
    }

    pub fn check_bounds(&self, frame_w: u32, frame_h: u32) -> Result<(), RegionBoundsError> {
        if self.fits(frame_w, frame_h) {
            Ok(())
        } else {
            Err(RegionBoundsError {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                frame_w,
                frame_h,
            })
        }
    }

    /// Box from signed/float corner coordinates, clamped to the frame.
    /// Returns `None` when nothing of at least one pixel remains.
    pub fn from_corners_clamped(
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        frame_w: u32,
        frame_h: u32,
    ) -> Option<Region> {
        let cx0 = x0.round().clamp(0.0, frame_w as f64) as u32;
        let cy0 = y0.round().clamp(0.0, frame_h as f64) as u32;
        let cx1 = x1.round().clamp(0.0, frame_w as f64) as u32;
        let cy1 = y1.round().clamp(0.0, frame_h as f64) as u32;
        if cx1 <= cx0 || cy1 <= cy0 {
            return None;
        }
        Some(Region::new(cx0, cy0, cx1 - cx0, cy1 - cy0))
    }

    /// Grows the box by `pad` pixels on every side, clamped to the frame.
    pub fn padded(&self, pad: u32, frame_w: u32, frame_h: u32) -> Region {
        let x = self.x.saturating_sub(pad);
        let y = self.y.saturating_sub(pad);
        let right = (self.right() + pad as u64).min(frame_w as u64);
        let bottom = (self.bottom() + pad as u64).min(frame_h as u64);
        Region {
            x,
            y,
            w: (right - x as u64) as u32,
            h: (bottom - y as u64) as u32,
            frame: self.frame.clone(),
        }
    }

    /// Sort key used for deterministic output ordering.
    pub fn sort_key(&self) -> (u32, u32, u32, u32) {
        (self.y, self.x, self.h, self.w)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}x{})", self.x, self.y, self.w, self.h)
    }
}

/// Jaccard index of two boxes: intersection area over union area.
///
/// Areas are computed exactly in integer arithmetic; the only rounding is
/// the final division. Disjoint boxes give 0.
pub fn iou(a: &Region, b: &Region) -> f64 {
    let union = a.union_area(b);
    if union == 0 {
        return 0.0;
    }
    a.intersection_area(b) as f64 / union as f64
}
