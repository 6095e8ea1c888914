//! Box representations shared by every stage of the pipeline.
//!
//! A person box moves through three representations:
//!
//! - [`PixelBox`]: corner coordinates in the source image, origin top-left, y down.
//! - [`NormalizedBox`]: the standing point (bottom-center of the box) and the box size,
//!   all relative to the side of the image after it has been padded to a square
//!   ([`SquareFrame`]).
//! - [`GridCell`]: a class index on an `n × n` grid over the unit square, used both for the
//!   standing point and for the `(w, h)` size pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of the discretization grid used for both location and size classes.
pub const GRID_SIZE: usize = 15;

/// Tolerance applied when checking that normalized coordinates lie in `[0, 1]`.
pub const CLAMP_TOLERANCE: f64 = 1e-6;

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PixelBox {
    /// Builds a box, rejecting empty, inverted, negative or non-finite coordinates.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = PixelBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from a COCO-style `[x, y, width, height]` quadruple.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("non-finite box {self:?}")));
        }
        if coords.iter().any(|&c| c < 0.0) {
            return Err(Error::invalid(format!("negative box coordinate {self:?}")));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("empty box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// `[x_min, y_min, width, height]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    /// Box of the given size centered on `(cx, cy)`. Coordinates may be negative.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        PixelBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        PixelBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    /// Smallest distance from the box to any of the four image edges.
    pub fn edge_distance(&self, width: f64, height: f64) -> f64 {
        self.x_min
            .min(self.y_min)
            .min(width - self.x_max)
            .min(height - self.y_max)
    }
}

/// Placement of an image inside its padded square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareFrame {
    pub side: u32,
    pub offset_x: u32,
    pub offset_y: u32,
    pub width: u32,
    pub height: u32,
}

/// Pads a `width × height` image to the smallest enclosing square.
///
/// The padding is split evenly between the two sides of the short dimension; an odd extra
/// pixel goes to the right (or bottom) side.
pub fn pad_to_square(width: u32, height: u32) -> Result<SquareFrame> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    let side = width.max(height);
    Ok(SquareFrame {
        side,
        offset_x: (side - width) / 2,
        offset_y: (side - height) / 2,
        width,
        height,
    })
}

impl SquareFrame {
    pub fn side_f64(&self) -> f64 {
        f64::from(self.side)
    }
}

/// Box in standing-point form, relative to the square frame side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x_stand: f64,
    pub y_stand: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedBox {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (-CLAMP_TOLERANCE..=1.0 + CLAMP_TOLERANCE).contains(&v);
        let positive = |v: f64| v > 0.0 && v <= 1.0 + CLAMP_TOLERANCE;
        if !(in_unit(self.x_stand) && in_unit(self.y_stand) && positive(self.w) && positive(self.h))
        {
            return Err(Error::invalid(format!("normalized box out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Maps a pixel box into standing-point coordinates of its square frame.
pub fn normalize_box(b: &PixelBox, frame: &SquareFrame) -> NormalizedBox {
    let s = frame.side_f64();
    let dx = f64::from(frame.offset_x);
    let dy = f64::from(frame.offset_y);
    let (x_min, x_max, y_max) = (b.x_min + dx, b.x_max + dx, b.y_max + dy);
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    NormalizedBox {
        x_stand: clamp((x_min + x_max) / (2.0 * s)),
        y_stand: clamp(y_max / s),
        w: clamp(b.width() / s),
        h: clamp(b.height() / s),
    }
}

/// Inverse of [`normalize_box`]. The result is in original image coordinates and may extend
/// past the image when the standing point sits in the padding.
pub fn denormalize_box(n: &NormalizedBox, frame: &SquareFrame) -> PixelBox {
    let s = frame.side_f64();
    let cx = n.x_stand * s - f64::from(frame.offset_x);
    let y_max = n.y_stand * s - f64::from(frame.offset_y);
    let w = n.w * s;
    let h = n.h * s;
    PixelBox {
        x_min: cx - 0.5 * w,
        y_min: y_max - h,
        x_max: cx + 0.5 * w,
        y_max,
    }
}

/// A class on an `n × n` grid, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub col: usize,
    pub row: usize,
    pub index: usize,
}

/// Codec between the unit square and grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub size: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { size: GRID_SIZE }
    }
}

impl Grid {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("grid size must be positive"));
        }
        Ok(Grid { size })
    }

    pub fn classes(&self) -> usize {
        self.size * self.size
    }

    pub fn encode(&self, u: f64, v: f64) -> Result<GridCell> {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "grid coordinates must lie in [0, 1], got ({u}, {v})"
            )));
        }
        let n = self.size;
        let bin = |t: f64| ((t * n as f64).floor() as usize).min(n - 1);
        Ok(self.cell(bin(u), bin(v)))
    }

    /// Cell at `(col, row)`. Panics if either coordinate is off the grid.
    pub fn cell(&self, col: usize, row: usize) -> GridCell {
        assert!(col < self.size && row < self.size, "cell ({col}, {row}) off grid");
        GridCell {
            col,
            row,
            index: row * self.size + col,
        }
    }

    pub fn from_index(&self, index: usize) -> Result<GridCell> {
        if index >= self.classes() {
            return Err(Error::invalid(format!(
                "cell index {index} out of range for {n}x{n} grid",
                n = self.size
            )));
        }
        Ok(self.cell(index % self.size, index / self.size))
    }

    /// Center of the cell in unit coordinates.
    pub fn decode(&self, cell: GridCell) -> (f64, f64) {
        let n = self.size as f64;
        ((cell.col as f64 + 0.5) / n, (cell.row as f64 + 0.5) / n)
    }
}

/// [`Grid::encode`] on the standard 15 × 15 grid.
pub fn encode_cell(u: f64, v: f64) -> Result<GridCell> {
    Grid::default().encode(u, v)
}

/// [`Grid::decode`] on the standard 15 × 15 grid.
pub fn decode_cell(cell: GridCell) -> (f64, f64) {
    Grid::default().decode(cell)
}

/// Intersection over union of two boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two boxes of the given `(w, h)` sizes after aligning their centers.
pub fn center_aligned_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    let ok = |(w, h): (f64, f64)| w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite();
    if !ok(a) || !ok(b) {
        return Err(Error::invalid(format!(
            "box sizes must be positive, got {a:?} and {b:?}"
        )));
    }
    let inter = a.0.min(b.0) * a.1.min(b.1);
    Ok(inter / (a.0 * a.1 + b.0 * b.1 - inter))
}
