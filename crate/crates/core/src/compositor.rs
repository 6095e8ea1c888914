//! Placing person segments into a background and blending them with a feathered matte.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::imaging::{round_u8, squared_distance_transform};

/// Smallest and largest accepted segment scale factors.
pub const SCALE_RANGE: (f64, f64) = (0.05, 20.0);

/// Default matte feather radius, in composite pixels.
pub const DEFAULT_FEATHER_RADIUS: f64 = 3.0;

/// A person cutout: RGB pixels, a binary mask of the same size, and the box (in cutout
/// coordinates) whose height and center drive placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: u64,
    pub image: RgbImage,
    pub mask: Vec<bool>,
    pub bbox: PixelBox,
}

impl Segment {
    /// Segment whose box is the whole cutout.
    pub fn new(id: u64, image: RgbImage, mask: Vec<bool>) -> Result<Self> {
        let (w, h) = image.dimensions();
        if mask.len() != (w * h) as usize {
            return Err(Error::invalid(format!(
                "mask has {} pixels, cutout is {w}x{h}",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid(format!("segment {id} has an empty mask")));
        }
        Ok(Segment {
            id,
            image,
            mask,
            bbox: PixelBox::new(0.0, 0.0, f64::from(w), f64::from(h))?,
        })
    }
}

/// Resolves segment ids to cutouts.
pub trait SegmentSource: Sync {
    fn segment(&self, id: u64) -> Result<Arc<Segment>>;
}

impl SegmentSource for HashMap<u64, Arc<Segment>> {
    fn segment(&self, id: u64) -> Result<Arc<Segment>> {
        self.get(&id).cloned().ok_or(Error::UnknownSegment(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub segment_id: u64,
    /// Target box in background pixels.
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSpec {
    pub background: RgbImage,
    /// Paint order: later placements cover earlier ones.
    pub placements: Vec<Placement>,
    pub feather_radius: f64,
}

impl CompositeSpec {
    pub fn new(background: RgbImage) -> Self {
        CompositeSpec {
            background,
            placements: Vec::new(),
            feather_radius: DEFAULT_FEATHER_RADIUS,
        }
    }
}

/// One record per placed segment, sufficient to re-render a composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub segment_id: u64,
    /// `[x, y, w, h]` of the target box.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub scale: f64,
}

/// How a segment maps into the background: `background = (cutout − source_center)·scale +
/// target_center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedSegment {
    pub scale: f64,
    pub source_center: (f64, f64),
    pub target_center: (f64, f64),
    /// Extent of the whole scaled cutout in background pixels.
    pub extent: PixelBox,
}

impl PlacedSegment {
    pub fn scaled_size(&self) -> (f64, f64) {
        (self.extent.width(), self.extent.height())
    }
}

/// Uniform scale matching the segment box height to the target height, centered on the
/// target center. The target width is ignored so the cutout keeps its aspect ratio.
pub fn place_segment(segment: &Segment, target: &PixelBox) -> Result<PlacedSegment> {
    target.validate()?;
    let scale = target.height() / segment.bbox.height();
    if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&scale) {
        return Err(Error::DegenerateScale(scale));
    }
    let source_center = segment.bbox.center();
    let target_center = target.center();
    let (w, h) = segment.image.dimensions();
    let map = |u: f64, v: f64| {
        (
            (u - source_center.0) * scale + target_center.0,
            (v - source_center.1) * scale + target_center.1,
        )
    };
    let (x0, y0) = map(0.0, 0.0);
    let (x1, y1) = map(f64::from(w), f64::from(h));
    Ok(PlacedSegment {
        scale,
        source_center,
        target_center,
        extent: PixelBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        },
    })
}

/// Per-pixel opacity over a rectangular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Matte {
    pub width: u32,
    pub height: u32,
    pub alpha: Vec<f32>,
}

/// Soft matte from a binary mask: `α = clamp(0.5 + d / (2·radius), 0, 1)` where `d` is the
/// signed distance of a pixel center to the mask boundary (positive inside). Radius 0 gives
/// the mask itself.
pub fn feather_matte(mask: &[bool], width: u32, height: u32, radius: f64) -> Matte {
    let (w, h) = (width as usize, height as usize);
    assert_eq!(mask.len(), w * h, "mask size");
    if radius <= 0.0 {
        return Matte {
            width,
            height,
            alpha: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        };
    }
    let outside: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let to_outside = squared_distance_transform(&outside, w, h);
    let to_inside = squared_distance_transform(mask, w, h);
    let alpha = mask
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            // without any outside pixel in the grid the boundary is at infinity
            let d = if m {
                to_outside[i].sqrt() - 0.5
            } else {
                -(to_inside[i].sqrt() - 0.5)
            };
            (0.5 + d / (2.0 * radius)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Matte {
        width,
        height,
        alpha,
    }
}

/// A scaled segment ready to blend: foreground colors and matte on a grid whose top-left
/// pixel sits at `offset` in the background.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub foreground: RgbImage,
    pub matte: Matte,
    pub offset: (i64, i64),
    pub placed: PlacedSegment,
}

/// Resamples the cutout into background pixels with premultiplied bilinear interpolation,
/// thresholds the resampled coverage at 0.5, and feathers the result.
pub fn render_layer(segment: &Segment, target: &PixelBox, feather_radius: f64) -> Result<Layer> {
    let placed = place_segment(segment, target)?;
    let margin = feather_radius.max(0.0).ceil() as i64 + 1;
    let ox = placed.extent.x_min.floor() as i64 - margin;
    let oy = placed.extent.y_min.floor() as i64 - margin;
    let lw = (placed.extent.x_max.ceil() as i64 + margin - ox) as usize;
    let lh = (placed.extent.y_max.ceil() as i64 + margin - oy) as usize;
    let (sw, sh) = (segment.image.width() as i64, segment.image.height() as i64);

    let mut color = vec![[0f64; 3]; lw * lh];
    let mut known = vec![false; lw * lh];
    let mut mask = vec![false; lw * lh];
    for j in 0..lh {
        let y = (oy + j as i64) as f64 + 0.5;
        let v = (y - placed.target_center.1) / placed.scale + placed.source_center.1 - 0.5;
        let v0 = v.floor() as i64;
        let tv = v - v0 as f64;
        for i in 0..lw {
            let x = (ox + i as i64) as f64 + 0.5;
            let u = (x - placed.target_center.0) / placed.scale + placed.source_center.0 - 0.5;
            let u0 = u.floor() as i64;
            let tu = u - u0 as f64;
            let mut premult = [0f64; 3];
            let mut cover = 0f64;
            for (dy, wy) in [(0, 1.0 - tv), (1, tv)] {
                for (dx, wx) in [(0, 1.0 - tu), (1, tu)] {
                    let (sx, sy) = (u0 + dx, v0 + dy);
                    let wgt = wx * wy;
                    if wgt == 0.0 || sx < 0 || sy < 0 || sx >= sw || sy >= sh {
                        continue;
                    }
                    let si = (sy * sw + sx) as usize;
                    if !segment.mask[si] {
                        continue;
                    }
                    let p = segment.image.get_pixel(sx as u32, sy as u32).0;
                    for c in 0..3 {
                        premult[c] += wgt * f64::from(p[c]);
                    }
                    cover += wgt;
                }
            }
            let k = j * lw + i;
            if cover > 0.0 {
                color[k] = premult.map(|c| c / cover);
                known[k] = true;
            }
            mask[k] = cover >= 0.5;
        }
    }
    extend_colors(&mut color, &mut known, lw, lh);
    let foreground = RgbImage::from_fn(lw as u32, lh as u32, |x, y| {
        let c = color[y as usize * lw + x as usize];
        Rgb(c.map(|v| round_u8(v as f32)))
    });
    let matte = feather_matte(&mask, lw as u32, lh as u32, feather_radius);
    Ok(Layer {
        foreground,
        matte,
        offset: (ox, oy),
        placed,
    })
}

/// Gives pixels without a color the color of a nearest colored pixel (breadth-first, in
/// 4-neighbour steps), so feathered edges outside the mask have a foreground to blend.
fn extend_colors(color: &mut [[f64; 3]], known: &mut [bool], w: usize, h: usize) {
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| known[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let neighbours = [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ];
        for n in neighbours.into_iter().flatten() {
            if !known[n] {
                known[n] = true;
                color[n] = color[i];
                queue.push_back(n);
            }
        }
    }
}

/// `out = α·fg + (1−α)·bg` per pixel, rounded half up; pixels with `α = 0` and pixels of
/// the layer outside the background are left alone.
pub fn blend(background: &mut RgbImage, foreground: &RgbImage, matte: &Matte, offset: (i64, i64)) {
    assert_eq!(foreground.dimensions(), (matte.width, matte.height));
    let (bw, bh) = (background.width() as i64, background.height() as i64);
    for j in 0..matte.height as i64 {
        let y = offset.1 + j;
        if y < 0 || y >= bh {
            continue;
        }
        for i in 0..matte.width as i64 {
            let x = offset.0 + i;
            if x < 0 || x >= bw {
                continue;
            }
            let a = matte.alpha[(j * matte.width as i64 + i) as usize];
            if a <= 0.0 {
                continue;
            }
            let fg = foreground.get_pixel(i as u32, j as u32).0;
            let bg = background.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                bg.0[c] = round_u8(a * f32::from(fg[c]) + (1.0 - a) * f32::from(bg.0[c]));
            }
        }
    }
}

/// A rendered composite with the combined opacity of all placed segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: RgbImage,
    pub provenance: Vec<ProvenanceEntry>,
    /// `1 − Π(1 − αᵢ)` over all layers, row-major at background size.
    pub alpha: Vec<f32>,
}

fn layers(spec: &CompositeSpec, source: &dyn SegmentSource) -> Result<Vec<(Placement, Layer)>> {
    spec.placements
        .iter()
        .map(|p| {
            let seg = source.segment(p.segment_id)?;
            Ok((*p, render_layer(&seg, &p.bbox, spec.feather_radius)?))
        })
        .collect()
}

fn combined_alpha(spec: &CompositeSpec, layers: &[(Placement, Layer)]) -> Vec<f32> {
    let (bw, bh) = spec.background.dimensions();
    let mut clear = vec![1f32; (bw * bh) as usize];
    for (_, l) in layers {
        for j in 0..l.matte.height as i64 {
            let y = l.offset.1 + j;
            if y < 0 || y >= i64::from(bh) {
                continue;
            }
            for i in 0..l.matte.width as i64 {
                let x = l.offset.0 + i;
                if x < 0 || x >= i64::from(bw) {
                    continue;
                }
                let a = l.matte.alpha[(j * l.matte.width as i64 + i) as usize];
                clear[(y * i64::from(bw) + x) as usize] *= 1.0 - a;
            }
        }
    }
    clear.into_iter().map(|c| 1.0 - c).collect()
}

fn provenance(layers: &[(Placement, Layer)]) -> Vec<ProvenanceEntry> {
    layers
        .iter()
        .map(|(p, l)| ProvenanceEntry {
            segment_id: p.segment_id,
            bbox: p.bbox.to_xywh(),
            scale: l.placed.scale,
        })
        .collect()
}

/// Renders every placement in order over the background.
pub fn compose(spec: &CompositeSpec, source: &dyn SegmentSource) -> Result<Composite> {
    let layers = layers(spec, source)?;
    let mut image = spec.background.clone();
    for (_, l) in &layers {
        blend(&mut image, &l.foreground, &l.matte, l.offset);
    }
    Ok(Composite {
        alpha: combined_alpha(spec, &layers),
        provenance: provenance(&layers),
        image,
    })
}

/// The composite's geometry alone: white wherever the combined opacity exceeds 0.5, the
/// background elsewhere.
pub fn render_silhouette(spec: &CompositeSpec, source: &dyn SegmentSource) -> Result<Composite> {
    let layers = layers(spec, source)?;
    let alpha = combined_alpha(spec, &layers);
    let mut image = spec.background.clone();
    for (p, &a) in image.pixels_mut().zip(&alpha) {
        if a > 0.5 {
            *p = Rgb([255, 255, 255]);
        }
    }
    Ok(Composite {
        image,
        provenance: provenance(&layers),
        alpha,
    })
}

/// Rebuilds a spec from a provenance record.
pub fn spec_from_provenance(
    background: RgbImage,
    entries: &[ProvenanceEntry],
    feather_radius: f64,
) -> Result<CompositeSpec> {
    let placements = entries
        .iter()
        .map(|e| {
            let [x, y, w, h] = e.bbox;
            Ok(Placement {
                segment_id: e.segment_id,
                bbox: PixelBox::from_xywh(x, y, w, h)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CompositeSpec {
        background,
        placements,
        feather_radius,
    })
}
