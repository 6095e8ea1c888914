//! COCO-format annotation ingestion and mask decoding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelBox;

/// COCO category id of "person".
pub const PERSON_CATEGORY: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default)]
    pub segmentation: Option<Segmentation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: RleCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u64>),
    Compressed(String),
}

/// One annotated object.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: u64,
    pub category: u32,
    pub bbox: PixelBox,
    pub crowd: bool,
    pub segmentation: Option<Segmentation>,
}

/// All annotations of one image.
#[derive(Debug, Clone)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<Instance>,
}

impl Instance {
    /// Rasterizes the instance mask at image resolution (row-major).
    ///
    /// Instances without a segmentation fall back to their filled box.
    pub fn decode_mask(&self, width: u32, height: u32) -> Result<Vec<bool>> {
        match &self.segmentation {
            Some(Segmentation::Polygons(polys)) => Ok(rasterize_polygons(polys, width, height)),
            Some(Segmentation::Rle(rle)) => decode_rle(rle, width, height),
            None => Ok(fill_box(&self.bbox, width, height)),
        }
    }
}

/// Pixels whose centers fall inside `b`.
pub fn fill_box(b: &PixelBox, width: u32, height: u32) -> Vec<bool> {
    let (w, h) = (width as usize, height as usize);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        let cy = y as f64 + 0.5;
        if cy < b.y_min || cy >= b.y_max {
            continue;
        }
        for x in 0..w {
            let cx = x as f64 + 0.5;
            if cx >= b.x_min && cx < b.x_max {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

/// Even-odd fill of pixel centers, unioned across polygons.
pub fn rasterize_polygons(polys: &[Vec<f64>], width: u32, height: u32) -> Vec<bool> {
    let (w, h) = (width as usize, height as usize);
    let mut mask = vec![false; w * h];
    let mut crossings = Vec::new();
    for poly in polys {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..h {
            let cy = y as f64 + 0.5;
            crossings.clear();
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                if (y0 <= cy) != (y1 <= cy) {
                    crossings.push(x0 + (cy - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            for span in crossings.chunks_exact(2) {
                let start = (span[0] - 0.5).ceil().max(0.0) as usize;
                let end = ((span[1] - 0.5).ceil().max(0.0) as usize).min(w);
                for x in start..end {
                    mask[y * w + x] = true;
                }
            }
        }
    }
    mask
}

/// Decodes the COCO compressed-string form of RLE counts.
pub fn decode_rle_string(s: &str) -> Result<Vec<u64>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = i64::from(bytes[p]) - 48;
            if !(0..64).contains(&c) {
                return Err(Error::format("RLE string", format!("bad byte {}", bytes[p])));
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            let more = c & 0x20 != 0;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if p >= bytes.len() {
                return Err(Error::format("RLE string", "truncated run"));
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u64::try_from(c).map_err(|_| Error::format("RLE string", "negative run")))
        .collect()
}

/// Decodes column-major run lengths (alternating background/foreground, starting with
/// background) into a row-major mask.
pub fn decode_rle(rle: &Rle, width: u32, height: u32) -> Result<Vec<bool>> {
    let [h, w] = rle.size;
    if (h, w) != (height, width) {
        return Err(Error::format(
            "RLE",
            format!("size {w}x{h} does not match image {width}x{height}"),
        ));
    }
    let counts = match &rle.counts {
        RleCounts::Raw(c) => c.clone(),
        RleCounts::Compressed(s) => decode_rle_string(s)?,
    };
    let (w, h) = (w as usize, h as usize);
    let total = w * h;
    let mut mask = vec![false; total];
    let mut pos = 0usize;
    for (i, &run) in counts.iter().enumerate() {
        let run = run as usize;
        if pos + run > total {
            return Err(Error::format("RLE", "runs exceed image size"));
        }
        if i % 2 == 1 {
            for k in pos..pos + run {
                // column-major index k -> (x = k / h, y = k % h)
                mask[(k % h) * w + k / h] = true;
            }
        }
        pos += run;
    }
    Ok(mask)
}

/// Parses a COCO annotation file into per-image records, sorted by image id.
///
/// Annotations with zero-area boxes or unknown image ids are dropped with a warning.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile = serde_json::from_str(&text)?;
    Ok(records_from_coco(file))
}

pub fn records_from_coco(file: CocoFile) -> Vec<AnnotationRecord> {
    let mut by_id: BTreeMap<u64, AnnotationRecord> = file
        .images
        .into_iter()
        .map(|img| {
            (
                img.id,
                AnnotationRecord {
                    image_id: img.id,
                    file_name: img.file_name,
                    width: img.width,
                    height: img.height,
                    instances: Vec::new(),
                },
            )
        })
        .collect();
    for ann in file.annotations {
        let Some(rec) = by_id.get_mut(&ann.image_id) else {
            log::warn!("annotation {} references unknown image {}", ann.id, ann.image_id);
            continue;
        };
        let [x, y, w, h] = ann.bbox;
        let bbox = match PixelBox::from_xywh(x, y, w, h) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("dropping annotation {}: {e}", ann.id);
                continue;
            }
        };
        rec.instances.push(Instance {
            id: ann.id,
            category: ann.category_id,
            bbox,
            crowd: ann.iscrowd != 0,
            segmentation: ann.segmentation,
        });
    }
    let mut records: Vec<_> = by_id.into_values().collect();
    for r in &mut records {
        r.instances.sort_by_key(|i| i.id);
    }
    records
}
