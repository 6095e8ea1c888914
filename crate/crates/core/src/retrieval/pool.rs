use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{
    concat_descriptor, extract_global, extract_local, l2_normalize, FeatureExtractor,
};
use super::kdtree::{KdTree, Neighbor};
use crate::compositor::{Segment, SegmentSource};
use crate::error::{Error, Result};
use crate::geometry::{center_aligned_iou, pad_to_square, PixelBox, SquareFrame};
use crate::pipeline::{filter_instances, AnnotationRecord, FilterConfig, PERSON_CATEGORY};

/// Candidates whose center-aligned size IoU with the query is below this are excluded.
pub const DEFAULT_SIZE_THRESHOLD: f64 = 0.4;

/// Number of candidates offered per box in the interactive editor.
pub const UI_CANDIDATES: usize = 9;

/// Pixels added around the tight mask bounds when cutting out a segment.
pub const DEFAULT_MARGIN: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: u64,
    pub image_id: u64,
    pub instance_id: u64,
    /// Source image file name.
    pub source: String,
    /// Cutout region in source pixels: the tight mask bounds plus the margin, clipped.
    pub bbox: PixelBox,
    /// Square frame of the source image, used to compare sizes across resolutions.
    pub frame: SquareFrame,
    pub dataset: String,
    pub license: String,
}

impl SegmentRecord {
    /// `(w, h)` of the box relative to the source's square frame side.
    pub fn normalized_size(&self) -> (f64, f64) {
        let s = self.frame.side_f64();
        (self.bbox.width() / s, self.bbox.height() / s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolParams {
    pub extractor: String,
    /// Dimensionality of each descriptor half.
    pub dims: usize,
    pub size_threshold: f64,
    pub category: u32,
    pub filter: FilterConfig,
    pub margin: u32,
}

impl PoolParams {
    pub fn for_extractor(extractor: &dyn FeatureExtractor) -> Self {
        PoolParams {
            extractor: extractor.id().to_string(),
            dims: extractor.dims(),
            size_threshold: DEFAULT_SIZE_THRESHOLD,
            category: PERSON_CATEGORY,
            filter: FilterConfig::default(),
            margin: DEFAULT_MARGIN,
        }
    }
}

/// Everything stored for one candidate.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub record: SegmentRecord,
    pub segment: Segment,
    /// `[global ‖ local]`, unit norm.
    pub descriptor: Vec<f32>,
}

/// Tight bounds of the set pixels of a mask, as a half-open pixel box.
pub fn mask_bounds(mask: &[bool], width: u32) -> Option<PixelBox> {
    let w = width as usize;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x0 != usize::MAX).then(|| PixelBox {
        x_min: x0 as f64,
        y_min: y0 as f64,
        x_max: x1 as f64,
        y_max: y1 as f64,
    })
}

/// Cuts a segment out of `image` and describes it. `global` is the descriptor of the whole
/// source image.
#[allow(clippy::too_many_arguments)]
pub fn make_entry(
    id: u64,
    image_id: u64,
    instance_id: u64,
    source: &str,
    image: &RgbImage,
    mask: &[bool],
    global: &[f32],
    extractor: &dyn FeatureExtractor,
    margin: u32,
) -> Result<PoolEntry> {
    let (w, h) = image.dimensions();
    let tight = mask_bounds(mask, w).ok_or_else(|| Error::invalid("empty mask"))?;
    let m = f64::from(margin);
    let crop = PixelBox {
        x_min: (tight.x_min - m).max(0.0),
        y_min: (tight.y_min - m).max(0.0),
        x_max: (tight.x_max + m).min(f64::from(w)),
        y_max: (tight.y_max + m).min(f64::from(h)),
    };
    let (cx, cy) = (crop.x_min as u32, crop.y_min as u32);
    let (cw, ch) = (crop.width() as u32, crop.height() as u32);
    let pixels = image::imageops::crop_imm(image, cx, cy, cw, ch).to_image();
    let mut cut_mask = Vec::with_capacity((cw * ch) as usize);
    for y in cy..cy + ch {
        for x in cx..cx + cw {
            cut_mask.push(mask[(y * w + x) as usize]);
        }
    }
    let mut segment = Segment::new(id, pixels, cut_mask)?;
    segment.bbox = PixelBox {
        x_min: tight.x_min - crop.x_min,
        y_min: tight.y_min - crop.y_min,
        x_max: tight.x_max - crop.x_min,
        y_max: tight.y_max - crop.y_min,
    };
    let local = extract_local(image, &crop, extractor)?;
    Ok(PoolEntry {
        record: SegmentRecord {
            id,
            image_id,
            instance_id,
            source: source.to_string(),
            bbox: crop,
            frame: pad_to_square(w, h)?,
            dataset: String::new(),
            license: String::new(),
        },
        segment,
        descriptor: concat_descriptor(global, &local),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub distance: f64,
}

impl From<Neighbor> for Hit {
    fn from(n: Neighbor) -> Self {
        Hit {
            id: n.id,
            distance: n.distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryOutcome {
    /// Survivors of the size filter, nearest first.
    Hits(Vec<Hit>),
    /// The size filter rejected every candidate; the caller may relax it.
    AllFiltered,
}

impl QueryOutcome {
    pub fn hits(&self) -> &[Hit] {
        match self {
            QueryOutcome::Hits(h) => h,
            QueryOutcome::AllFiltered => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiCandidates {
    pub hits: Vec<Hit>,
    /// How many trailing hits came from the relaxed (unfiltered) search.
    pub padded: usize,
    /// False when the pool holds fewer candidates than requested.
    pub complete: bool,
}

/// An immutable, indexed set of person segments.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    params: PoolParams,
    records: Vec<SegmentRecord>,
    segments: Vec<Arc<Segment>>,
    by_id: HashMap<u64, usize>,
    tree: KdTree,
}

impl CandidatePool {
    pub fn new(params: PoolParams, entries: Vec<PoolEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        let dim = 2 * params.dims;
        let mut by_id = HashMap::new();
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut records = Vec::with_capacity(entries.len());
        let mut segments = Vec::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        for (row, e) in entries.into_iter().enumerate() {
            if e.descriptor.len() != dim {
                return Err(Error::invalid(format!(
                    "segment {} has a {}-dim descriptor, pool expects {dim}",
                    e.record.id,
                    e.descriptor.len()
                )));
            }
            if e.record.id != e.segment.id {
                return Err(Error::invalid(format!(
                    "record {} carries segment {}",
                    e.record.id, e.segment.id
                )));
            }
            if by_id.insert(e.record.id, row).is_some() {
                return Err(Error::invalid(format!("duplicate segment id {}", e.record.id)));
            }
            data.extend_from_slice(&e.descriptor);
            ids.push(e.record.id);
            records.push(e.record);
            segments.push(Arc::new(e.segment));
        }
        Ok(CandidatePool {
            tree: KdTree::build(data, dim, ids),
            params,
            records,
            segments,
            by_id,
        })
    }

    pub fn params(&self) -> &PoolParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SegmentRecord] {
        &self.records
    }

    pub fn record(&self, id: u64) -> Option<&SegmentRecord> {
        self.by_id.get(&id).map(|&r| &self.records[r])
    }

    pub fn descriptor(&self, id: u64) -> Option<&[f32]> {
        self.by_id.get(&id).map(|&r| self.tree.row(r))
    }

    pub fn segments(&self) -> &[Arc<Segment>] {
        &self.segments
    }

    /// Entries in storage order, for saving or rebuilding.
    pub fn entries(&self) -> impl Iterator<Item = (&SegmentRecord, &Segment, &[f32])> {
        self.records
            .iter()
            .enumerate()
            .map(|(r, rec)| (rec, self.segments[r].as_ref(), self.tree.row(r)))
    }

    fn check_extractor(&self, extractor: &dyn FeatureExtractor) -> Result<()> {
        if extractor.id() != self.params.extractor || extractor.dims() != self.params.dims {
            return Err(Error::Config(format!(
                "pool was built with {} ({} dims), query uses {} ({} dims)",
                self.params.extractor,
                self.params.dims,
                extractor.id(),
                extractor.dims()
            )));
        }
        Ok(())
    }

    /// Query descriptor and normalized size for a box in a background image.
    pub fn describe_query(
        &self,
        background: &RgbImage,
        b: &PixelBox,
        extractor: &dyn FeatureExtractor,
    ) -> Result<(Vec<f32>, (f64, f64))> {
        self.check_extractor(extractor)?;
        let global = extract_global(background, extractor)?;
        let local = extract_local(background, b, extractor)?;
        let frame = pad_to_square(background.width(), background.height())?;
        let s = frame.side_f64();
        Ok((concat_descriptor(&global, &local), (b.width() / s, b.height() / s)))
    }

    fn unit_query(&self, descriptor: &[f32]) -> Result<Vec<f32>> {
        if descriptor.len() != self.tree.dim() {
            return Err(Error::invalid(format!(
                "query descriptor has {} dims, pool has {}",
                descriptor.len(),
                self.tree.dim()
            )));
        }
        let mut q = descriptor.to_vec();
        l2_normalize(&mut q)?;
        Ok(q)
    }

    /// Nearest candidates by cosine distance among those passing the size filter at
    /// `threshold`.
    pub fn query_descriptor(
        &self,
        descriptor: &[f32],
        size: (f64, f64),
        k: usize,
        threshold: f64,
    ) -> Result<QueryOutcome> {
        let descriptor = self.unit_query(descriptor)?;
        let passes: Vec<bool> = self
            .records
            .iter()
            .map(|r| size_passes(size, r.normalized_size(), threshold))
            .collect::<Result<_>>()?;
        if !passes.iter().any(|&p| p) {
            return Ok(QueryOutcome::AllFiltered);
        }
        let hits = self.tree.nearest(&descriptor, k, &|r| passes[r]);
        Ok(QueryOutcome::Hits(hits.into_iter().map(Hit::from).collect()))
    }

    pub fn query(
        &self,
        background: &RgbImage,
        b: &PixelBox,
        extractor: &dyn FeatureExtractor,
        k: usize,
    ) -> Result<QueryOutcome> {
        let (d, size) = self.describe_query(background, b, extractor)?;
        self.query_descriptor(&d, size, k, self.params.size_threshold)
    }

    /// The `k` best filtered candidates, padded with the nearest unfiltered ones when
    /// fewer than `k` pass the size filter.
    pub fn candidates_for_descriptor(
        &self,
        descriptor: &[f32],
        size: (f64, f64),
        k: usize,
    ) -> Result<UiCandidates> {
        let mut hits = self
            .query_descriptor(descriptor, size, k, self.params.size_threshold)?
            .hits()
            .to_vec();
        let mut padded = 0;
        if hits.len() < k {
            let relaxed = self.tree.nearest(&self.unit_query(descriptor)?, k, &|_| true);
            for n in relaxed {
                if hits.len() == k {
                    break;
                }
                if !hits.iter().any(|h| h.id == n.id) {
                    hits.push(n.into());
                    padded += 1;
                }
            }
        }
        Ok(UiCandidates {
            complete: hits.len() == k,
            hits,
            padded,
        })
    }

    pub fn top_candidates_for_ui(
        &self,
        background: &RgbImage,
        b: &PixelBox,
        extractor: &dyn FeatureExtractor,
    ) -> Result<UiCandidates> {
        let (d, size) = self.describe_query(background, b, extractor)?;
        self.candidates_for_descriptor(&d, size, UI_CANDIDATES)
    }
}

impl SegmentSource for CandidatePool {
    fn segment(&self, id: u64) -> Result<Arc<Segment>> {
        self.by_id
            .get(&id)
            .map(|&r| self.segments[r].clone())
            .ok_or(Error::UnknownSegment(id))
    }
}

/// Size prefilter: center-aligned IoU of the two `(w, h)` sizes at least `threshold`.
pub fn size_passes(query: (f64, f64), candidate: (f64, f64), threshold: f64) -> Result<bool> {
    Ok(center_aligned_iou(query, candidate)? >= threshold)
}

/// Builds a pool from annotated images: filters instances as for training, cuts out each
/// survivor, and describes it with the global descriptor of its source image and the local
/// descriptor of its context patch. Segment ids are assigned in survivor order from 1.
pub fn build_pool(
    records: &[AnnotationRecord],
    image_dir: &Path,
    extractor: &dyn FeatureExtractor,
    params: PoolParams,
) -> Result<CandidatePool> {
    let survivors = filter_instances(records, params.category, &params.filter);
    let index: HashMap<u64, &AnnotationRecord> = records.iter().map(|r| (r.image_id, r)).collect();
    let mut per_image: Vec<(u64, Vec<(u64, u64)>)> = Vec::new();
    for (n, s) in survivors.iter().enumerate() {
        let id = n as u64 + 1;
        match per_image.last_mut() {
            Some((img, list)) if *img == s.image_id => list.push((id, s.instance_id)),
            _ => per_image.push((s.image_id, vec![(id, s.instance_id)])),
        }
    }
    let entries: Vec<Vec<PoolEntry>> = per_image
        .par_iter()
        .map(|(image_id, list)| {
            let rec = index[image_id];
            let path = image_dir.join(&rec.file_name);
            let image = match image::open(&path) {
                Ok(i) => i.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    return Ok(Vec::new());
                }
            };
            let global = extract_global(&image, extractor)?;
            let mut out = Vec::new();
            for &(id, instance_id) in list {
                let inst = rec
                    .instances
                    .iter()
                    .find(|i| i.id == instance_id)
                    .expect("survivor");
                let made = inst.decode_mask(rec.width, rec.height).and_then(|mask| {
                    make_entry(
                        id,
                        rec.image_id,
                        instance_id,
                        &rec.file_name,
                        &image,
                        &mask,
                        &global,
                        extractor,
                        params.margin,
                    )
                });
                match made {
                    Ok(e) => out.push(e),
                    Err(e) => log::warn!("skipping instance {instance_id}: {e}"),
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let entries: Vec<PoolEntry> = entries.into_iter().flatten().collect();
    log::info!("pool holds {} segments", entries.len());
    CandidatePool::new(params, entries)
}
