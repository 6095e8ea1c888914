//! Training-set construction: filtering, erasure, scene rendering and the on-disk manifest.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coco::{AnnotationRecord, PERSON_CATEGORY};
use super::filter::{filter_instances, FilterConfig, InstanceRef};
use super::inpaint::{erase_person, FastMarchingInpainter, Inpainter};
use super::layout::{Detection, Palette};
use super::scene::{build_scene, SceneConfig, SceneInput};
use crate::error::{Error, Result};
use crate::geometry::{iou, normalize_box, Grid, GridCell, NormalizedBox, PixelBox, SquareFrame};
use crate::imaging;

/// Source of object detections for layout rendering.
pub trait Detector: Send + Sync {
    fn detect(&self, image_id: u64, image: &RgbImage) -> Result<Vec<Detection>>;
}

/// Detector that never reports anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoDetector;

impl Detector for NoDetector {
    fn detect(&self, _: u64, _: &RgbImage) -> Result<Vec<Detection>> {
        Ok(Vec::new())
    }
}

/// Precomputed detections keyed by image id.
#[derive(Debug, Default, Clone)]
pub struct DetectionCache {
    by_image: HashMap<u64, Vec<Detection>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    image_id: u64,
    detections: Vec<CachedDetection>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CachedDetection {
    category: u32,
    /// `[x, y, width, height]`
    bbox: [f64; 4],
    score: f32,
}

impl DetectionCache {
    pub fn insert(&mut self, image_id: u64, detections: Vec<Detection>) {
        self.by_image.insert(image_id, detections);
    }

    pub fn get(&self, image_id: u64) -> Option<&[Detection]> {
        self.by_image.get(&image_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }

    /// Uses the annotated boxes of every non-crowd instance as score-1 detections.
    pub fn from_annotations(records: &[AnnotationRecord]) -> Self {
        let by_image = records
            .iter()
            .map(|r| {
                let dets = r
                    .instances
                    .iter()
                    .filter(|i| !i.crowd)
                    .map(|i| Detection {
                        category: i.category,
                        bbox: i.bbox,
                        score: 1.0,
                    })
                    .collect();
                (r.image_id, dets)
            })
            .collect();
        DetectionCache { by_image }
    }

    /// Reads a JSON-lines cache; each line is `{"image_id", "detections": [...]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut cache = DetectionCache::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CacheLine = serde_json::from_str(&line).map_err(|e| {
                Error::format("detection cache", format!("line {}: {e}", n + 1))
            })?;
            let dets = parsed
                .detections
                .into_iter()
                .filter_map(|d| {
                    let [x, y, w, h] = d.bbox;
                    PixelBox::from_xywh(x, y, w, h).ok().map(|bbox| Detection {
                        category: d.category,
                        bbox,
                        score: d.score,
                    })
                })
                .collect();
            cache.by_image.insert(parsed.image_id, dets);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut ids: Vec<&u64> = self.by_image.keys().collect();
        ids.sort();
        for id in ids {
            let line = CacheLine {
                image_id: *id,
                detections: self.by_image[id]
                    .iter()
                    .map(|d| CachedDetection {
                        category: d.category,
                        bbox: d.bbox.to_xywh(),
                        score: d.score,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            writeln!(out).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON array of `{"category", "bbox": [x, y, width, height], "score"}`.
pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<CachedDetection> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format("detections", e.to_string()))?;
    raw.into_iter()
        .map(|d| {
            let [x, y, w, h] = d.bbox;
            Ok(Detection {
                category: d.category,
                bbox: PixelBox::from_xywh(x, y, w, h)?,
                score: d.score,
            })
        })
        .collect()
}

impl Detector for DetectionCache {
    fn detect(&self, image_id: u64, _: &RgbImage) -> Result<Vec<Detection>> {
        Ok(self.get(image_id).map(<[_]>::to_vec).unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub category: u32,
    pub filter: FilterConfig,
    pub scene: SceneConfig,
    /// Mask dilation before inpainting, in pixels.
    pub dilation: f64,
    pub palette_seed: u64,
    /// Detections of the erased category overlapping the erased box by more than this IoU
    /// are treated as detections of the erased person and dropped.
    pub erased_match_iou: f64,
    pub grid: Grid,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            category: PERSON_CATEGORY,
            filter: FilterConfig::default(),
            scene: SceneConfig::default(),
            dilation: 7.0,
            palette_seed: 0,
            erased_match_iou: 0.5,
            grid: Grid::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: u64,
    pub instance_id: u64,
    pub bbox: PixelBox,
    pub frame: SquareFrame,
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub scene: SceneInput,
    pub target_xy: GridCell,
    pub target_wh: GridCell,
    pub provenance: Provenance,
}

/// Location and size classes of a ground-truth box.
pub fn targets_for_box(
    bbox: &PixelBox,
    frame: &SquareFrame,
    grid: &Grid,
) -> Result<(NormalizedBox, GridCell, GridCell)> {
    let n = normalize_box(bbox, frame);
    Ok((
        n,
        grid.encode(n.x_stand, n.y_stand)?,
        grid.encode(n.w, n.h)?,
    ))
}

/// Produces training samples from annotated images.
pub struct TrainingSetBuilder<'a> {
    records: Vec<AnnotationRecord>,
    image_dir: PathBuf,
    detector: &'a dyn Detector,
    inpainter: Box<dyn Inpainter + 'a>,
    cfg: PipelineConfig,
    palette: Palette,
    chunk: usize,
}

impl<'a> TrainingSetBuilder<'a> {
    pub fn new(
        records: Vec<AnnotationRecord>,
        image_dir: impl Into<PathBuf>,
        detector: &'a dyn Detector,
        cfg: PipelineConfig,
    ) -> Self {
        TrainingSetBuilder {
            records,
            image_dir: image_dir.into(),
            detector,
            inpainter: Box::new(FastMarchingInpainter::default()),
            palette: Palette::coco(cfg.palette_seed),
            cfg,
            chunk: 16,
        }
    }

    pub fn with_inpainter(mut self, inpainter: Box<dyn Inpainter + 'a>) -> Self {
        self.inpainter = inpainter;
        self
    }

    pub fn with_palette(mut self, palette: Palette) -> Self {
        self.palette = palette;
        self
    }

    pub fn survivors(&self) -> Vec<InstanceRef> {
        filter_instances(&self.records, self.cfg.category, &self.cfg.filter)
    }

    /// Samples in `(image_id, instance_id)` order. Images are processed in parallel chunks;
    /// unreadable images and undecodable masks are skipped with a warning.
    pub fn samples(&self) -> impl Iterator<Item = TrainingSample> + '_ {
        let survivors = self.survivors();
        let mut per_image: Vec<(usize, Vec<u64>)> = Vec::new();
        let index: HashMap<u64, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id, i))
            .collect();
        for s in survivors {
            let ri = index[&s.image_id];
            match per_image.last_mut() {
                Some((last, ids)) if *last == ri => ids.push(s.instance_id),
                _ => per_image.push((ri, vec![s.instance_id])),
            }
        }
        let chunks: Vec<Vec<(usize, Vec<u64>)>> =
            per_image.chunks(self.chunk).map(<[_]>::to_vec).collect();
        chunks.into_iter().flat_map(move |chunk| {
            chunk
                .par_iter()
                .map(|(ri, ids)| self.process_image(&self.records[*ri], ids))
                .collect::<Vec<_>>()
                .into_iter()
                .flatten()
        })
    }

    fn process_image(&self, rec: &AnnotationRecord, instance_ids: &[u64]) -> Vec<TrainingSample> {
        let path = self.image_dir.join(&rec.file_name);
        let img = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping image {} ({}): {e}", rec.image_id, path.display());
                return Vec::new();
            }
        };
        if img.dimensions() != (rec.width, rec.height) {
            log::warn!(
                "skipping image {}: file is {:?}, annotation says {}x{}",
                rec.image_id,
                img.dimensions(),
                rec.width,
                rec.height
            );
            return Vec::new();
        }
        let detections = match self.detector.detect(rec.image_id, &img) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipping image {}: detector failed: {e}", rec.image_id);
                return Vec::new();
            }
        };
        let float = imaging::to_float(&img);
        let mut out = Vec::new();
        for &id in instance_ids {
            let inst = rec.instances.iter().find(|i| i.id == id).expect("survivor");
            match self.sample_for(rec, &float, inst, &detections) {
                Ok(s) => out.push(s),
                Err(e) => log::warn!("skipping instance {id} of image {}: {e}", rec.image_id),
            }
        }
        out
    }

    fn sample_for(
        &self,
        rec: &AnnotationRecord,
        image: &image::Rgb32FImage,
        inst: &super::coco::Instance,
        detections: &[Detection],
    ) -> Result<TrainingSample> {
        let mask = inst.decode_mask(rec.width, rec.height)?;
        let erased = erase_person(image, &mask, self.cfg.dilation, self.inpainter.as_ref())?;
        let remaining: Vec<Detection> = detections
            .iter()
            .filter(|d| {
                !(d.category == self.cfg.category
                    && iou(&d.bbox, &inst.bbox) > self.cfg.erased_match_iou)
            })
            .copied()
            .collect();
        let (scene, frame) = build_scene(&erased, &remaining, &self.palette, &self.cfg.scene)?;
        let (_, target_xy, target_wh) = targets_for_box(&inst.bbox, &frame, &self.cfg.grid)?;
        Ok(TrainingSample {
            scene,
            target_xy,
            target_wh,
            provenance: Provenance {
                image_id: rec.image_id,
                instance_id: inst.id,
                bbox: inst.bbox,
                frame,
            },
        })
    }
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: u64,
    pub instance_id: u64,
    pub target_xy: usize,
    pub target_wh: usize,
    /// Path of `I_B`, relative to the manifest directory.
    pub background: String,
    /// Path of `I_L`, relative to the manifest directory.
    pub layout: String,
    /// Ground-truth box `[x, y, width, height]` in source pixels.
    pub bbox: [f64; 4],
    pub frame: SquareFrame,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes samples as PNG pairs plus a JSON-lines manifest; returns the sample count.
pub fn write_training_set(
    samples: impl Iterator<Item = TrainingSample>,
    out_dir: &Path,
) -> Result<usize> {
    for sub in ["background", "layout"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut manifest = BufWriter::new(file);
    let mut count = 0;
    for s in samples {
        let stem = format!("{}_{}", s.provenance.image_id, s.provenance.instance_id);
        let entry = ManifestEntry {
            image_id: s.provenance.image_id,
            instance_id: s.provenance.instance_id,
            target_xy: s.target_xy.index,
            target_wh: s.target_wh.index,
            background: format!("background/{stem}.png"),
            layout: format!("layout/{stem}.png"),
            bbox: s.provenance.bbox.to_xywh(),
            frame: s.provenance.frame,
        };
        imaging::to_u8(&s.scene.background).save(out_dir.join(&entry.background))?;
        s.scene.layout.save(out_dir.join(&entry.layout))?;
        serde_json::to_writer(&mut manifest, &entry)?;
        writeln!(manifest).map_err(|e| Error::io(&manifest_path, e))?;
        count += 1;
    }
    manifest
        .flush()
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(count)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

impl ManifestEntry {
    pub fn pixel_box(&self) -> Result<PixelBox> {
        let [x, y, w, h] = self.bbox;
        PixelBox::from_xywh(x, y, w, h)
    }

    /// Reloads the stored sample and re-derives its targets from the stored box.
    pub fn load_sample(&self, dir: &Path, grid: &Grid) -> Result<TrainingSample> {
        let background = imaging::to_float(&image::open(dir.join(&self.background))?.to_rgb8());
        let layout = image::open(dir.join(&self.layout))?.to_rgb8();
        let bbox = self.pixel_box()?;
        let (_, target_xy, target_wh) = targets_for_box(&bbox, &self.frame, grid)?;
        if target_xy.index != self.target_xy || target_wh.index != self.target_wh {
            return Err(Error::format(
                "manifest",
                format!(
                    "targets of {}/{} do not match their box",
                    self.image_id, self.instance_id
                ),
            ));
        }
        Ok(TrainingSample {
            scene: SceneInput::new(background, layout)?,
            target_xy,
            target_wh,
            provenance: Provenance {
                image_id: self.image_id,
                instance_id: self.instance_id,
                bbox,
                frame: self.frame,
            },
        })
    }
}
