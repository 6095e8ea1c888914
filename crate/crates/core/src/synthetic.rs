//! Procedurally generated street-like scenes with a known placement distribution.
//!
//! Each scene has a sky, a ground plane below a horizon, and one object standing on the
//! ground. A person stands beside the object at the same depth, and their height grows
//! with the distance of their feet below the horizon. Object positions are drawn from
//! peaked normal distributions, so person placements are strongly non-uniform.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::PixelBox;
use crate::imaging;
use crate::pipeline::coco::{
    rasterize_polygons, CocoAnnotation, CocoCategory, CocoFile, CocoImage, Segmentation,
};
use crate::retrieval::{extract_global, make_entry, CandidatePool, FeatureExtractor, PoolParams};
use crate::pipeline::{
    build_scene, targets_for_box, Detection, Palette, PipelineConfig, Provenance,
    TrainingSample, PERSON_CATEGORY,
};

/// Category ids of the objects that appear next to people.
pub const OBJECT_CATEGORIES: [u32; 3] = [3, 15, 62];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub width: u32,
    pub height: u32,
    /// Mean and spread of the horizon row, as fractions of the height.
    pub horizon: (f64, f64),
    /// Mean and spread of the object's center column, as fractions of the width.
    pub object_x: (f64, f64),
    /// Mean and spread of the object's bottom row, as fractions of the height.
    pub object_y: (f64, f64),
    /// Person height per unit of feet-below-horizon distance.
    pub person_scale: f64,
    /// Amplitude of per-pixel texture noise, in intensity levels.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 320,
            height: 240,
            horizon: (0.4, 0.03),
            object_x: (0.5, 0.12),
            object_y: (0.8, 0.05),
            person_scale: 1.1,
            noise: 6.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub id: u64,
    /// The scene with the person drawn in.
    pub image: RgbImage,
    /// The same scene without the person.
    pub background: RgbImage,
    pub person: PixelBox,
    /// Outline of the person as COCO polygons.
    pub person_polygons: Vec<Vec<f64>>,
    pub person_mask: Vec<bool>,
    pub objects: Vec<Detection>,
}

fn normal(rng: &mut impl Rng, (mean, std): (f64, f64)) -> f64 {
    Normal::new(mean, std.max(1e-12)).expect("finite").sample(rng)
}

fn jitter(rng: &mut impl Rng, color: [f64; 3], amount: f64) -> [f64; 3] {
    color.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 255.0))
}

fn to_px(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// Polygons of a standing figure filling `b`: head, torso, two legs.
pub fn person_polygons(b: &PixelBox) -> Vec<Vec<f64>> {
    let (w, h) = (b.width(), b.height());
    let cx = b.x_min + 0.5 * w;
    let head_r = 0.09 * h;
    let head_cy = b.y_min + head_r;
    let head: Vec<f64> = (0..12)
        .flat_map(|i| {
            let a = std::f64::consts::TAU * i as f64 / 12.0;
            [cx + head_r * 0.9 * a.cos(), head_cy + head_r * a.sin()]
        })
        .collect();
    let torso_top = b.y_min + 2.0 * head_r;
    let hip = b.y_min + 0.55 * h;
    let torso = vec![
        b.x_min + 0.1 * w,
        torso_top,
        b.x_max - 0.1 * w,
        torso_top,
        b.x_max - 0.2 * w,
        hip,
        b.x_min + 0.2 * w,
        hip,
    ];
    let leg = |x0: f64, x1: f64| vec![x0, hip, x1, hip, x1, b.y_max, x0, b.y_max];
    vec![
        head,
        torso,
        leg(b.x_min + 0.2 * w, cx - 0.03 * w),
        leg(cx + 0.03 * w, b.x_max - 0.2 * w),
    ]
}

/// Draws a figure into `b` of `img` with the given clothing colors and returns its mask.
pub fn draw_person(
    img: &mut RgbImage,
    b: &PixelBox,
    shirt: [u8; 3],
    trousers: [u8; 3],
) -> Vec<bool> {
    let polys = person_polygons(b);
    let (w, h) = img.dimensions();
    let skin = [224, 172, 132];
    let hip = b.y_min + 0.55 * b.height();
    let mut all = vec![false; (w * h) as usize];
    for (i, poly) in polys.iter().enumerate() {
        let mask = rasterize_polygons(std::slice::from_ref(poly), w, h);
        for (p, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            all[p] = true;
            let y = (p as u32 / w) as f64 + 0.5;
            let color = match i {
                0 => skin,
                1 => shirt,
                _ if y < hip => shirt,
                _ => trousers,
            };
            img.put_pixel(p as u32 % w, p as u32 / w, Rgb(color));
        }
    }
    all
}

/// A standalone person cutout of the given height: RGB crop and matching mask.
pub fn person_cutout(height: u32, aspect: f64, seed: u64) -> (RgbImage, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = ((f64::from(height) * aspect).round() as u32).max(2);
    let mut img = RgbImage::from_pixel(width, height, Rgb([0, 0, 0]));
    let b = PixelBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: f64::from(width),
        y_max: f64::from(height),
    };
    let shirt = [rng.random(), rng.random(), rng.random()];
    let trousers = [rng.random(), rng.random(), rng.random()];
    let mask = draw_person(&mut img, &b, shirt, trousers);
    (img, mask)
}

/// Generates scene `id`. The same `(cfg, seed, id)` always gives the same scene.
pub fn generate_scene(cfg: &SyntheticConfig, seed: u64, id: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (wf, hf) = (f64::from(cfg.width), f64::from(cfg.height));
    let horizon = (normal(&mut rng, cfg.horizon).clamp(0.2, 0.6)) * hf;

    let sky_top = jitter(&mut rng, [70.0, 120.0, 200.0], 30.0);
    let sky_low = jitter(&mut rng, [180.0, 205.0, 230.0], 20.0);
    let ground_far = jitter(&mut rng, [120.0, 110.0, 90.0], 30.0);
    let ground_near = jitter(&mut rng, [80.0, 95.0, 60.0], 30.0);
    let mut background = RgbImage::from_fn(cfg.width, cfg.height, |_, y| {
        let y = f64::from(y) + 0.5;
        if y < horizon {
            let t = y / horizon;
            to_px([0, 1, 2].map(|c| sky_top[c] * (1.0 - t) + sky_low[c] * t))
        } else {
            let t = (y - horizon) / (hf - horizon).max(1.0);
            to_px([0, 1, 2].map(|c| ground_far[c] * (1.0 - t) + ground_near[c] * t))
        }
    });

    // object on the ground
    let min_depth = 0.15 * hf;
    let obj_bottom = (normal(&mut rng, cfg.object_y) * hf).clamp(horizon + min_depth, hf - 1.0);
    let depth = obj_bottom - horizon;
    let category = OBJECT_CATEGORIES[rng.random_range(0..OBJECT_CATEGORIES.len())];
    let (oh, ow) = match category {
        3 => (0.45 * depth, 1.0 * depth),
        15 => (0.35 * depth, 0.9 * depth),
        _ => (0.5 * depth, 0.4 * depth),
    };
    let obj_cx = (normal(&mut rng, cfg.object_x) * wf).clamp(0.5 * ow + 1.0, wf - 0.5 * ow - 1.0);
    let object = PixelBox {
        x_min: obj_cx - 0.5 * ow,
        y_min: obj_bottom - oh,
        x_max: obj_cx + 0.5 * ow,
        y_max: obj_bottom,
    };
    let obj_color = jitter(&mut rng, [150.0, 40.0, 40.0], 90.0);
    let obj_mask = crate::pipeline::coco::fill_box(&object, cfg.width, cfg.height);
    for (p, &m) in obj_mask.iter().enumerate() {
        if m {
            let y = p as u32 / cfg.width;
            let stripe = if (y / 3) % 2 == 0 { 1.0 } else { 0.8 };
            background.put_pixel(
                p as u32 % cfg.width,
                y,
                to_px(obj_color.map(|c| c * stripe)),
            );
        }
    }
    // horizon line
    let hy = horizon.floor() as u32;
    if hy < cfg.height {
        for x in 0..cfg.width {
            background.put_pixel(x, hy, Rgb([60, 60, 60]));
        }
    }
    if cfg.noise > 0.0 {
        for p in background.pixels_mut() {
            let n = rng.random_range(-cfg.noise..=cfg.noise);
            p.0 = p.0.map(|v| (f64::from(v) + n).round().clamp(0.0, 255.0) as u8);
        }
    }

    // person beside the object at the same depth
    let feet = (obj_bottom + normal(&mut rng, (0.0, 0.01 * hf))).clamp(horizon + min_depth, hf);
    let ph = cfg.person_scale * (feet - horizon) * normal(&mut rng, (1.0, 0.04));
    let pw = 0.38 * ph;
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut px = obj_cx + side * (0.5 * ow + 0.7 * pw);
    if px - 0.5 * pw < 0.0 || px + 0.5 * pw > wf {
        px = obj_cx - side * (0.5 * ow + 0.7 * pw);
    }
    let px = px.clamp(0.5 * pw, wf - 0.5 * pw);
    let person = PixelBox {
        x_min: px - 0.5 * pw,
        y_min: (feet - ph).max(0.0),
        x_max: px + 0.5 * pw,
        y_max: feet,
    };
    let mut image = background.clone();
    let shirt = [rng.random(), rng.random(), rng.random()];
    let trousers = [rng.random(), rng.random(), rng.random()];
    let person_mask = draw_person(&mut image, &person, shirt, trousers);
    SyntheticScene {
        id,
        image,
        background,
        person,
        person_polygons: person_polygons(&person),
        person_mask,
        objects: vec![Detection {
            category,
            bbox: object,
            score: 1.0,
        }],
    }
}

/// Scenes `first_id .. first_id + n`, generated in parallel.
pub fn generate_scenes(cfg: &SyntheticConfig, seed: u64, first_id: u64, n: usize) -> Vec<SyntheticScene> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, seed, first_id + i))
        .collect()
}

impl SyntheticScene {
    /// Training sample built from the person-free background, which stands in for a perfect
    /// erasure.
    pub fn training_sample(&self, cfg: &PipelineConfig, palette: &Palette) -> Result<TrainingSample> {
        let (scene, frame) = build_scene(
            &imaging::to_float(&self.background),
            &self.objects,
            palette,
            &cfg.scene,
        )?;
        let (_, target_xy, target_wh) = targets_for_box(&self.person, &frame, &cfg.grid)?;
        Ok(TrainingSample {
            scene,
            target_xy,
            target_wh,
            provenance: Provenance {
                image_id: self.id,
                instance_id: self.id * 10 + 1,
                bbox: self.person,
                frame,
            },
        })
    }
}

/// COCO annotations for `scenes`, whose images are stored under `file_name(id)`.
pub fn to_coco(scenes: &[SyntheticScene], file_name: impl Fn(u64) -> String) -> CocoFile {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for s in scenes {
        images.push(CocoImage {
            id: s.id,
            width: s.image.width(),
            height: s.image.height(),
            file_name: file_name(s.id),
        });
        annotations.push(CocoAnnotation {
            id: s.id * 10 + 1,
            image_id: s.id,
            category_id: PERSON_CATEGORY,
            bbox: s.person.to_xywh(),
            iscrowd: 0,
            segmentation: Some(Segmentation::Polygons(s.person_polygons.clone())),
        });
        for (k, o) in s.objects.iter().enumerate() {
            let b = o.bbox;
            annotations.push(CocoAnnotation {
                id: s.id * 10 + 2 + k as u64,
                image_id: s.id,
                category_id: o.category,
                bbox: b.to_xywh(),
                iscrowd: 0,
                segmentation: Some(Segmentation::Polygons(vec![vec![
                    b.x_min, b.y_min, b.x_max, b.y_min, b.x_max, b.y_max, b.x_min, b.y_max,
                ]])),
            });
        }
    }
    let mut categories = vec![CocoCategory {
        id: PERSON_CATEGORY,
        name: "person".into(),
    }];
    for (id, name) in OBJECT_CATEGORIES.iter().zip(["car", "bench", "chair"]) {
        categories.push(CocoCategory {
            id: *id,
            name: name.into(),
        });
    }
    CocoFile {
        images,
        annotations,
        categories,
    }
}

/// A pool holding the person of every scene, cut out of the scene image. Segment ids are
/// the scene ids.
pub fn synthetic_pool(
    scenes: &[SyntheticScene],
    extractor: &dyn FeatureExtractor,
    params: PoolParams,
) -> Result<CandidatePool> {
    let entries = scenes
        .par_iter()
        .map(|s| {
            let global = extract_global(&s.image, extractor)?;
            let mut e = make_entry(
                s.id,
                s.id,
                s.id * 10 + 1,
                &format!("synthetic-{}", s.id),
                &s.image,
                &s.person_mask,
                &global,
                extractor,
                params.margin,
            )?;
            e.record.dataset = "synthetic".into();
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    CandidatePool::new(params, entries)
}
