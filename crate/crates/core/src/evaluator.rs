//! Distribution-level evaluation: 2D histograms of standing points and sizes, and their
//! correlation between predicted and ground-truth placements.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_box, Grid, NormalizedBox};
use crate::net::{colormap, decode_candidate, PlacementNet};
use crate::pipeline::{SceneInput, TrainingSample};

pub use crate::compositor::render_silhouette;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub size: usize,
    /// Row-major counts; rows follow the second coordinate.
    pub counts: Vec<f64>,
}

impl Histogram2D {
    pub fn new(size: usize) -> Self {
        Histogram2D {
            size,
            counts: vec![0.0; size * size],
        }
    }

    /// Increments the bin holding `(u, v)`.
    pub fn add(&mut self, u: f64, v: f64) -> Result<()> {
        let cell = Grid { size: self.size }.encode(u, v)?;
        self.counts[cell.index] += 1.0;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Histogram2D) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Pearson correlation of the bin counts.
    pub fn correlation(&self, other: &Histogram2D) -> Result<f64> {
        if self.size != other.size {
            return Err(Error::invalid(format!(
                "histograms are {0}x{0} and {1}x{1}",
                self.size, other.size
            )));
        }
        correlation(&self.counts, &other.counts)
    }
}

/// Position and size histograms of a set of boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementHistograms {
    pub position: Histogram2D,
    pub size: Histogram2D,
}

impl PlacementHistograms {
    pub fn new(size: usize) -> Self {
        PlacementHistograms {
            position: Histogram2D::new(size),
            size: Histogram2D::new(size),
        }
    }

    pub fn add(&mut self, b: &NormalizedBox) -> Result<()> {
        b.validate()?;
        self.position.add(b.x_stand, b.y_stand)?;
        self.size.add(b.w, b.h)
    }

    pub fn merge(&mut self, other: &PlacementHistograms) {
        self.position.merge(&other.position);
        self.size.merge(&other.size);
    }
}

/// Histograms of `boxes` on the standard 15 × 15 grid.
pub fn accumulate(boxes: &[NormalizedBox]) -> Result<PlacementHistograms> {
    let mut h = PlacementHistograms::new(crate::geometry::GRID_SIZE);
    for b in boxes {
        h.add(b)?;
    }
    Ok(h)
}

/// `Σ(aᵢ−ā)(bᵢ−b̄) / √(Σ(aᵢ−ā)² Σ(bᵢ−b̄)²)`.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "cannot correlate {} bins with {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Anything that proposes placements for an evaluation scene.
pub trait PlacementModel: Sync {
    /// The `k` best boxes for scene number `index`.
    fn predict_boxes(&self, index: usize, scene: &SceneInput, k: usize) -> Result<Vec<NormalizedBox>>;
}

impl PlacementModel for PlacementNet {
    fn predict_boxes(&self, _: usize, scene: &SceneInput, k: usize) -> Result<Vec<NormalizedBox>> {
        let p = self.predict(scene, k, 1)?;
        Ok(p.candidates.iter().map(|c| c.bbox).collect())
    }
}

/// Predicts uniformly random cells for both heads, reproducibly per scene.
#[derive(Debug, Clone, Copy)]
pub struct UniformPredictor {
    pub grid: Grid,
    pub seed: u64,
}

impl PlacementModel for UniformPredictor {
    fn predict_boxes(&self, index: usize, _: &SceneInput, k: usize) -> Result<Vec<NormalizedBox>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x2545_F491));
        let n = self.grid.classes();
        (0..k)
            .map(|_| {
                let loc = self.grid.from_index(rng.random_range(0..n))?;
                let size = self.grid.from_index(rng.random_range(0..n))?;
                Ok(decode_candidate(&self.grid, loc, size))
            })
            .collect()
    }
}

/// A scene with its erased ground-truth placement.
#[derive(Debug, Clone)]
pub struct EvalScene {
    pub scene: SceneInput,
    pub truth: NormalizedBox,
}

impl EvalScene {
    pub fn from_sample(sample: &TrainingSample) -> Self {
        EvalScene {
            scene: sample.scene.clone(),
            truth: normalize_box(&sample.provenance.bbox, &sample.provenance.frame),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Predicted boxes per scene that enter the predicted histograms.
    pub top_k: usize,
    pub grid: Grid,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 1,
            grid: Grid::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub position_correlation: f64,
    pub size_correlation: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub truth: PlacementHistograms,
    pub predicted: PlacementHistograms,
}

/// Histograms of the ground truth and of the model's predictions over `scenes`, and their
/// correlations.
pub fn evaluate_model(
    model: &dyn PlacementModel,
    scenes: &[EvalScene],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let g = cfg.grid.size;
    let parts: Vec<(PlacementHistograms, PlacementHistograms)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut truth = PlacementHistograms::new(g);
            truth.add(&s.truth)?;
            let mut predicted = PlacementHistograms::new(g);
            for b in model.predict_boxes(i, &s.scene, cfg.top_k)? {
                predicted.add(&b)?;
            }
            Ok((truth, predicted))
        })
        .collect::<Result<_>>()?;
    let mut truth = PlacementHistograms::new(g);
    let mut predicted = PlacementHistograms::new(g);
    for (t, p) in &parts {
        truth.merge(t);
        predicted.merge(p);
    }
    let report = EvalReport {
        position_correlation: truth.position.correlation(&predicted.position)?,
        size_correlation: truth.size.correlation(&predicted.size)?,
        n_samples: scenes.len(),
    };
    Ok(Evaluation {
        report,
        truth,
        predicted,
    })
}

/// Histogram as a heat image with `cell` pixels per bin, normalized to its maximum.
pub fn render_histogram(h: &Histogram2D, cell: u32) -> RgbImage {
    let max = h.counts.iter().cloned().fold(0.0, f64::max);
    let side = h.size as u32 * cell;
    RgbImage::from_fn(side, side, |x, y| {
        let i = (y / cell) as usize * h.size + (x / cell) as usize;
        let t = if max > 0.0 { h.counts[i] / max } else { 0.0 };
        Rgb(colormap(t as f32))
    })
}

/// Ground truth (left) next to prediction (right), separated by a white gap.
pub fn render_histogram_pair(truth: &Histogram2D, predicted: &Histogram2D, cell: u32) -> RgbImage {
    let a = render_histogram(truth, cell);
    let b = render_histogram(predicted, cell);
    let gap = cell.max(2);
    let mut out = RgbImage::from_pixel(a.width() + gap + b.width(), a.height(), Rgb([255; 3]));
    image::imageops::replace(&mut out, &a, 0, 0);
    image::imageops::replace(&mut out, &b, i64::from(a.width() + gap), 0);
    out
}
