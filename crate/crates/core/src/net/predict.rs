use serde::{Deserialize, Serialize};

use super::model::PlacementNet;
use crate::error::{Error, Result};
use crate::geometry::{Grid, GridCell, NormalizedBox};
use crate::pipeline::SceneInput;

/// One `(location, size)` combination from the two-stage cascade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementCandidate {
    pub location: GridCell,
    pub size: GridCell,
    pub location_prob: f64,
    pub size_prob: f64,
    /// Box decoded from the two cell centers, in the unit square of the padded frame.
    pub bbox: NormalizedBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPrediction {
    pub grid_size: usize,
    /// Location distribution over the grid, row-major.
    pub location_probs: Vec<f64>,
    pub location: GridCell,
    /// Size distribution with the ROI at `location`.
    pub size_probs: Vec<f64>,
    pub size: GridCell,
    /// Location-major enumeration of the top cells of both heads; the first entry is the
    /// top-1 prediction.
    pub candidates: Vec<PlacementCandidate>,
}

impl PlacementPrediction {
    pub fn top(&self) -> &PlacementCandidate {
        &self.candidates[0]
    }
}

/// Box whose standing point is the center of `location` and whose size is the center of
/// `size`.
pub fn decode_candidate(grid: &Grid, location: GridCell, size: GridCell) -> NormalizedBox {
    let (x_stand, y_stand) = grid.decode(location);
    let (w, h) = grid.decode(size);
    NormalizedBox {
        x_stand,
        y_stand,
        w,
        h,
    }
}

/// Indices of the `k` largest values, largest first; exact ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Picks `n` cells by repeated argmax, suppressing the 3 × 3 neighbourhood of every chosen
/// cell. Once every cell is chosen or suppressed, the remaining unchosen cells are used in
/// probability order.
pub fn select_cells(probs: &[f64], grid: &Grid, n: usize) -> Result<Vec<GridCell>> {
    let classes = grid.classes();
    if probs.len() != classes {
        return Err(Error::invalid(format!(
            "location map has {} entries, grid has {classes}",
            probs.len()
        )));
    }
    if n == 0 || n > classes {
        return Err(Error::invalid(format!(
            "number of people must be in 1..={classes}, got {n}"
        )));
    }
    let order = top_k(probs, classes);
    let mut suppressed = vec![false; classes];
    let mut chosen = vec![false; classes];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let next = order
            .iter()
            .copied()
            .find(|&i| !suppressed[i])
            .or_else(|| order.iter().copied().find(|&i| !chosen[i]))
            .expect("n <= classes");
        let cell = grid.from_index(next)?;
        chosen[next] = true;
        suppressed[next] = true;
        for r in cell.row.saturating_sub(1)..=(cell.row + 1).min(grid.size - 1) {
            for c in cell.col.saturating_sub(1)..=(cell.col + 1).min(grid.size - 1) {
                suppressed[r * grid.size + c] = true;
            }
        }
        out.push(cell);
    }
    Ok(out)
}

impl PlacementNet {
    fn scene_planes(&self, scene: &SceneInput) -> Result<Vec<f64>> {
        if !self.is_trained() {
            return Err(Error::State(
                "placement network has no trained weights; train it or load a checkpoint".into(),
            ));
        }
        let s = self.config().input_size;
        if scene.size() as usize != s || scene.background.height() as usize != s {
            return Err(Error::invalid(format!(
                "scene is {}x{}, network input is {s}x{s}",
                scene.background.width(),
                scene.background.height()
            )));
        }
        Ok(scene.to_planes())
    }

    fn prediction_at(
        &self,
        stage: &super::model::LocationStage,
        cells: &[GridCell],
        k_size: usize,
    ) -> Result<PlacementPrediction> {
        let grid = self.config().grid();
        let mut candidates = Vec::new();
        let mut primary = None;
        for &location in cells {
            let size_probs = self.size_stage(stage, location)?;
            for s in top_k(&size_probs, k_size) {
                let size = grid.from_index(s)?;
                candidates.push(PlacementCandidate {
                    location,
                    size,
                    location_prob: stage.location_probs[location.index],
                    size_prob: size_probs[s],
                    bbox: decode_candidate(&grid, location, size),
                });
            }
            if primary.is_none() {
                primary = Some(size_probs);
            }
        }
        let size_probs = primary.expect("at least one cell");
        let top = candidates[0];
        Ok(PlacementPrediction {
            grid_size: grid.size,
            location_probs: stage.location_probs.clone(),
            location: top.location,
            size_probs,
            size: top.size,
            candidates,
        })
    }

    /// Two-stage inference: the top `k_loc` location cells, each with its top `k_size` sizes.
    pub fn predict(
        &self,
        scene: &SceneInput,
        k_loc: usize,
        k_size: usize,
    ) -> Result<PlacementPrediction> {
        self.predict_planes(&self.scene_planes(scene)?, k_loc, k_size)
    }

    /// [`predict`](Self::predict) on raw planar input.
    pub fn predict_planes(
        &self,
        input: &[f64],
        k_loc: usize,
        k_size: usize,
    ) -> Result<PlacementPrediction> {
        let classes = self.config().classes();
        for (name, k) in [("k_loc", k_loc), ("k_size", k_size)] {
            if k == 0 || k > classes {
                return Err(Error::invalid(format!("{name} must be in 1..={classes}, got {k}")));
            }
        }
        if !self.is_trained() {
            return Err(Error::State(
                "placement network has no trained weights; train it or load a checkpoint".into(),
            ));
        }
        let grid = self.config().grid();
        let stage = self.location_stage(input)?;
        let cells: Vec<GridCell> = top_k(&stage.location_probs, k_loc)
            .into_iter()
            .map(|i| grid.from_index(i))
            .collect::<Result<_>>()?;
        self.prediction_at(&stage, &cells, k_size)
    }

    /// One top-1 prediction per person, at cells chosen by [`select_cells`].
    pub fn predict_multi(
        &self,
        scene: &SceneInput,
        n_people: usize,
    ) -> Result<Vec<PlacementPrediction>> {
        let classes = self.config().classes();
        if n_people == 0 || n_people > classes {
            return Err(Error::invalid(format!(
                "number of people must be in 1..={classes}, got {n_people}"
            )));
        }
        let input = self.scene_planes(scene)?;
        let grid = self.config().grid();
        let stage = self.location_stage(&input)?;
        select_cells(&stage.location_probs, &grid, n_people)?
            .into_iter()
            .map(|cell| self.prediction_at(&stage, &[cell], 1))
            .collect()
    }
}
