use std::io::Cursor;

use compose_core::compositor::{compose, CompositeSpec, ProvenanceEntry};
use compose_core::geometry::PixelBox;
use compose_core::net::{draw_rect, export_heatmap, HeatmapStyle};
use compose_core::retrieval::UiCandidates;
use compose_core::workflow::{Composer, PersonProposal};
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

pub(crate) fn png(img: &RgbImage) -> ApiResult<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ApiError::Internal(format!("PNG encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

/// A change to one placed person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementEdit {
    #[serde(rename = "box")]
    pub box_index: usize,
    /// Replacement segment; the current one is kept when absent.
    #[serde(default)]
    pub segment_id: Option<u64>,
    /// Shift of the box center in pixels.
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    /// Multiplier on the box height (and width, keeping its aspect).
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl PlacementEdit {
    pub fn is_identity_transform(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.scale == 1.0
    }
}

pub(crate) struct Prediction {
    pub people: Vec<PersonProposal>,
    pub heatmap_png: Vec<u8>,
}

pub(crate) struct Session {
    pub id: String,
    pub background_png: Vec<u8>,
    pub spec: CompositeSpec,
    pub prediction: Option<Prediction>,
    pub provenance: Vec<ProvenanceEntry>,
    pub composite_png: Option<Vec<u8>>,
    /// Candidate lists per box, recomputed after the box moves.
    pub candidates: Vec<Option<UiCandidates>>,
    pub revision: u64,
}

impl Session {
    pub fn new(id: String, background: RgbImage, feather_radius: f64) -> ApiResult<Self> {
        let mut spec = CompositeSpec::new(background);
        spec.feather_radius = feather_radius;
        Ok(Session {
            id,
            background_png: png(&spec.background)?,
            spec,
            prediction: None,
            provenance: Vec::new(),
            composite_png: None,
            candidates: Vec::new(),
            revision: 0,
        })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.spec.background.dimensions()
    }

    /// Predicts `n_people` placements and renders the automatic composite, replacing any
    /// earlier placements.
    pub fn predict(&mut self, composer: &Composer<'_>, n_people: usize) -> ApiResult<()> {
        let auto = composer.compose(&self.spec.background, &[], n_people)?;
        let mut heat = export_heatmap(
            &auto.people[0].prediction,
            &auto.frame,
            Some(&self.spec.background),
            &HeatmapStyle {
                draw_box: false,
                ..HeatmapStyle::default()
            },
        );
        let style = HeatmapStyle::default();
        for p in &auto.people {
            draw_rect(&mut heat, &p.bbox, style.box_color);
        }
        self.composite_png = Some(png(&auto.composite.image)?);
        self.provenance = auto.composite.provenance;
        self.spec.placements = auto.spec.placements;
        self.candidates = auto.people.iter().map(|p| Some(p.candidates.clone())).collect();
        self.prediction = Some(Prediction {
            people: auto.people,
            heatmap_png: png(&heat)?,
        });
        self.revision += 1;
        Ok(())
    }

    fn require_prediction(&self) -> ApiResult<&Prediction> {
        self.prediction
            .as_ref()
            .ok_or_else(|| ApiError::Conflict("call predict before this request".into()))
    }

    fn check_box(&self, index: usize) -> ApiResult<()> {
        self.require_prediction()?;
        if index >= self.spec.placements.len() {
            return Err(ApiError::NotFound(format!(
                "box {index} does not exist; this session has {} boxes",
                self.spec.placements.len()
            )));
        }
        Ok(())
    }

    pub fn candidates(&mut self, composer: &Composer<'_>, index: usize) -> ApiResult<UiCandidates> {
        self.check_box(index)?;
        if let Some(c) = &self.candidates[index] {
            return Ok(c.clone());
        }
        let c = composer.candidates_for(&self.spec.background, &self.spec.placements[index].bbox)?;
        self.candidates[index] = Some(c.clone());
        Ok(c)
    }

    /// Applies `edit` and re-renders. A rejected edit leaves the session untouched.
    pub fn apply(&mut self, composer: &Composer<'_>, edit: &PlacementEdit) -> ApiResult<()> {
        self.check_box(edit.box_index)?;
        if !(edit.scale.is_finite() && edit.scale > 0.0) {
            return Err(ApiError::Unprocessable(format!(
                "scale must be a positive number, got {}",
                edit.scale
            )));
        }
        if !(edit.dx.is_finite() && edit.dy.is_finite()) {
            return Err(ApiError::Unprocessable("dx and dy must be finite".into()));
        }
        let mut spec = self.spec.clone();
        let placement = &mut spec.placements[edit.box_index];
        if let Some(id) = edit.segment_id {
            placement.segment_id = id;
        }
        let moved = !edit.is_identity_transform();
        if moved {
            let (w, h) = self.dimensions();
            let old = placement.bbox;
            let (cx, cy) = old.center();
            let target = PixelBox::centered(
                cx + edit.dx,
                cy + edit.dy,
                old.width() * edit.scale,
                old.height() * edit.scale,
            )
            .clamped(f64::from(w), f64::from(h));
            if target.validate().is_err() {
                return Err(ApiError::Unprocessable(
                    "the edited box lies outside the background".into(),
                ));
            }
            placement.bbox = target;
        }
        let composite = compose(&spec, composer.pool)?;
        self.composite_png = Some(png(&composite.image)?);
        self.provenance = composite.provenance;
        self.spec = spec;
        if moved {
            self.candidates[edit.box_index] = None;
        }
        self.revision += 1;
        Ok(())
    }

    pub fn heatmap_png(&self) -> ApiResult<&[u8]> {
        Ok(&self.require_prediction()?.heatmap_png)
    }

    pub fn composite_png(&self) -> ApiResult<&[u8]> {
        self.composite_png
            .as_deref()
            .ok_or_else(|| ApiError::Conflict("no composite yet; call predict first".into()))
    }
}
