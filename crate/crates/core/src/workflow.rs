//! The automatic compositing workflow: predict placements for a background, retrieve a
//! fitting segment for each, and render the composite.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::compositor::{compose, Composite, CompositeSpec, Placement};
use crate::error::{Error, Result};
use crate::geometry::{denormalize_box, PixelBox, SquareFrame};
use crate::imaging::to_float;
use crate::net::{PlacementNet, PlacementPrediction};
use crate::pipeline::{build_scene, Detection, Palette, SceneConfig, SceneInput};
use crate::retrieval::{CandidatePool, FeatureExtractor, UiCandidates, UI_CANDIDATES};

/// One predicted person: where they go and which segments fit there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonProposal {
    pub prediction: PlacementPrediction,
    /// Top-1 box in background pixels, clipped to the image.
    pub bbox: PixelBox,
    pub candidates: UiCandidates,
}

impl PersonProposal {
    /// The best candidate, used for the automatic composite.
    pub fn best_segment(&self) -> Option<u64> {
        self.candidates.hits.first().map(|h| h.id)
    }
}

#[derive(Debug, Clone)]
pub struct AutoComposite {
    pub frame: SquareFrame,
    pub scene: SceneInput,
    pub people: Vec<PersonProposal>,
    pub spec: CompositeSpec,
    pub composite: Composite,
}

/// Everything needed to go from a background to a composite.
pub struct Composer<'a> {
    pub net: &'a PlacementNet,
    pub pool: &'a CandidatePool,
    pub extractor: &'a dyn FeatureExtractor,
    pub palette: Palette,
    pub scene: SceneConfig,
    pub feather_radius: f64,
    /// Candidates retrieved per person.
    pub candidates: usize,
}

impl<'a> Composer<'a> {
    pub fn new(
        net: &'a PlacementNet,
        pool: &'a CandidatePool,
        extractor: &'a dyn FeatureExtractor,
    ) -> Self {
        Composer {
            net,
            pool,
            extractor,
            palette: Palette::coco(0),
            scene: SceneConfig {
                input_size: net.config().input_size as u32,
                ..SceneConfig::default()
            },
            feather_radius: crate::compositor::DEFAULT_FEATHER_RADIUS,
            candidates: UI_CANDIDATES,
        }
    }

    /// Network input for a person-free background.
    pub fn scene(
        &self,
        background: &RgbImage,
        detections: &[Detection],
    ) -> Result<(SceneInput, SquareFrame)> {
        if self.scene.input_size as usize != self.net.config().input_size {
            return Err(Error::Config(format!(
                "scene input size {} does not match the network input {}",
                self.scene.input_size,
                self.net.config().input_size
            )));
        }
        build_scene(&to_float(background), detections, &self.palette, &self.scene)
    }

    /// Predicts `n_people` placements and retrieves candidates for each.
    pub fn propose(
        &self,
        background: &RgbImage,
        detections: &[Detection],
        n_people: usize,
    ) -> Result<(SceneInput, SquareFrame, Vec<PersonProposal>)> {
        let (scene, frame) = self.scene(background, detections)?;
        let predictions = self.net.predict_multi(&scene, n_people)?;
        let people = predictions
            .into_iter()
            .map(|prediction| self.proposal(background, &frame, prediction))
            .collect::<Result<_>>()?;
        Ok((scene, frame, people))
    }

    fn proposal(
        &self,
        background: &RgbImage,
        frame: &SquareFrame,
        prediction: PlacementPrediction,
    ) -> Result<PersonProposal> {
        let (w, h) = background.dimensions();
        let bbox = denormalize_box(&prediction.top().bbox, frame).clamped(f64::from(w), f64::from(h));
        bbox.validate()?;
        let candidates = self.candidates_for(background, &bbox)?;
        Ok(PersonProposal {
            prediction,
            bbox,
            candidates,
        })
    }

    /// Retrieval candidates for an arbitrary box.
    pub fn candidates_for(&self, background: &RgbImage, bbox: &PixelBox) -> Result<UiCandidates> {
        let (d, size) = self.pool.describe_query(background, bbox, self.extractor)?;
        self.pool.candidates_for_descriptor(&d, size, self.candidates)
    }

    /// The automatic composite: each person rendered with their best candidate.
    pub fn compose(
        &self,
        background: &RgbImage,
        detections: &[Detection],
        n_people: usize,
    ) -> Result<AutoComposite> {
        let (scene, frame, people) = self.propose(background, detections, n_people)?;
        let mut spec = CompositeSpec::new(background.clone());
        spec.feather_radius = self.feather_radius;
        for p in &people {
            let segment_id = p.best_segment().ok_or(Error::EmptyPool)?;
            spec.placements.push(Placement {
                segment_id,
                bbox: p.bbox,
            });
        }
        let composite = compose(&spec, self.pool)?;
        Ok(AutoComposite {
            frame,
            scene,
            people,
            spec,
            composite,
        })
    }
}
