//! Data preparation: annotation ingestion, instance filtering, person erasure, layout
//! rendering and training-set assembly.

pub mod coco;
pub mod dataset;
pub mod filter;
pub mod inpaint;
pub mod layout;
pub mod scene;

pub use coco::{load_annotations, AnnotationRecord, Instance, PERSON_CATEGORY};
pub use dataset::{
    load_detections, load_manifest, targets_for_box, write_training_set, DetectionCache, Detector,
    ManifestEntry, NoDetector, PipelineConfig, Provenance, TrainingSample, TrainingSetBuilder,
};
pub use filter::{filter_instances, rejection, FilterConfig, InstanceRef, OverlapScope, Rejection};
pub use inpaint::{erase_person, FastMarchingInpainter, Inpainter};
pub use layout::{render_layout, Detection, Palette};
pub use scene::{build_scene, SceneConfig, SceneInput};
