//! The placement network: a shared convolutional trunk, a location head classifying the
//! standing point into grid cells, and a size head that reads a small window of features
//! at the chosen location.

mod checkpoint;
mod config;
mod heatmap;
pub mod layers;
mod model;
mod predict;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{BlockConfig, NetworkConfig};
pub use heatmap::{colormap, draw_rect, export_heatmap, upsampled_map, HeatmapStyle};
pub use model::{
    roi_slice, roi_window, LocationStage, PlacementNet, RoiObserver, RoiSource, RoiTrace,
    SampleOutput,
};
pub use predict::{decode_candidate, select_cells, top_k, PlacementCandidate, PlacementPrediction};
pub use train::{mean_loss, train, EpochMetrics, Example, Hyperparams, Optimizer, TrainReport};
