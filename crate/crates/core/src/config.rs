//! Settings shared by every command: paths, seeds, thresholds and network dimensions.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::compositor::DEFAULT_FEATHER_RADIUS;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::net::{Hyperparams, NetworkConfig};
use crate::pipeline::PipelineConfig;
use crate::retrieval::DEFAULT_SIZE_THRESHOLD;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Training-set directory.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    /// Minimum center-aligned IoU between query and candidate sizes.
    pub size_threshold: f64,
    pub feather_radius: f64,
    /// Dimensionality of each descriptor half.
    pub descriptor_dims: usize,
    pub network: NetworkConfig,
    pub train: Hyperparams,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            seed: 0,
            pipeline: PipelineConfig::default(),
            size_threshold: DEFAULT_SIZE_THRESHOLD,
            feather_radius: DEFAULT_FEATHER_RADIUS,
            descriptor_dims: 2048,
            network: NetworkConfig::default(),
            train: Hyperparams::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Recursively overwrites `base` with `overlay`; objects merge key by key, anything else is
/// replaced.
pub fn merge_json(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with each layer in turn; later layers win.
    pub fn layered(layers: impl IntoIterator<Item = Value>) -> Result<Self> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        for layer in layers {
            merge_json(&mut v, layer);
        }
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("bad configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.pipeline.filter;
        let checks = [
            ("pipeline.filter.max_iou", f.max_iou),
            ("pipeline.filter.min_edge_distance", f.min_edge_distance),
            ("pipeline.filter.min_area", f.min_area),
            ("pipeline.scene.blur_sigma", self.pipeline.scene.blur_sigma),
            ("size_threshold", self.size_threshold),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.size_threshold > 1.0 {
            return Err(Error::Config(format!(
                "size_threshold is an IoU and must be at most 1, got {}",
                self.size_threshold
            )));
        }
        if !(self.feather_radius >= 0.0 && self.feather_radius.is_finite()) {
            return Err(Error::Config(format!(
                "feather_radius must be non-negative, got {}",
                self.feather_radius
            )));
        }
        if self.pipeline.scene.input_size as usize != self.network.input_size {
            return Err(Error::Config(format!(
                "pipeline.scene.input_size {} differs from network.input_size {}",
                self.pipeline.scene.input_size, self.network.input_size
            )));
        }
        self.network.validate()?;
        self.train.validate()
    }
}
