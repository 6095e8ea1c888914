use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Grid;

/// Filter widths of one residual bottleneck block: `(reduce, middle, expand)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub filters: [usize; 3],
    /// Stride of the block's last 1×1 convolution and of its projection shortcut.
    pub stride: usize,
}

/// Layer dimensions of the placement network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub grid_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub blocks: Vec<BlockConfig>,
    pub location_channels: usize,
    pub size_channels: usize,
    pub dilation: usize,
    pub fc_hidden: usize,
    /// Spatial side of the ROI slice.
    pub roi_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 480,
            input_channels: 6,
            grid_size: 15,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            pool_kernel: 3,
            pool_stride: 2,
            blocks: vec![
                BlockConfig {
                    filters: [64, 64, 128],
                    stride: 2,
                },
                BlockConfig {
                    filters: [64, 64, 128],
                    stride: 2,
                },
                BlockConfig {
                    filters: [128, 128, 512],
                    stride: 2,
                },
            ],
            location_channels: 64,
            size_channels: 512,
            dilation: 2,
            fc_hidden: 512,
            roi_size: 3,
        }
    }
}

/// Output side of an unpadded convolution or pooling window.
pub(crate) fn valid_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    (size >= kernel && stride > 0).then(|| (size - kernel) / stride + 1)
}

impl NetworkConfig {
    /// A narrow network on a 15 × 15 grid with a 124-pixel input; cheap enough to train on a
    /// CPU in seconds.
    pub fn compact() -> Self {
        NetworkConfig {
            input_size: 124,
            stem_channels: 8,
            blocks: vec![
                BlockConfig {
                    filters: [8, 8, 16],
                    stride: 1,
                },
                BlockConfig {
                    filters: [8, 8, 16],
                    stride: 1,
                },
                BlockConfig {
                    filters: [16, 16, 32],
                    stride: 2,
                },
            ],
            location_channels: 16,
            size_channels: 32,
            fc_hidden: 64,
            ..NetworkConfig::default()
        }
    }

    /// A 5 × 5-grid network with at most 8 channels per layer, for gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            input_size: 28,
            grid_size: 5,
            stem_channels: 4,
            blocks: vec![
                BlockConfig {
                    filters: [4, 4, 8],
                    stride: 1,
                },
                BlockConfig {
                    filters: [4, 4, 8],
                    stride: 1,
                },
                BlockConfig {
                    filters: [8, 8, 8],
                    stride: 1,
                },
            ],
            location_channels: 4,
            size_channels: 8,
            fc_hidden: 8,
            ..NetworkConfig::default()
        }
    }

    pub fn grid(&self) -> Grid {
        Grid {
            size: self.grid_size,
        }
    }

    pub fn classes(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Activation shapes `(layer, [C, H, W])` through the shared trunk, or a description of
    /// the first inconsistency.
    pub fn trunk_shapes(&self) -> Result<Vec<(String, [usize; 3])>> {
        let err = |m: String| Error::Config(m);
        if self.input_channels == 0 || self.grid_size == 0 || self.blocks.is_empty() {
            return Err(err("channels, grid size and block list must be non-empty".into()));
        }
        let mut shapes = vec![(
            "input".to_string(),
            [self.input_channels, self.input_size, self.input_size],
        )];
        let s = valid_out(self.input_size, self.stem_kernel, self.stem_stride)
            .ok_or_else(|| err(format!("input {} smaller than stem kernel", self.input_size)))?;
        shapes.push(("stem".into(), [self.stem_channels, s, s]));
        let mut s = valid_out(s, self.pool_kernel, self.pool_stride)
            .ok_or_else(|| err("stem output smaller than pooling window".into()))?;
        shapes.push(("pool".into(), [self.stem_channels, s, s]));
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters.contains(&0) || b.stride == 0 {
                return Err(err(format!("block {i} has a zero width or stride")));
            }
            s = valid_out(s, 1, b.stride).expect("1x1 always fits");
            shapes.push((format!("block{}", i + 1), [b.filters[2], s, s]));
        }
        if s != self.grid_size {
            return Err(err(format!(
                "trunk output is {s}x{s}, grid is {g}x{g}",
                g = self.grid_size
            )));
        }
        Ok(shapes)
    }

    /// Full activation table including both heads.
    pub fn activation_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out: Vec<(String, Vec<usize>)> = self
            .trunk_shapes()?
            .into_iter()
            .map(|(n, s)| (n, s.to_vec()))
            .collect();
        let g = self.grid_size;
        if self.roi_size == 0 || self.roi_size > g {
            return Err(Error::Config(format!(
                "ROI size {} does not fit a {g}x{g} grid",
                self.roi_size
            )));
        }
        if self.dilation == 0 || self.location_channels == 0 || self.size_channels == 0 {
            return Err(Error::Config("head widths and dilation must be positive".into()));
        }
        out.push(("location_conv".into(), vec![self.location_channels, g, g]));
        out.push(("location_map".into(), vec![g, g]));
        out.push(("size_conv".into(), vec![self.size_channels, g, g]));
        out.push((
            "roi_slice".into(),
            vec![self.size_channels, self.roi_size, self.roi_size],
        ));
        out.push(("global_max".into(), vec![self.size_channels]));
        out.push(("size_logits".into(), vec![self.classes()]));
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.activation_shapes().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_reference_table() {
        let shapes = NetworkConfig::default().activation_shapes().unwrap();
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("input", vec![6, 480, 480]),
            ("stem", vec![64, 237, 237]),
            ("pool", vec![64, 118, 118]),
            ("block1", vec![128, 59, 59]),
            ("block2", vec![128, 30, 30]),
            ("block3", vec![512, 15, 15]),
            ("location_conv", vec![64, 15, 15]),
            ("location_map", vec![15, 15]),
            ("size_conv", vec![512, 15, 15]),
            ("roi_slice", vec![512, 3, 3]),
            ("global_max", vec![512]),
            ("size_logits", vec![225]),
        ];
        let got: Vec<(&str, Vec<usize>)> =
            shapes.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn small_configs_are_consistent() {
        NetworkConfig::compact().validate().unwrap();
        NetworkConfig::tiny().validate().unwrap();
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        let cfg = NetworkConfig {
            grid_size: 14,
            ..NetworkConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = NetworkConfig {
            input_size: 5,
            ..NetworkConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
