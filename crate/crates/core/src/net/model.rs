use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use super::layers::{cross_entropy, softmax, Conv2d, Grads, Linear, Map, MaxPool2d, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::GridCell;

/// Gain applied to the standard fan-in init of the two logit layers. Small output weights
/// start both heads near the uniform distribution.
const OUTPUT_GAIN: f64 = 0.01;

/// Where the ROI slice took its cell from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiSource {
    GroundTruth,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiTrace {
    pub cell: GridCell,
    pub source: RoiSource,
}

pub type RoiObserver = Arc<dyn Fn(RoiTrace) + Send + Sync>;

/// Grid positions `(row, col)` read by the ROI slice at `cell`, in slice order. The window
/// has `cell` at its bottom-center and is clamped to the map.
pub fn roi_window(cell: GridCell, map_size: usize, roi: usize) -> Vec<(usize, usize)> {
    let clamp = |v: isize| v.clamp(0, map_size as isize - 1) as usize;
    let half = (roi / 2) as isize;
    let mut out = Vec::with_capacity(roi * roi);
    for i in 0..roi as isize {
        let r = cell.row as isize - (roi as isize - 1) + i;
        for j in 0..roi as isize {
            out.push((clamp(r), clamp(cell.col as isize - half + j)));
        }
    }
    out
}

/// Extracts the `C × roi × roi` window of a square feature map at `cell`.
pub fn roi_slice(map: &Map, cell: GridCell, roi: usize) -> Map {
    assert_eq!(map.h, map.w, "ROI slicing needs a square map");
    let window = roi_window(cell, map.h, roi);
    let mut out = Map::zeros(map.c, roi, roi);
    for c in 0..map.c {
        for (k, &(r, col)) in window.iter().enumerate() {
            out.data[c * roi * roi + k] = map.at(c, r, col);
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: Conv2d,
    middle: Conv2d,
    expand: Conv2d,
    shortcut: Conv2d,
}

#[derive(Debug, Clone)]
struct Layers {
    stem: Conv2d,
    pool: MaxPool2d,
    blocks: Vec<Bottleneck>,
    location_conv: Conv2d,
    location_out: Conv2d,
    size_conv: Conv2d,
    fc_hidden: Linear,
    fc_out: Linear,
}

impl Layers {
    fn build(cfg: &NetworkConfig, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let stem = Conv2d::new(
            store,
            "stem",
            cfg.input_channels,
            cfg.stem_channels,
            cfg.stem_kernel,
            cfg.stem_stride,
            0,
            1,
            1.0,
            rng,
        );
        let mut in_c = cfg.stem_channels;
        let mut blocks = Vec::new();
        for (i, b) in cfg.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let [f1, f2, f3] = b.filters;
            blocks.push(Bottleneck {
                reduce: Conv2d::new(store, &format!("{name}.reduce"), in_c, f1, 1, 1, 0, 1, 1.0, rng),
                middle: Conv2d::new(store, &format!("{name}.middle"), f1, f2, 3, 1, 1, 1, 1.0, rng),
                expand: Conv2d::new(store, &format!("{name}.expand"), f2, f3, 1, b.stride, 0, 1, 1.0, rng),
                shortcut: Conv2d::new(
                    store,
                    &format!("{name}.shortcut"),
                    in_c,
                    f3,
                    1,
                    b.stride,
                    0,
                    1,
                    1.0,
                    rng,
                ),
            });
            in_c = f3;
        }
        let d = cfg.dilation;
        let location_conv =
            Conv2d::new(store, "location.conv", in_c, cfg.location_channels, 3, 1, d, d, 1.0, rng);
        let location_out = Conv2d::new(
            store,
            "location.out",
            cfg.location_channels,
            1,
            3,
            1,
            d,
            d,
            OUTPUT_GAIN,
            rng,
        );
        let size_conv = Conv2d::new(store, "size.conv", in_c, cfg.size_channels, 3, 1, d, d, 1.0, rng);
        let fc_hidden = Linear::new(store, "size.fc1", cfg.size_channels, cfg.fc_hidden, 1.0, rng);
        let fc_out = Linear::new(store, "size.fc2", cfg.fc_hidden, cfg.classes(), OUTPUT_GAIN, rng);
        Layers {
            stem,
            pool: MaxPool2d {
                kernel: cfg.pool_kernel,
                stride: cfg.pool_stride,
            },
            blocks,
            location_conv,
            location_out,
            size_conv,
            fc_hidden,
            fc_out,
        }
    }
}

struct BlockCache {
    input: Map,
    reduced: Map,
    middle: Map,
    output: Map,
}

struct TrunkCache {
    input: Map,
    stem: Map,
    pool_arg: Vec<u32>,
    blocks: Vec<BlockCache>,
    /// Trunk output (the last block's output).
    features: Map,
}

struct SizeCache {
    conv: Map,
    pooled: Vec<f64>,
    /// Flat index into `conv` of each channel's maximum.
    argmax: Vec<usize>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

/// Outputs of one training-mode pass.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub location_loss: f64,
    pub size_loss: f64,
    pub location_logits: Vec<f64>,
    pub size_logits: Vec<f64>,
}

/// Stage-one result, reusable for any number of stage-two size queries.
pub struct LocationStage {
    size_features: Map,
    pub location_probs: Vec<f64>,
}

/// The two-branch placement network.
#[derive(Clone)]
pub struct PlacementNet {
    config: NetworkConfig,
    seed: u64,
    params: ParamStore,
    layers: Layers,
    trained: bool,
    roi_observer: Option<RoiObserver>,
}

impl std::fmt::Debug for PlacementNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlacementNet")
            .field("config", &self.config)
            .field("seed", &self.seed)
            .field("parameters", &self.params.scalar_count())
            .field("trained", &self.trained)
            .finish()
    }
}

impl PlacementNet {
    /// Builds a freshly initialized network. Its weights are random, so it is flagged as
    /// untrained until it is trained or [`mark_trained`](Self::mark_trained) is called.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layers = Layers::build(&config, &mut params, seed);
        Ok(PlacementNet {
            config,
            seed,
            params,
            layers,
            trained: false,
            roi_observer: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Installs a callback invoked with the cell and its source every time the size branch
    /// slices its ROI.
    pub fn set_roi_observer(&mut self, observer: Option<RoiObserver>) {
        self.roi_observer = observer;
    }

    pub fn input_len(&self) -> usize {
        let s = self.config.input_size;
        self.config.input_channels * s * s
    }

    fn input_map(&self, input: &[f64]) -> Result<Map> {
        if input.len() != self.input_len() {
            return Err(Error::invalid(format!(
                "network expects {} input values ({}x{s}x{s}), got {}",
                self.input_len(),
                self.config.input_channels,
                input.len(),
                s = self.config.input_size
            )));
        }
        let s = self.config.input_size;
        Ok(Map::from_data(self.config.input_channels, s, s, input.to_vec()))
    }

    fn observe(&self, cell: GridCell, source: RoiSource) {
        if let Some(obs) = &self.roi_observer {
            obs(RoiTrace { cell, source });
        }
    }

    fn trunk(&self, input: Map) -> TrunkCache {
        let p = &self.params;
        let l = &self.layers;
        let mut stem = l.stem.forward(p, &input);
        stem.relu_in_place();
        let (pooled, pool_arg) = l.pool.forward(&stem);
        let mut x = pooled;
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let mut reduced = b.reduce.forward(p, &x);
            reduced.relu_in_place();
            let mut middle = b.middle.forward(p, &reduced);
            middle.relu_in_place();
            let mut output = b.expand.forward(p, &middle);
            output.add_assign(&b.shortcut.forward(p, &x));
            output.relu_in_place();
            let next = output.clone();
            blocks.push(BlockCache {
                input: x,
                reduced,
                middle,
                output,
            });
            x = next;
        }
        TrunkCache {
            input,
            stem,
            pool_arg,
            blocks,
            features: x,
        }
    }

    fn location_head(&self, features: &Map) -> (Map, Vec<f64>) {
        let mut hidden = self.layers.location_conv.forward(&self.params, features);
        hidden.relu_in_place();
        let logits = self.layers.location_out.forward(&self.params, &hidden).data;
        (hidden, logits)
    }

    fn size_features(&self, features: &Map) -> Map {
        let mut conv = self.layers.size_conv.forward(&self.params, features);
        conv.relu_in_place();
        conv
    }

    fn size_head(&self, conv: Map, cell: GridCell) -> SizeCache {
        let window = roi_window(cell, conv.h, self.config.roi_size);
        let plane = conv.h * conv.w;
        let mut pooled = vec![f64::NEG_INFINITY; conv.c];
        let mut argmax = vec![0usize; conv.c];
        for c in 0..conv.c {
            for &(r, col) in &window {
                let i = c * plane + r * conv.w + col;
                if conv.data[i] > pooled[c] {
                    pooled[c] = conv.data[i];
                    argmax[c] = i;
                }
            }
        }
        let mut hidden = self.layers.fc_hidden.forward(&self.params, &pooled);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = self.layers.fc_out.forward(&self.params, &hidden);
        SizeCache {
            conv,
            pooled,
            argmax,
            hidden,
            logits,
        }
    }

    /// Sum of the two cross-entropy losses with the ROI at the ground-truth location cell.
    pub fn loss(&self, input: &[f64], target_xy: GridCell, target_wh: GridCell) -> Result<f64> {
        self.check_cell(target_xy)?;
        self.check_cell(target_wh)?;
        let trunk = self.trunk(self.input_map(input)?);
        let (_, location_logits) = self.location_head(&trunk.features);
        self.observe(target_xy, RoiSource::GroundTruth);
        let size = self.size_head(self.size_features(&trunk.features), target_xy);
        let (a, _) = cross_entropy(&location_logits, target_xy.index);
        let (b, _) = cross_entropy(&size.logits, target_wh.index);
        Ok(a + b)
    }

    /// Forward and backward pass for one sample; gradients of
    /// `location_weight · CE_location + size_weight · CE_size` are added to `grads`.
    pub fn accumulate_gradients(
        &self,
        input: &[f64],
        target_xy: GridCell,
        target_wh: GridCell,
        weights: (f64, f64),
        grads: &mut Grads,
    ) -> Result<SampleOutput> {
        self.check_cell(target_xy)?;
        self.check_cell(target_wh)?;
        let p = &self.params;
        let l = &self.layers;
        let trunk = self.trunk(self.input_map(input)?);
        let features = &trunk.features;

        let (loc_hidden, location_logits) = self.location_head(features);
        let (location_loss, mut d_loc) = cross_entropy(&location_logits, target_xy.index);
        d_loc.iter_mut().for_each(|g| *g *= weights.0);

        self.observe(target_xy, RoiSource::GroundTruth);
        let size = self.size_head(self.size_features(features), target_xy);
        let (size_loss, mut d_size) = cross_entropy(&size.logits, target_wh.index);
        d_size.iter_mut().for_each(|g| *g *= weights.1);

        // location branch
        let g = self.config.grid_size;
        let d_loc = Map::from_data(1, g, g, d_loc);
        let mut d_hidden = l
            .location_out
            .backward(p, &loc_hidden, &d_loc, grads, true)
            .expect("dx requested");
        loc_hidden.relu_mask(&mut d_hidden);
        let mut d_features = l
            .location_conv
            .backward(p, features, &d_hidden, grads, true)
            .expect("dx requested");

        // size branch
        let mut d_fc_hidden = l.fc_out.backward(p, &size.hidden, &d_size, grads);
        for (d, &h) in d_fc_hidden.iter_mut().zip(&size.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let d_pooled = l.fc_hidden.backward(p, &size.pooled, &d_fc_hidden, grads);
        let mut d_conv = Map::zeros(size.conv.c, size.conv.h, size.conv.w);
        for (c, &i) in size.argmax.iter().enumerate() {
            d_conv.data[i] += d_pooled[c];
        }
        size.conv.relu_mask(&mut d_conv);
        let d_from_size = l
            .size_conv
            .backward(p, features, &d_conv, grads, true)
            .expect("dx requested");
        d_features.add_assign(&d_from_size);

        // trunk
        let mut d = d_features;
        for (b, cache) in l.blocks.iter().zip(&trunk.blocks).rev() {
            cache.output.relu_mask(&mut d);
            let mut dx = b
                .shortcut
                .backward(p, &cache.input, &d, grads, true)
                .expect("dx requested");
            let mut d_mid = b
                .expand
                .backward(p, &cache.middle, &d, grads, true)
                .expect("dx requested");
            cache.middle.relu_mask(&mut d_mid);
            let mut d_red = b
                .middle
                .backward(p, &cache.reduced, &d_mid, grads, true)
                .expect("dx requested");
            cache.reduced.relu_mask(&mut d_red);
            let d_in = b
                .reduce
                .backward(p, &cache.input, &d_red, grads, true)
                .expect("dx requested");
            dx.add_assign(&d_in);
            d = dx;
        }
        let mut d_stem = l.pool.backward(trunk.stem.shape(), &trunk.pool_arg, &d);
        trunk.stem.relu_mask(&mut d_stem);
        l.stem.backward(p, &trunk.input, &d_stem, grads, false);

        Ok(SampleOutput {
            location_loss,
            size_loss,
            location_logits,
            size_logits: size.logits,
        })
    }

    fn check_cell(&self, cell: GridCell) -> Result<()> {
        let g = self.config.grid_size;
        if cell.col >= g || cell.row >= g || cell.index != cell.row * g + cell.col {
            return Err(Error::invalid(format!("cell {cell:?} is not on the {g}x{g} grid")));
        }
        Ok(())
    }

    /// Stage one of inference: the location distribution plus cached size-branch features.
    pub fn location_stage(&self, input: &[f64]) -> Result<LocationStage> {
        let trunk = self.trunk(self.input_map(input)?);
        let (_, logits) = self.location_head(&trunk.features);
        Ok(LocationStage {
            size_features: self.size_features(&trunk.features),
            location_probs: softmax(&logits),
        })
    }

    /// Stage two of inference: the size distribution with the ROI at a predicted cell.
    pub fn size_stage(&self, stage: &LocationStage, cell: GridCell) -> Result<Vec<f64>> {
        self.check_cell(cell)?;
        self.observe(cell, RoiSource::Predicted);
        Ok(softmax(&self.size_head(stage.size_features.clone(), cell).logits))
    }

    /// Runs a full inference pass and records every activation's shape, in layer order.
    pub fn trace_shapes(&self, input: &[f64]) -> Result<Vec<(String, Vec<usize>)>> {
        let trunk = self.trunk(self.input_map(input)?);
        let mut out = vec![
            ("input".to_string(), trunk.input.shape().to_vec()),
            ("stem".to_string(), trunk.stem.shape().to_vec()),
        ];
        let first = trunk
            .blocks
            .first()
            .map(|b| b.input.shape().to_vec())
            .unwrap_or_default();
        out.push(("pool".to_string(), first));
        for (i, b) in trunk.blocks.iter().enumerate() {
            out.push((format!("block{}", i + 1), b.output.shape().to_vec()));
        }
        let (hidden, logits) = self.location_head(&trunk.features);
        let g = self.config.grid_size;
        out.push(("location_conv".to_string(), hidden.shape().to_vec()));
        debug_assert_eq!(logits.len(), g * g);
        out.push(("location_map".to_string(), vec![g, g]));
        let conv = self.size_features(&trunk.features);
        out.push(("size_conv".to_string(), conv.shape().to_vec()));
        let probs = softmax(&logits);
        let best = super::predict::top_k(&probs, 1)[0];
        let cell = self.config.grid().from_index(best)?;
        out.push((
            "roi_slice".to_string(),
            roi_slice(&conv, cell, self.config.roi_size).shape().to_vec(),
        ));
        let size = self.size_head(conv, cell);
        out.push(("global_max".to_string(), vec![size.pooled.len()]));
        out.push(("size_logits".to_string(), vec![size.logits.len()]));
        Ok(out)
    }

    pub(crate) fn from_parts(
        config: NetworkConfig,
        seed: u64,
        values: Vec<(String, Vec<usize>, Vec<f64>)>,
        trained: bool,
    ) -> Result<Self> {
        let mut net = PlacementNet::new(config, seed)?;
        if values.len() != net.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, network has {}", values.len(), net.params.len()),
            ));
        }
        for (i, (name, shape, data)) in values.into_iter().enumerate() {
            if name != net.params.names[i] || shape != net.params.shapes[i] {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor {i} is {name} {shape:?}, expected {} {:?}",
                        net.params.names[i], net.params.shapes[i]
                    ),
                ));
            }
            net.params.values[i] = data;
        }
        net.trained = trained;
        Ok(net)
    }
}
