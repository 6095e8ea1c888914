use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::layers::Grads;
use super::model::PlacementNet;
use super::predict::top_k;
use crate::error::{Error, Result};
use crate::geometry::GridCell;
use crate::pipeline::TrainingSample;

/// Samples per gradient chunk. Chunks are reduced in a fixed order so results do not depend
/// on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_step` epochs.
    pub lr_decay: f64,
    pub lr_step: usize,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub location_weight: f64,
    pub size_weight: f64,
    /// Seed of the shuffling order.
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            lr_step: 10,
            weight_decay: 0.0,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            location_weight: 1.0,
            size_weight: 1.0,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr_step > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.lr_decay > 0.0
            && self.weight_decay >= 0.0
            && self.location_weight >= 0.0
            && self.size_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters: {self:?}")))
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

/// A network input with its two target classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Planar input values, stored in single precision to halve memory.
    pub input: Vec<f32>,
    pub target_xy: GridCell,
    pub target_wh: GridCell,
}

impl Example {
    pub fn new(input: &[f64], target_xy: GridCell, target_wh: GridCell) -> Self {
        Example {
            input: input.iter().map(|&v| v as f32).collect(),
            target_xy,
            target_wh,
        }
    }

    pub fn from_sample(sample: &TrainingSample) -> Self {
        Example::new(&sample.scene.to_planes(), sample.target_xy, sample.target_wh)
    }

    pub fn planes(&self) -> Vec<f64> {
        self.input.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub location_loss: f64,
    pub size_loss: f64,
    pub location_top1: f64,
    pub location_top5: f64,
    pub size_top1: f64,
    pub size_top5: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss over the training set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    n: usize,
    location_loss: f64,
    size_loss: f64,
    location_top1: usize,
    location_top5: usize,
    size_top1: usize,
    size_top5: usize,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.n += o.n;
        self.location_loss += o.location_loss;
        self.size_loss += o.size_loss;
        self.location_top1 += o.location_top1;
        self.location_top5 += o.location_top5;
        self.size_top1 += o.size_top1;
        self.size_top5 += o.size_top5;
    }

    fn record(&mut self, loc_logits: &[f64], size_logits: &[f64], ex: &Example, losses: (f64, f64)) {
        let hit = |logits: &[f64], target: usize, k: usize| top_k(logits, k).contains(&target);
        self.n += 1;
        self.location_loss += losses.0;
        self.size_loss += losses.1;
        self.location_top1 += hit(loc_logits, ex.target_xy.index, 1) as usize;
        self.location_top5 += hit(loc_logits, ex.target_xy.index, 5) as usize;
        self.size_top1 += hit(size_logits, ex.target_wh.index, 1) as usize;
        self.size_top5 += hit(size_logits, ex.target_wh.index, 5) as usize;
    }

    fn metrics(&self, epoch: usize, learning_rate: f64, seconds: f64) -> EpochMetrics {
        let n = self.n.max(1) as f64;
        EpochMetrics {
            epoch,
            learning_rate,
            loss: (self.location_loss + self.size_loss) / n,
            location_loss: self.location_loss / n,
            size_loss: self.size_loss / n,
            location_top1: self.location_top1 as f64 / n,
            location_top5: self.location_top5 as f64 / n,
            size_top1: self.size_top1 as f64 / n,
            size_top5: self.size_top5 as f64 / n,
            seconds,
        }
    }
}

struct OptimizerState {
    first: Grads,
    second: Grads,
    steps: u32,
}

impl OptimizerState {
    fn step(&mut self, net: &mut PlacementNet, grads: &Grads, hp: &Hyperparams, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let params = &mut net.params_mut().values;
        for (i, values) in params.iter_mut().enumerate() {
            let g = &grads.0[i];
            let m = &mut self.first.0[i];
            let v = &mut self.second.0[i];
            for j in 0..values.len() {
                let grad = g[j] + hp.weight_decay * values[j];
                match hp.optimizer {
                    Optimizer::Sgd { momentum } => {
                        m[j] = momentum * m[j] + grad;
                        values[j] -= lr * m[j];
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
                        let m_hat = m[j] / (1.0 - beta1.powi(t));
                        let v_hat = v[j] / (1.0 - beta2.powi(t));
                        values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn write_line(log: &mut Option<&mut dyn Write>, value: serde_json::Value) -> Result<()> {
    if let Some(w) = log.as_mut() {
        writeln!(w, "{value}").map_err(|e| Error::io("<metrics log>", e))?;
    }
    Ok(())
}

/// Mean total loss over `examples` with ground-truth ROIs.
pub fn mean_loss(net: &PlacementNet, examples: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| net.loss(&ex.planes(), ex.target_xy, ex.target_wh))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len().max(1) as f64)
}

/// Trains `net` in place by minibatch descent on the weighted sum of the two cross-entropy
/// losses. Writes a config line, an initial-loss line and one line per epoch to `log` as
/// JSON. Fails with [`Error::Diverged`] as soon as a batch loss is not finite.
pub fn train(
    net: &mut PlacementNet,
    examples: &[Example],
    hp: &Hyperparams,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    hp.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("training needs at least one example"));
    }
    write_line(
        &mut log,
        json!({
            "event": "config",
            "hyperparams": hp,
            "network": net.config(),
            "init_seed": net.seed(),
            "examples": examples.len(),
        }),
    )?;
    let initial_loss = mean_loss(net, examples)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: initial_loss,
        });
    }
    write_line(&mut log, json!({"event": "init", "loss": initial_loss}))?;

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut state = OptimizerState {
        first: net.params().zeros_like(),
        second: net.params().zeros_like(),
        steps: 0,
    };
    let weights = (hp.location_weight, hp.size_weight);
    let mut report = TrainReport {
        initial_loss,
        epochs: Vec::with_capacity(hp.epochs),
    };
    let mut step = 0usize;
    for epoch in 0..hp.epochs {
        let started = Instant::now();
        let lr = hp.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        for batch in order.chunks(hp.batch_size) {
            let chunk_results: Vec<Result<(Grads, Tally)>> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grads = net.params().zeros_like();
                    let mut t = Tally::default();
                    for &i in chunk {
                        let ex = &examples[i];
                        let out = net.accumulate_gradients(
                            &ex.planes(),
                            ex.target_xy,
                            ex.target_wh,
                            weights,
                            &mut grads,
                        )?;
                        t.record(
                            &out.location_logits,
                            &out.size_logits,
                            ex,
                            (out.location_loss, out.size_loss),
                        );
                    }
                    Ok((grads, t))
                })
                .collect();
            let mut total: Option<Grads> = None;
            let mut batch_tally = Tally::default();
            for r in chunk_results {
                let (g, t) = r?;
                batch_tally.add(&t);
                match total.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => total = Some(g),
                }
            }
            let batch_loss =
                (batch_tally.location_loss + batch_tally.size_loss) / batch_tally.n as f64;
            let mut grads = total.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !grads.norm().is_finite() {
                let err = Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                };
                write_line(
                    &mut log,
                    json!({"event": "diverged", "epoch": epoch, "step": step, "loss": batch_loss.to_string()}),
                )?;
                return Err(err);
            }
            state.step(net, &grads, hp, lr);
            tally.add(&batch_tally);
            step += 1;
        }
        let metrics = tally.metrics(epoch + 1, lr, started.elapsed().as_secs_f64());
        log::info!(
            "epoch {} loss {:.4} loc@1 {:.3} size@1 {:.3}",
            metrics.epoch,
            metrics.loss,
            metrics.location_top1,
            metrics.size_top1
        );
        let mut line = serde_json::to_value(metrics)?;
        line["event"] = json!("epoch");
        write_line(&mut log, line)?;
        report.epochs.push(metrics);
    }
    net.mark_trained();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;
    use rand::Rng;

    fn random_example(net: &PlacementNet, seed: u64, xy: usize, wh: usize) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input: Vec<f64> = (0..net.input_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let grid = net.config().grid();
        Example::new(&input, grid.from_index(xy).unwrap(), grid.from_index(wh).unwrap())
    }

    #[test]
    fn single_example_is_memorized() {
        let mut net = PlacementNet::new(NetworkConfig::tiny(), 5).unwrap();
        let ex = random_example(&net, 1, 7, 19);
        let hp = Hyperparams {
            epochs: 40,
            batch_size: 1,
            learning_rate: 1e-2,
            lr_step: 1000,
            optimizer: Optimizer::adam(),
            ..Hyperparams::default()
        };
        let mut log = Vec::new();
        let report = train(&mut net, std::slice::from_ref(&ex), &hp, Some(&mut log)).unwrap();
        let last = report.last().unwrap();
        assert!(last.loss < 0.1 * report.initial_loss, "{last:?}");
        assert!(net.is_trained());
        let lines: Vec<serde_json::Value> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2 + 40);
        assert_eq!(lines[0]["event"], "config");
        assert_eq!(lines[0]["hyperparams"]["batch_size"], 1);
        assert_eq!(lines[2]["event"], "epoch");
        assert!(lines[41]["location_top5"].is_number());
    }

    #[test]
    fn training_is_reproducible() {
        let base = PlacementNet::new(NetworkConfig::tiny(), 5).unwrap();
        let examples: Vec<Example> = (0..6)
            .map(|i| random_example(&base, i, i as usize * 3, 24 - i as usize))
            .collect();
        let hp = Hyperparams {
            epochs: 2,
            batch_size: 5,
            ..Hyperparams::default()
        };
        let mut a = base.clone();
        let mut b = base.clone();
        let ra = train(&mut a, &examples, &hp, None).unwrap();
        let rb = train(&mut b, &examples, &hp, None).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra.epochs[1].loss, rb.epochs[1].loss);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut net = PlacementNet::new(NetworkConfig::tiny(), 5).unwrap();
        let mut examples: Vec<Example> = (0..4).map(|i| random_example(&net, i, 3, 4)).collect();
        examples[2].input[17] = f32::NAN;
        let hp = Hyperparams {
            epochs: 2,
            batch_size: 2,
            ..Hyperparams::default()
        };
        assert!(matches!(
            train(&mut net, &examples, &hp, None),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut net = PlacementNet::new(NetworkConfig::tiny(), 5).unwrap();
        assert!(train(&mut net, &[], &Hyperparams::default(), None).is_err());
    }
}
