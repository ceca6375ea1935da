//! Training loop: batched SGD over augmented samples, poly learning-rate
//! decay, CSV loss logging, and periodic checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::save_checkpoint;
use crate::error::{MatteError, Result};
use crate::img::{Image, Sample};
use crate::loss::{total_loss_nodes, LossBreakdown, LossConfig};
use crate::loss::LossTargets;
use crate::model::{Model, ModelConfig};
use crate::nn::{GraphBuilder, BN_MOMENTUM};
use crate::optim::{poly_lr, Sgd};
use crate::parallel;
use crate::synth::{augment, load_manifest, load_split, SynthConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dataset root written by `synth`; its manifest also supplies the
    /// augmentation settings.
    pub dataset: PathBuf,
    /// Checkpoint cadence in iterations; defaults to max_iters/10.
    pub checkpoint_every: Option<usize>,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 4e-5,
            poly_power: 0.9,
            max_iters: 1000,
            batch_size: 4,
            seed: 0,
            dataset: PathBuf::from("data/desk"),
            checkpoint_every: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(MatteError::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MatteError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.poly_power <= 0.0 {
            return Err(MatteError::Config("poly_power must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(MatteError::Config("max_iters must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(MatteError::Config("batch_size must be at least 1".into()));
        }
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn poly_lr(&self, iter: usize) -> Result<f64> {
        poly_lr(iter, self.max_iters, self.base_lr, self.poly_power)
    }

    pub fn cadence(&self) -> usize {
        self.checkpoint_every.unwrap_or_else(|| (self.max_iters / 10).max(1))
    }
}

/// Loss breakdown and learning rate of one completed iteration. `iter` counts
/// from 1.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "iter,L_s,L_d,L_f,L_total,lr";

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter,
            self.loss.semantic,
            self.loss.detail,
            self.loss.fusion,
            self.loss.total,
            self.lr
        )
    }
}

/// Owns the model, optimizer, and dataset; advances one SGD iteration per
/// `step` call so callers can stop early or checkpoint at will.
pub struct Trainer {
    config: TrainConfig,
    synth_config: SynthConfig,
    samples: Vec<Sample>,
    model: Model,
    sgd: Sgd,
    rng: ChaCha8Rng,
    iter: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let manifest = load_manifest(&config.dataset)?;
        let samples = load_split(&config.dataset, "train")?;
        if samples.is_empty() {
            return Err(MatteError::Dataset("training split is empty".into()));
        }
        let model = Model::new(config.model.clone(), config.seed)?;
        let sgd = Sgd::new(config.momentum, config.weight_decay);
        // Offset so batch sampling does not replay the init stream.
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
        Ok(Trainer { config, synth_config: manifest.config, samples, model, sgd, rng, iter: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model, self.iter, Some(&self.sgd))
    }

    /// Runs one iteration: sample a batch with replacement, augment, forward,
    /// loss, backward, BatchNorm running-average update, SGD step. A batch
    /// size at or above the dataset size takes every sample exactly once
    /// instead; drawing 4 of 4 with replacement would only add duplicates.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.iter >= self.config.max_iters {
            return Err(MatteError::invalid("train", "all iterations already run"));
        }
        let lr = self.config.poly_lr(self.iter)?;
        let picks: Vec<usize> = if self.config.batch_size >= self.samples.len() {
            (0..self.samples.len()).collect()
        } else {
            (0..self.config.batch_size).map(|_| self.rng.gen_range(0..self.samples.len())).collect()
        };
        let seeds: Vec<u64> = (0..picks.len()).map(|_| self.rng.gen()).collect();
        let batch: Vec<Sample> = parallel::map_indexed(picks.len(), |b| {
            augment(&self.samples[picks[b]], seeds[b], &self.synth_config)
        });

        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let targets = LossTargets::from_samples(&refs);

        let (named, pendings, breakdown) = {
            let mut gb = GraphBuilder::new(&self.model.params, true);
            let input = gb.tape.constant(Tensor::from_images(&images));
            let fwd = self.model.forward(&mut gb, input, false)?;
            let nodes = total_loss_nodes(
                &mut gb.tape,
                fwd.probs,
                fwd.detail,
                fwd.alpha,
                &targets,
                &self.config.loss,
            );
            let breakdown = LossBreakdown {
                semantic: gb.tape.value(nodes.semantic).item(),
                detail: gb.tape.value(nodes.detail).item(),
                fusion: gb.tape.value(nodes.fusion).item(),
                total: gb.tape.value(nodes.total).item(),
            };
            if !breakdown.total.is_finite() {
                return Err(MatteError::invalid(
                    "train",
                    format!(
                        "non-finite loss at iteration {}: semantic {}, detail {}, fusion {}",
                        self.iter + 1,
                        breakdown.semantic,
                        breakdown.detail,
                        breakdown.fusion
                    ),
                ));
            }
            let grads = gb.tape.backward(nodes.total);
            (gb.param_grads(&grads), gb.take_bn_pending(), breakdown)
        };

        for pending in pendings {
            ema_update(self.model.params.get_mut(&pending.mean_name), &pending.batch_mean);
            ema_update(self.model.params.get_mut(&pending.var_name), &pending.batch_var);
        }
        self.sgd.step(&mut self.model.params, &named, lr);
        self.iter += 1;
        Ok(StepStats { iter: self.iter, lr, loss: breakdown })
    }
}

fn ema_update(stat: &mut Tensor, batch: &[f64]) {
    for (r, b) in stat.data_mut().iter_mut().zip(batch) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

/// Full run: every iteration logged to `out/loss_log.csv`, checkpoints under
/// `out/ckpt-NNNNNN` at the cadence, and a final checkpoint at `out/final`.
pub fn train(config: &TrainConfig, out: &Path) -> Result<Vec<StepStats>> {
    let mut trainer = Trainer::new(config.clone())?;
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(fs::File::create(out.join("loss_log.csv"))?);
    writeln!(log, "{LOG_HEADER}")?;
    let cadence = config.cadence();
    let mut history = Vec::with_capacity(config.max_iters);
    for _ in 0..config.max_iters {
        let stats = match trainer.step() {
            Ok(stats) => stats,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        writeln!(log, "{}", stats.csv_row())?;
        if stats.iter % cadence == 0 && stats.iter != config.max_iters {
            trainer.save(&out.join(format!("ckpt-{:06}", stats.iter)))?;
        }
        history.push(stats);
    }
    log.flush()?;
    trainer.save(&out.join("final"))?;
    Ok(history)
}
