//! Losses, optimiser, learning-rate schedule, gradient checking and the
//! training loop.

mod gradcheck;
mod loss;
mod optim;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use loss::{contextnet_loss, cross_entropy, downsample_label_batch, ContextNetLoss, LossGrad, AUX_WEIGHT};
pub use optim::{apply_weight_decay, rmsprop_update, PolyLr, RmsProp, RmsPropConfig};

use crate::data::{augment, stack_batch, AugmentConfig, SegSample};
use crate::graph::ForwardOptions;
use crate::{Error, Graph, Mark, Result, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub aux_weight: f64,
    /// ℓ2 coefficient on standard and pointwise kernels.
    pub weight_decay: f64,
    pub rmsprop: RmsPropConfig,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            base_lr: 0.045,
            lr_power: 0.98,
            aux_weight: AUX_WEIGHT,
            weight_decay: 4e-5,
            rmsprop: RmsPropConfig::default(),
            augment: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || self.aux_weight < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rate and loss weights must be non-negative".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub main: f64,
    pub aux: f64,
    pub lr: f64,
}

/// Owns a graph and its optimiser state for the duration of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub graph: Graph,
    pub optimizer: RmsProp,
    pub schedule: PolyLr,
    pub config: TrainConfig,
    pub iteration: usize,
    rng: Rng,
}

impl Trainer {
    /// `max_iter` for the schedule is `epochs × batches per epoch`.
    pub fn new(graph: Graph, config: TrainConfig, samples: usize) -> Result<Self> {
        config.validate()?;
        for mark in [Mark::FullLogits] {
            if graph.mark(mark).is_none() {
                return Err(Error::InvalidArgument(format!("graph lacks a {mark:?} output")));
            }
        }
        let schedule = PolyLr {
            base_rate: config.base_lr,
            power: config.lr_power,
            max_iter: config.epochs * config.batches_per_epoch(samples),
        };
        let optimizer = RmsProp::new(&graph, config.rmsprop);
        let rng = crate::seeded_rng(config.seed);
        Ok(Trainer { graph, optimizer, schedule, config, iteration: 0, rng })
    }

    /// Forward, loss, backward, weight decay, optimiser update and running
    /// statistics update on one batch.
    pub fn step(&mut self, images: &Tensor, labels: &[u8]) -> Result<StepStats> {
        let acts = self.graph.forward(core::slice::from_ref(images), &ForwardOptions::training(), &mut self.rng)?;
        let full = self.graph.mark(Mark::FullLogits).expect("checked in new");
        let aux_node = self.graph.mark(Mark::AuxLogits).filter(|_| self.config.aux_weight > 0.0);
        let loss = contextnet_loss(acts.get(full), aux_node.map(|a| acts.get(a)), labels, self.config.aux_weight)?;
        let mut seeds = alloc::vec![(full, loss.grad_final)];
        if let (Some(a), Some(g)) = (aux_node, loss.grad_aux) {
            seeds.push((a, g));
        }
        let mut grads = self.graph.backward(&acts, &seeds)?;
        let penalty = apply_weight_decay(&self.graph, &mut grads, self.config.weight_decay);
        let lr = self.schedule.lr(self.iteration);
        self.optimizer.step(&mut self.graph, &grads, lr)?;
        self.graph.update_running_stats(&acts);
        self.iteration += 1;
        Ok(StepStats { loss: loss.total + penalty, main: loss.main, aux: loss.aux, lr })
    }

    /// One pass over `samples` in a freshly shuffled order.
    pub fn epoch(&mut self, samples: &[SegSample]) -> Result<Vec<StepStats>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut stats = Vec::with_capacity(self.config.batches_per_epoch(samples.len()));
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<SegSample> = match &self.config.augment {
                Some(cfg) => chunk.iter().map(|&i| augment(&samples[i], cfg, &mut self.rng)).collect::<Result<_>>()?,
                None => chunk.iter().map(|&i| samples[i].clone()).collect(),
            };
            let refs: Vec<&SegSample> = batch.iter().collect();
            let (images, labels) = stack_batch(&refs)?;
            stats.push(self.step(&images, &labels)?);
        }
        Ok(stats)
    }

    /// [`recalibrate_batch_norm`] at the configured batch size.
    pub fn recalibrate_batch_norm(&mut self, samples: &[SegSample]) -> Result<()> {
        recalibrate_batch_norm(&mut self.graph, samples, self.config.batch_size)
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

/// Re-estimates every batch-norm running average as the equal-weight mean
/// of training-mode batch statistics over `samples`, taken in order with
/// the current weights. After a short run the moving averages still trail
/// the weights; this replaces them with statistics of the final model.
pub fn recalibrate_batch_norm(graph: &mut Graph, samples: &[SegSample], batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    // Dropout only follows the last batch norm, so this stream never
    // affects the statistics.
    let mut rng = crate::seeded_rng(0);
    for (seen, chunk) in samples.chunks(batch_size).enumerate() {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, _) = stack_batch(&refs)?;
        let acts = graph.forward(core::slice::from_ref(&images), &ForwardOptions::training(), &mut rng)?;
        graph.average_running_stats(&acts, seen);
    }
    Ok(())
}

/// Means of consecutive non-overlapping windows of `window` values.
pub fn windowed_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks_exact(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
}
