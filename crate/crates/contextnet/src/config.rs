//! Flat `key = value` run configuration with `--set` overrides.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use contextnet_core::arch::ContextNetConfig;
use contextnet_core::data::AugmentConfig;
use contextnet_core::prune::PruneSchedule;
use contextnet_core::train::{RmsPropConfig, TrainConfig};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub downsample: usize,
    pub width_multiplier: f64,
    pub use_ppm: bool,
    pub dropout: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub aux_weight: f64,
    pub weight_decay: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_momentum: f64,
    pub rmsprop_epsilon: f64,
    /// Validation mIoU is computed every this many epochs (and after the last).
    pub eval_every: usize,

    pub augment: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub hue: f64,
    pub saturation: f64,
    pub brightness: f64,
    pub contrast: f64,

    /// Synthetic data used when no dataset directory is given.
    pub train_samples: usize,
    pub val_samples: usize,
    pub data_seed: u64,

    pub prune_schedule: Vec<f64>,
    pub finetune_epochs: usize,
    /// Re-estimate batch-norm statistics on the training set after the last epoch.
    pub bn_recalibrate: bool,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        let rms = RmsPropConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            classes: 4,
            height: 128,
            width: 256,
            downsample: 4,
            width_multiplier: 1.0,
            use_ppm: false,
            dropout: 0.1,
            epochs: 1,
            batch_size: train.batch_size,
            base_lr: train.base_lr,
            lr_power: train.lr_power,
            aux_weight: train.aux_weight,
            weight_decay: train.weight_decay,
            rmsprop_rho: rms.rho,
            rmsprop_momentum: rms.momentum,
            rmsprop_epsilon: rms.epsilon,
            eval_every: 1,
            augment: false,
            scale_min: aug.scale_range.0,
            scale_max: aug.scale_range.1,
            flip_prob: aug.flip_prob,
            hue: aug.hue,
            saturation: aug.saturation,
            brightness: aug.brightness,
            contrast: aug.contrast,
            train_samples: 64,
            val_samples: 16,
            data_seed: 0,
            prune_schedule: PruneSchedule::default().multipliers,
            finetune_epochs: 6,
            bn_recalibrate: true,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        pub const KEYS: &[&str] = &[$(stringify!($name)),*];

        impl RunConfig {
            /// Sets one key; `Ok(false)` for an unknown key.
            fn set_known(&mut self, key: &str, value: &str) -> Result<bool> {
                match key {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    "prune_schedule" => self.prune_schedule = parse_list(key, value)?,
                    _ => return Ok(false),
                }
                Ok(true)
            }

            /// Canonical text form; parsing it gives back the same config.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($name), self.$name);)*
                let list: Vec<String> = self.prune_schedule.iter().map(f64::to_string).collect();
                let _ = writeln!(s, "prune_schedule = {}", list.join(","));
                s
            }
        }
    };
}

fields!(
    classes, height, width, downsample, width_multiplier, use_ppm, dropout, epochs, batch_size, base_lr,
    lr_power, aux_weight, weight_decay, rmsprop_rho, rmsprop_momentum, rmsprop_epsilon, eval_every, augment,
    scale_min, scale_max, flip_prob, hue, saturation, brightness, contrast, train_samples, val_samples,
    data_seed, finetune_epochs, bn_recalibrate, seed,
);

impl RunConfig {
    /// Applies `key = value` pairs; every unknown key is reported at once.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            if !self.set_known(k, v)? {
                unknown.push(k.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut cfg = RunConfig::default();
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| e.in_file(path))
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut pairs = Vec::new();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            pairs.push((k.trim(), v.trim()));
        }
        self.apply(pairs)
    }

    pub fn model(&self) -> ContextNetConfig {
        ContextNetConfig {
            num_classes: self.classes,
            input_size: (self.height, self.width),
            context_downsample: self.downsample,
            width_multiplier: self.width_multiplier,
            use_ppm: self.use_ppm,
            dropout_rate: self.dropout,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            lr_power: self.lr_power,
            aux_weight: self.aux_weight,
            weight_decay: self.weight_decay,
            rmsprop: RmsPropConfig { rho: self.rmsprop_rho, momentum: self.rmsprop_momentum, epsilon: self.rmsprop_epsilon },
            augment: self.augment.then_some(AugmentConfig {
                scale_range: (self.scale_min, self.scale_max),
                flip_prob: self.flip_prob,
                hue: self.hue,
                saturation: self.saturation,
                brightness: self.brightness,
                contrast: self.contrast,
            }),
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> PruneSchedule {
        PruneSchedule { multipliers: self.prune_schedule.clone(), finetune_epochs: self.finetune_epochs }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}
