use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::evaluate_source;
use crate::autodiff::{optimizer_step, OptimizerMode, OptimizerState};
use crate::error::{invalid, Error, Result};
use crate::metamodels::{EpisodeOutcome, MetaModel};
use crate::taskgen::{EpisodeSource, EpisodeSpec, RngStream};
use crate::techniques::multiobjective::{accumulate_combined_grad, AuxObjective};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub mode: OptimizerMode,
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mode: OptimizerMode::Adaptive,
            lr: 2e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn state(&self) -> OptimizerState {
        OptimizerState::new(self.mode, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    #[serde(default = "default_meta_batch")]
    pub meta_batch: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub spec: EpisodeSpec,
    #[serde(default)]
    pub seed: u64,
    /// Episodes drawn from the validation source after every epoch; 0 skips it.
    #[serde(default)]
    pub val_episodes: usize,
}

fn default_meta_batch() -> usize {
    4
}

impl TrainConfig {
    pub fn new(spec: EpisodeSpec, epochs: usize, episodes_per_epoch: usize, seed: u64) -> Self {
        Self {
            episodes_per_epoch,
            epochs,
            meta_batch: default_meta_batch(),
            optimizer: OptimizerConfig::default(),
            spec,
            seed,
            val_episodes: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.episodes_per_epoch == 0 || self.meta_batch == 0 {
            return Err(invalid("episodes_per_epoch and meta_batch must be at least 1"));
        }
        if !(self.optimizer.lr >= 0.0) || !self.optimizer.lr.is_finite() {
            return Err(Error::InvalidLearningRate(self.optimizer.lr));
        }
        Ok(())
    }

    /// Stream of training episode `episode` in epoch `epoch` (1-based).
    pub fn episode_stream(&self, epoch: usize, episode: usize) -> RngStream {
        RngStream::new(self.seed)
            .child("train")
            .index(epoch as u64)
            .index(episode as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub meta_train_loss: f64,
    pub meta_train_acc: f64,
    pub meta_val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
}

impl TrainingCurve {
    pub const CSV_HEADER: &'static str = "epoch,meta_train_loss,meta_train_acc,meta_val_acc";

    /// `epoch,meta_train_loss,meta_train_acc,meta_val_acc`; the last column is
    /// empty when no validation source was given.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let val = e.meta_val_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.meta_train_loss, e.meta_train_acc, val);
        }
        out
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Episodic meta-ERM: for every meta-batch, averages the validation losses of
/// freshly sampled episodes, backpropagates into the meta parameters and takes
/// one optimizer step. A learning rate of exactly 0 runs the forward passes
/// but leaves the parameters untouched.
pub fn meta_train(
    model: MetaModel,
    train: &dyn EpisodeSource,
    val: Option<&dyn EpisodeSource>,
    config: &TrainConfig,
) -> Result<(MetaModel, TrainingCurve)> {
    meta_train_with(model, train, val, config, None)
}

/// [`meta_train`] with an optional auxiliary objective sharing the backbone.
pub fn meta_train_with(
    mut model: MetaModel,
    train: &dyn EpisodeSource,
    val: Option<&dyn EpisodeSource>,
    config: &TrainConfig,
    mut aux: Option<&mut AuxObjective<'_>>,
) -> Result<(MetaModel, TrainingCurve)> {
    config.validate()?;
    let mut curve = TrainingCurve::default();
    if config.epochs == 0 {
        return Ok((model, curve));
    }
    let mut opt = config.optimizer.state();
    let mut aux_opt = config.optimizer.state();
    let update = config.optimizer.lr > 0.0;
    model.zero_grads();

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut start = 0;
        while start < config.episodes_per_epoch {
            let end = (start + config.meta_batch).min(config.episodes_per_epoch);
            let weight = 1.0 / (end - start) as f64;
            for idx in start..end {
                let stream = config.episode_stream(epoch, idx);
                let episode = train.sample(&config.spec, &stream)?;
                let outcome = match aux.as_deref_mut() {
                    None => model.accumulate_episode_grad(&episode, weight),
                    Some(a) => {
                        let (x, y) = a.sample_batch(&stream.child("aux"))?;
                        accumulate_combined_grad(&mut model, a, &episode, &x, &y, weight)
                    }
                }
                .map_err(|e| diverged(e, epoch))?;
                let EpisodeOutcome { loss, accuracy } = outcome;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                loss_sum += loss;
                acc_sum += accuracy;
            }
            if update {
                optimizer_step(&mut model.params_mut(), &mut opt).map_err(|e| diverged(e, epoch))?;
                if let Some(a) = aux.as_deref_mut() {
                    optimizer_step(&mut a.head.params_mut(), &mut aux_opt).map_err(|e| diverged(e, epoch))?;
                }
            } else {
                model.zero_grads();
                if let Some(a) = aux.as_deref_mut() {
                    a.head.params_mut().into_iter().for_each(|p| p.clear_grad());
                }
            }
            start = end;
        }
        let n = config.episodes_per_epoch as f64;
        let meta_val_acc = match val {
            Some(v) if config.val_episodes > 0 => Some(
                evaluate_source(&model, v, &config.spec, config.val_episodes, RngStream::new(config.seed).child("val"), None)?
                    .mean,
            ),
            _ => None,
        };
        curve.epochs.push(EpochStats {
            epoch,
            meta_train_loss: loss_sum / n,
            meta_train_acc: acc_sum / n,
            meta_val_acc,
        });
    }
    model.zero_grads();
    Ok((model, curve))
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}
