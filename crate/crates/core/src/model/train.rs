// SPDX-License-Identifier: Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, learning_rate, AdamHyper, AdamState};
use super::{EncodedExample, Model, Real};
use crate::error::{Error, Result};

const SHUFFLE_SALT: u64 = 0x5eed_0f_ba7c_0e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Examples per update.
    pub batch_size: usize,
    pub lr_scale: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub adam: AdamHyper,
    pub clip_norm: f64,
    pub log_every: u64,
    /// Drives batch order and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr_scale: 1.0,
            warmup_steps: 400,
            adam: AdamHyper::default(),
            clip_norm: 1.0,
            log_every: 50,
            seed: 1,
        }
    }
}

/// One Adam update on `batch` with gradients clipped to `config.clip_norm`.
/// `dropout` supplies the mask generator; `None` trains without dropout.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamState<T>,
    batch: &[EncodedExample],
    config: &TrainConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let step = opt.t + 1;
    let (loss, mut grads) = model.loss_and_grad(batch, dropout)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            msg: format!("non-finite loss {loss}"),
        });
    }
    let norm = clip_global_norm(&mut grads, config.clip_norm);
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step,
            msg: format!("non-finite gradient norm {norm} at loss {loss}"),
        });
    }
    let lr = learning_rate(step, model.config.d_model, config.lr_scale, config.warmup_steps);
    opt.update(&mut model.params, &grads, lr, &config.adam);
    if let Some(i) = model.params.iter().position(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            step,
            msg: format!("parameter {i} became non-finite (lr {lr:.3e}, grad norm {norm:.3e})"),
        });
    }
    Ok(loss)
}

/// Owns a model, its optimizer state and the training data; batch order and
/// dropout are pure functions of `(seed, step)`, so a trainer rebuilt from a
/// checkpoint continues exactly where the original left off.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub opt: AdamState<T>,
    pub config: TrainConfig,
    data: Vec<EncodedExample>,
    epoch: Option<(u64, Vec<usize>)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, data: Vec<EncodedExample>) -> Result<Trainer<T>> {
        let opt = AdamState::new(model.n_params());
        Self::resume(model, opt, config, data)
    }

    pub fn resume(model: Model<T>, opt: AdamState<T>, config: TrainConfig, data: Vec<EncodedExample>) -> Result<Trainer<T>> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no training data".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if opt.m.len() != model.n_params() || opt.v.len() != model.n_params() {
            return Err(Error::InvalidInput("optimizer state does not match the model".into()));
        }
        for ex in &data {
            model.check_example(ex)?;
        }
        Ok(Trainer {
            model,
            opt,
            config,
            data,
            epoch: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.t
    }

    pub fn data(&self) -> &[EncodedExample] {
        &self.data
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SHUFFLE_SALT);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
            self.epoch = Some((epoch, order));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    /// Dataset indices of the batch consumed by 0-based update `step`.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.config.batch_size as u64;
        (step * b..(step + 1) * b)
            .map(|g| {
                let (epoch, i) = (g / n, (g % n) as usize);
                self.epoch_order(epoch)[i]
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.opt.t;
        let batch: Vec<EncodedExample> = self
            .batch_indices(step)
            .into_iter()
            .map(|i| self.data[i].clone())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let dropout = (self.model.config.dropout_rate > 0.0).then_some(&mut rng);
        train_step(&mut self.model, &mut self.opt, &batch, &self.config, dropout)
    }

    /// Trains until `config.steps` updates have been applied. Every
    /// `log_every` steps the mean loss since the previous log is passed to
    /// `on_log` and appended to the returned curve.
    pub fn run(&mut self, mut on_log: impl FnMut(u64, f64)) -> Result<Vec<(u64, f64)>> {
        self.run_until(self.config.steps, &mut on_log)
    }

    pub fn run_until(&mut self, until: u64, mut on_log: impl FnMut(u64, f64)) -> Result<Vec<(u64, f64)>> {
        let every = self.config.log_every.max(1);
        let mut curve = Vec::new();
        let mut acc = 0.0;
        let mut k = 0u64;
        while self.step() < until {
            acc += self.train_step()?;
            k += 1;
            if self.step() % every == 0 || self.step() == until {
                let mean = acc / k as f64;
                on_log(self.step(), mean);
                curve.push((self.step(), mean));
                acc = 0.0;
                k = 0;
            }
        }
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PeMode, Precision};

    fn tiny_model(dropout: f64) -> Model<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 32,
            max_len: 12,
            src_vocab_size: 14,
            tgt_vocab_size: 14,
            dropout_rate: dropout,
            label_smoothing: 0.0,
            precision: Precision::Float64,
            ..ModelConfig::default()
        };
        Model::new(cfg).unwrap()
    }

    fn one_example() -> Vec<EncodedExample> {
        vec![EncodedExample {
            source: vec![4, 7, 8, 9],
            target: vec![10, 11, 12],
            pe_mode: PeMode::Sinusoidal,
        }]
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut m = tiny_model(0.1);
        let before = m.params.clone();
        let mut opt = AdamState::new(m.n_params());
        let cfg = TrainConfig { lr_scale: 0.0, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_step(&mut m, &mut opt, &one_example(), &cfg, Some(&mut rng)).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn overfits_a_single_example() {
        let cfg = TrainConfig {
            steps: 120,
            batch_size: 1,
            lr_scale: 2.0,
            warmup_steps: 20,
            log_every: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_model(0.0), cfg, one_example()).unwrap();
        let curve = t.run(|_, _| {}).unwrap();
        let after_warmup: Vec<f64> = curve.iter().skip(20).map(|&(_, l)| l).collect();
        let non_increasing = after_warmup.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(
            non_increasing as f64 >= 0.9 * (after_warmup.len() - 1) as f64,
            "{non_increasing} of {}",
            after_warmup.len() - 1
        );
        assert!(after_warmup.last().unwrap() < &0.05);
    }

    #[test]
    fn identical_runs_give_identical_curves() {
        let data: Vec<EncodedExample> = (0..6)
            .map(|i| EncodedExample {
                source: vec![4, 7 + i, 8],
                target: vec![9 + i % 3, 10],
                pe_mode: PeMode::Sinusoidal,
            })
            .collect();
        let cfg = TrainConfig { steps: 15, batch_size: 4, log_every: 1, ..TrainConfig::default() };
        let run = || {
            let mut t = Trainer::new(tiny_model(0.1), cfg.clone(), data.clone()).unwrap();
            (t.run(|_, _| {}).unwrap(), t.model.params.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batches_cover_each_epoch_exactly_once() {
        let data: Vec<EncodedExample> = (0..10).map(|_| one_example().remove(0)).collect();
        let cfg = TrainConfig { batch_size: 5, ..TrainConfig::default() };
        let mut t = Trainer::new(tiny_model(0.0), cfg, data).unwrap();
        let mut seen: Vec<usize> = t.batch_indices(0);
        seen.extend(t.batch_indices(1));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
