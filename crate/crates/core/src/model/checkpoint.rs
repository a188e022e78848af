// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, EncodedExample, Model, ModelConfig, Precision, Real, TrainConfig, Trainer};
use crate::corpus::VocabPair;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "xlsum-checkpoint/1";

/// Everything random during training is derived from `(seed, step)`, so this
/// pair is the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

/// Serialized model, optimizer and vocabularies. Values are stored as f64,
/// which holds f32 parameters exactly, and JSON floats round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabPair,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: u64,
    pub rng: RngState,
}

/// A loaded model in whichever precision it was trained.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn widen<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}

fn narrow<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::of(x)).collect()
}

impl Checkpoint {
    pub fn from_trainer<T: Real>(trainer: &Trainer<T>, vocab: &VocabPair) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: trainer.model.config.clone(),
            train: trainer.config.clone(),
            vocab: vocab.clone(),
            params: widen(&trainer.model.params),
            adam_m: widen(&trainer.opt.m),
            adam_v: widen(&trainer.opt.v),
            step: trainer.step(),
            rng: RngState {
                seed: trainer.config.seed,
                step: trainer.step(),
            },
        }
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unknown checkpoint format {:?}", self.format)));
        }
        self.model.validate()?;
        if self.vocab.src.size() != self.model.src_vocab_size || self.vocab.tgt.size() != self.model.tgt_vocab_size {
            return Err(Error::VocabMismatch(format!(
                "checkpoint vocabularies have {}/{} entries, model expects {}/{}",
                self.vocab.src.size(),
                self.vocab.tgt.size(),
                self.model.src_vocab_size,
                self.model.tgt_vocab_size
            )));
        }
        Ok(())
    }

    pub fn model<T: Real>(&self) -> Result<Model<T>> {
        self.check()?;
        if T::PRECISION != self.model.precision {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds a {:?} model, requested {:?}",
                self.model.precision,
                T::PRECISION
            )));
        }
        Model::from_params(self.model.clone(), narrow(&self.params))
    }

    pub fn any_model(&self) -> Result<AnyModel> {
        Ok(match self.model.precision {
            Precision::Float32 => AnyModel::F32(self.model()?),
            Precision::Float64 => AnyModel::F64(self.model()?),
        })
    }

    /// Rebuilds the trainer so that further steps match an uninterrupted run.
    /// `config` may extend `steps`; everything else should be unchanged.
    pub fn trainer<T: Real>(&self, config: TrainConfig, data: Vec<EncodedExample>) -> Result<Trainer<T>> {
        let model = self.model::<T>()?;
        let n = model.n_params();
        if self.adam_m.len() != n || self.adam_v.len() != n {
            return Err(Error::InvalidInput("checkpoint optimizer state has the wrong size".into()));
        }
        let opt = AdamState {
            m: narrow(&self.adam_m),
            v: narrow(&self.adam_v),
            t: self.step,
        };
        Trainer::resume(model, opt, config, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ck.check()?;
        Ok(ck)
    }
}
