//! Single-file JSON archive of a training run's full state.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::trainer::{Progress, TrainConfig, Trainer};

pub const CHECKPOINT_FORMAT: &str = "mmtitlegen-checkpoint/1";

/// Parameters of both players with config, seed, vocabulary, optimiser
/// moments and progress counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub progress: Progress,
    /// Non-reserved vocabulary tokens in id order.
    pub vocab: Vec<String>,
    pub vocab_min_frequency: usize,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub g_optimizer: Adam,
    pub d_optimizer: Adam,
    pub baseline: Option<f64>,
}

impl ModelCheckpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let (g, d) = t.optimizers();
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: t.config().clone(),
            seed: t.config().seed,
            progress: t.progress(),
            vocab: t.vocab().tokens().to_vec(),
            vocab_min_frequency: t.vocab().min_frequency(),
            generator: t.generator().params().clone(),
            discriminator: t.discriminator().params().clone(),
            g_optimizer: g.clone(),
            d_optimizer: d.clone(),
            baseline: t.baseline(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab.iter().cloned(), self.vocab_min_frequency)
    }

    /// Rebuilds the trainer under the archived config.
    pub fn into_trainer(self) -> Result<Trainer> {
        let config = self.config.clone();
        self.into_trainer_with(config)
    }

    /// Rebuilds the trainer under `config`; fails with a shape error when
    /// the archived tensors do not fit the model `config` describes.
    pub fn into_trainer_with(self, config: TrainConfig) -> Result<Trainer> {
        let vocab = self.vocabulary();
        Trainer::restore(
            config,
            vocab,
            &self.generator,
            &self.discriminator,
            self.g_optimizer,
            self.d_optimizer,
            self.baseline,
            self.progress,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::data(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ModelCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: not a checkpoint: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "{}: unsupported checkpoint format {:?}",
                path.display(),
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}
