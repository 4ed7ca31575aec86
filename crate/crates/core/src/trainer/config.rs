use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::{DObjective, DiscriminatorConfig, DISCRIMINATOR_LAYERS};
use crate::encoder::{EncoderConfig, ImageSourceKind};
use crate::error::{Error, Result};
use crate::generator::{DecoderConfig, GeneratorConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardBaseline {
    #[default]
    None,
    /// Exponential moving average of past batch mean rewards.
    RunningMean,
}

/// Every knob of a training run, as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub pretrain_steps: usize,
    pub d_pretrain_steps: usize,
    pub train_steps: usize,
    pub batch_g: usize,
    pub batch_d: usize,
    pub n_rollouts: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub teacher_forcing: bool,
    pub reward_baseline: RewardBaseline,
    pub baseline_decay: f64,
    pub d_objective: DObjective,
    pub grad_clip: f64,
    pub seed: u64,

    pub vocab_max_size: usize,
    pub min_frequency: usize,
    pub embed_dim: usize,
    pub title_hidden: usize,
    pub title_layers: usize,
    pub attr_hidden: usize,
    pub fusion_dim: usize,
    pub max_title_len: usize,
    pub image_dim: usize,
    pub image_source: ImageSourceKind,
    pub use_attributes: bool,
    pub use_image: bool,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub max_decode_len: usize,
    pub disc_embed_dim: usize,
    pub disc_hidden: usize,

    /// Write a checkpoint every this many adversarial iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Record elapsed seconds in the metrics log; off keeps logs byte-stable.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        TrainConfig {
            lr: 1e-3,
            pretrain_steps: 500,
            d_pretrain_steps: 100,
            train_steps: 500,
            batch_g: 256,
            batch_d: 512,
            n_rollouts: 7,
            d_steps: 1,
            g_steps: 1,
            teacher_forcing: true,
            reward_baseline: RewardBaseline::None,
            baseline_decay: 0.9,
            d_objective: DObjective::Bce,
            grad_clip: 5.0,
            seed: 0,
            vocab_max_size: 35_000,
            min_frequency: 8,
            embed_dim: enc.embed_dim,
            title_hidden: enc.title_hidden,
            title_layers: enc.title_layers,
            attr_hidden: enc.attr_hidden,
            fusion_dim: enc.fusion_dim,
            max_title_len: enc.max_title_len,
            image_dim: enc.image_dim,
            image_source: ImageSourceKind::Precomputed,
            use_attributes: true,
            use_image: true,
            decoder_hidden: dec.hidden,
            decoder_layers: dec.layers,
            max_decode_len: dec.max_decode_len,
            disc_embed_dim: 128,
            disc_hidden: 512,
            checkpoint_every: 100,
            log_wallclock: false,
        }
    }
}

impl TrainConfig {
    /// Step counts and sizes of the original full-scale setup.
    pub fn full_scale() -> Self {
        TrainConfig {
            pretrain_steps: 10_000,
            train_steps: 13_000,
            ..TrainConfig::default()
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        let counts = [
            ("batch_g", self.batch_g),
            ("batch_d", self.batch_d),
            ("n_rollouts", self.n_rollouts),
            ("d_steps", self.d_steps),
            ("g_steps", self.g_steps),
            ("min_frequency", self.min_frequency),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.batch_d < 2 {
            return Err(Error::Config("batch_d must be >= 2 to hold real and fake halves".into()));
        }
        if self.vocab_max_size < 5 {
            return Err(Error::Config("vocab_max_size must be >= 5".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay must be in [0, 1)".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        self.encoder_config().validate()?;
        DiscriminatorConfig::new(5, self.disc_embed_dim, self.disc_hidden).validate()?;
        if self.decoder_hidden == 0 || self.decoder_layers == 0 || self.max_decode_len == 0 {
            return Err(Error::Config(
                "decoder_hidden, decoder_layers and max_decode_len must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            title_hidden: self.title_hidden,
            title_layers: self.title_layers,
            attr_hidden: self.attr_hidden,
            image_dim: self.image_dim,
            fusion_dim: self.fusion_dim,
            max_title_len: self.max_title_len,
            use_attributes: self.use_attributes,
            use_image: self.use_image,
        }
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size,
            encoder: self.encoder_config(),
            decoder: DecoderConfig {
                hidden: self.decoder_hidden,
                layers: self.decoder_layers,
                max_decode_len: self.max_decode_len,
            },
        }
    }

    pub fn discriminator_config(&self, vocab_size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab_size,
            embed_dim: self.disc_embed_dim,
            hidden: self.disc_hidden,
            layers: DISCRIMINATOR_LAYERS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.n_rollouts, 7);
        assert_eq!((c.batch_g, c.batch_d), (256, 512));
        assert_eq!((c.d_steps, c.g_steps), (1, 1));
        assert_eq!((c.vocab_max_size, c.min_frequency), (35_000, 8));
        assert_eq!((c.title_hidden, c.decoder_hidden, c.disc_hidden), (512, 512, 512));
        assert_eq!((c.title_layers, c.decoder_layers), (2, 2));
        assert_eq!(c.attr_hidden, 100);
        assert_eq!((c.pretrain_steps, c.train_steps), (500, 500));
        let full = TrainConfig::full_scale();
        assert_eq!((full.pretrain_steps, full.train_steps), (10_000, 13_000));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = TrainConfig::from_json_str(r#"{"lr": 0.01, "n_rolouts": 3}"#).unwrap_err();
        assert!(err.to_string().contains("n_rolouts"), "{err}");
    }

    #[test]
    fn partial_files_fill_defaults_and_round_trip() {
        let c = TrainConfig::from_json_str(r#"{"seed": 9, "reward_baseline": "running_mean"}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.reward_baseline, RewardBaseline::RunningMean);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_json_str(&text).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_json_str(r#"{"lr": 0}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"n_rollouts": 0}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"title_hidden": 0}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"image_source": "vgg"}"#).is_err());
    }
}
