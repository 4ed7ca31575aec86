//! Two-layer LSTM classifier scoring how likely a title is human-written.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lstm_stack_step, zero_state, Gradients, LstmLayer, ParamId, ParamStore, Tape, Var};
use crate::policy::SequenceScorer;

pub const DISCRIMINATOR_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl DiscriminatorConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            embed_dim,
            hidden,
            layers: DISCRIMINATOR_LAYERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != DISCRIMINATOR_LAYERS {
            return Err(Error::Config(format!(
                "discriminator uses exactly {DISCRIMINATOR_LAYERS} LSTM layers, got {}",
                self.layers
            )));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("discriminator dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Discriminator training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DObjective {
    /// `-mean log D(real) - mean log(1 - D(fake))`.
    #[default]
    Bce,
    /// Literal difference of logs: `-mean log D(real) + mean log D(fake)`.
    LogDiff,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub embed: ParamId,
    pub lstm: Vec<LstmLayer>,
    pub w_d: ParamId,
    pub b_d: ParamId,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    ids: DiscriminatorParams,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.uniform("disc.embed", config.vocab_size, config.embed_dim, 1.0, &mut rng);
        let lstm = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.embed_dim } else { config.hidden };
                LstmLayer::register(&mut store, &format!("disc.lstm.{l}"), input, config.hidden, &mut rng)
            })
            .collect();
        let w_d = store.uniform(
            "disc.w_d",
            1,
            config.hidden,
            1.0 / (config.hidden as f64).sqrt(),
            &mut rng,
        );
        let b_d = store.zeros("disc.b_d", 1, 1);
        Ok(Discriminator {
            config,
            params: store,
            ids: DiscriminatorParams {
                embed,
                lstm,
                w_d,
                b_d,
            },
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_ids(&self) -> &DiscriminatorParams {
        &self.ids
    }

    /// Pre-sigmoid logit `W_d h_N + b_d` with `h_N` the final top-layer state.
    fn logit_vars(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::invalid("cannot score an empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::invalid(format!("id {bad} out of range")));
        }
        let mut state = zero_state(tape, &self.ids.lstm);
        for &id in ids {
            let x = tape.row(self.ids.embed, id);
            state = lstm_stack_step(tape, &self.ids.lstm, x, &state);
        }
        Ok(tape.affine(self.ids.w_d, Some(self.ids.b_d), state.top()))
    }

    /// Probability in (0, 1) that `ids` is human-written.
    pub fn score(&self, ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let logit = self.logit_vars(&mut tape, ids)?;
        let p = tape.sigmoid(logit);
        Ok(tape.scalar(p))
    }

    pub fn d_loss(&self, real: &[&[usize]], fake: &[&[usize]], objective: DObjective) -> Result<f64> {
        Ok(self.d_loss_and_grad(real, fake, objective)?.0)
    }

    /// Loss and gradient w.r.t. the discriminator parameters only; fake
    /// sequences are plain ids, so nothing reaches the generator.
    pub fn d_loss_and_grad(
        &self,
        real: &[&[usize]],
        fake: &[&[usize]],
        objective: DObjective,
    ) -> Result<(f64, Gradients)> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::invalid("d_loss needs non-empty real and fake batches"));
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let mut total = 0.0;
        let groups: [(&[&[usize]], bool); 2] = [(real, true), (fake, false)];
        for (batch, is_real) in groups {
            let n = batch.len() as f64;
            for ids in batch {
                let mut tape = Tape::new(&self.params);
                let logit = self.logit_vars(&mut tape, ids)?;
                // log D = log_sigmoid(z); log(1 - D) = log_sigmoid(-z)
                let loss = match (is_real, objective) {
                    (true, _) => {
                        let l = tape.log_sigmoid(logit);
                        tape.scale(l, -1.0 / n)
                    }
                    (false, DObjective::Bce) => {
                        let neg = tape.scale(logit, -1.0);
                        let l = tape.log_sigmoid(neg);
                        tape.scale(l, -1.0 / n)
                    }
                    (false, DObjective::LogDiff) => {
                        let l = tape.log_sigmoid(logit);
                        tape.scale(l, 1.0 / n)
                    }
                };
                total += tape.scalar(loss);
                tape.backward(loss, &mut grads);
            }
        }
        Ok((total, grads))
    }
}

impl SequenceScorer for Discriminator {
    fn score(&self, ids: &[usize]) -> f64 {
        Discriminator::score(self, ids).expect("rollout sequences are non-empty and in range")
    }
}
