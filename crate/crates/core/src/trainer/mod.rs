//! Pretraining, Monte-Carlo rollout policy gradients, teacher forcing and
//! the alternating adversarial loop.

mod config;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{RewardBaseline, TrainConfig};

use crate::corpus::{ProductRecord, Vocabulary};
use crate::discriminator::Discriminator;
use crate::encoder::{FeatureSource, ModelInput};
use crate::error::{Error, Result};
use crate::generator::{target_ids, Generator};
use crate::nn::Gradients;
use crate::optim::Adam;
use crate::policy::{reinforce_weights, sample_with_rewards, GenerationTrace};

/// One training pair: encoder input and gold target ids ending in EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub target: Vec<usize>,
}

/// Encodes records for training; every record needs a gold short title.
pub fn prepare_examples(
    records: &[ProductRecord],
    vocab: &Vocabulary,
    source: &FeatureSource,
    config: &TrainConfig,
) -> Result<Vec<Example>> {
    let enc = config.encoder_config();
    records
        .iter()
        .map(|r| {
            let short = r
                .short_title
                .as_ref()
                .ok_or_else(|| Error::data(format!("record {} has no short_title", r.label())))?;
            Ok(Example {
                input: ModelInput::from_record(r, vocab, source, &enc)?,
                target: target_ids(&vocab.encode(short), config.max_decode_len),
            })
        })
        .collect()
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub mean_reward: f64,
    pub d_loss: f64,
    pub g_mle_loss: f64,
    pub wallclock_s: Option<f64>,
}

/// Training progress, so an interrupted run can pick up where it stopped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub g_pretrain: usize,
    pub d_pretrain: usize,
    pub iteration: usize,
}

// RNG stream tags; each (tag, step) pair gets its own ChaCha stream.
const STREAM_INIT: u64 = 0;
const STREAM_G_PRETRAIN: u64 = 1;
const STREAM_D_PRETRAIN: u64 = 2;
const STREAM_D_STEP: u64 = 3;
const STREAM_PG: u64 = 4;
const STREAM_TF: u64 = 5;

/// Generator, discriminator, their optimisers and the run's progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    vocab: Vocabulary,
    generator: Generator,
    discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    baseline: Option<f64>,
    progress: Progress,
    started: Instant,
}

fn stream_rng(seed: u64, tag: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | step);
    rng
}

/// `batch` distinct indices, or all of `0..n` in order when `batch >= n`.
fn pick<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, batch).into_vec()
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut init = stream_rng(config.seed, STREAM_INIT, 0);
        let generator = Generator::new(config.generator_config(vocab.len()), init.gen())?;
        let discriminator = Discriminator::new(config.discriminator_config(vocab.len()), init.gen())?;
        Ok(Self::assemble(config, vocab, generator, discriminator))
    }

    fn assemble(config: TrainConfig, vocab: Vocabulary, generator: Generator, discriminator: Discriminator) -> Self {
        let g_opt = Adam::new(generator.params(), config.lr);
        let d_opt = Adam::new(discriminator.params(), config.lr);
        Trainer {
            config,
            vocab,
            generator,
            discriminator,
            g_opt,
            d_opt,
            baseline: None,
            progress: Progress::default(),
            started: Instant::now(),
        }
    }

    /// Rebuilds a trainer from saved state. Parameter and optimiser shapes
    /// must match what `config` and `vocab` imply.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        config: TrainConfig,
        vocab: Vocabulary,
        generator: &crate::nn::ParamStore,
        discriminator: &crate::nn::ParamStore,
        g_opt: Adam,
        d_opt: Adam,
        baseline: Option<f64>,
        progress: Progress,
    ) -> Result<Self> {
        let mut t = Trainer::new(config, vocab)?;
        t.generator
            .params_mut()
            .load_from(generator)
            .map_err(|e| Error::Shape(format!("generator: {e}")))?;
        t.discriminator
            .params_mut()
            .load_from(discriminator)
            .map_err(|e| Error::Shape(format!("discriminator: {e}")))?;
        g_opt.check_layout(t.generator.params())?;
        d_opt.check_layout(t.discriminator.params())?;
        t.g_opt = g_opt;
        t.d_opt = d_opt;
        t.g_opt.lr = t.config.lr;
        t.d_opt.lr = t.config.lr;
        t.baseline = baseline;
        t.progress = progress;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn discriminator_mut(&mut self) -> &mut Discriminator {
        &mut self.discriminator
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.g_opt, &self.d_opt)
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    fn seed_rng(&self, tag: u64, step: usize) -> ChaCha8Rng {
        stream_rng(self.config.seed, tag, step as u64)
    }

    fn apply_generator(&mut self, mut grads: Gradients) -> Gradients {
        grads.clip_global_norm(self.config.grad_clip);
        self.g_opt.step(self.generator.params_mut(), &grads);
        grads
    }

    fn apply_discriminator(&mut self, mut grads: Gradients) {
        grads.clip_global_norm(self.config.grad_clip);
        self.d_opt.step(self.discriminator.params_mut(), &grads);
    }

    /// Runs `steps` MLE updates; returns the per-token loss seen before each.
    pub fn pretrain_generator(&mut self, examples: &[Example], steps: usize) -> Result<Vec<f64>> {
        if steps > 0 && examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut rng = self.seed_rng(STREAM_G_PRETRAIN, self.progress.g_pretrain);
            let idx = pick(examples.len(), self.config.batch_g, &mut rng);
            let batch: Vec<(&ModelInput, &[usize])> = idx
                .iter()
                .map(|&i| (&examples[i].input, examples[i].target.as_slice()))
                .collect();
            let (loss, grads) = self.generator.mle_loss_and_grad(&batch)?;
            self.apply_generator(grads);
            losses.push(loss);
            self.progress.g_pretrain += 1;
        }
        Ok(losses)
    }

    /// Samples one sequence per chosen example from the current generator.
    pub fn sample_fakes<R: Rng>(&self, examples: &[Example], idx: &[usize], rng: &mut R) -> Result<Vec<Vec<usize>>> {
        idx.iter()
            .map(|&i| {
                let enc = self.generator.encode(&examples[i].input)?;
                Ok(self.generator.sample_sequence(&enc, rng).ids)
            })
            .collect()
    }

    /// One discriminator update on half gold titles, half fresh samples.
    fn discriminator_step(&mut self, examples: &[Example], rng: &mut ChaCha8Rng) -> Result<f64> {
        let half = (self.config.batch_d / 2).max(1);
        let real_idx = pick(examples.len(), half, rng);
        let fake_idx = pick(examples.len(), half, rng);
        let fakes = self.sample_fakes(examples, &fake_idx, rng)?;
        let real: Vec<&[usize]> = real_idx.iter().map(|&i| examples[i].target.as_slice()).collect();
        let fake: Vec<&[usize]> = fakes.iter().map(Vec::as_slice).collect();
        let (loss, grads) = self
            .discriminator
            .d_loss_and_grad(&real, &fake, self.config.d_objective)?;
        self.apply_discriminator(grads);
        Ok(loss)
    }

    pub fn pretrain_discriminator(&mut self, examples: &[Example], steps: usize) -> Result<Vec<f64>> {
        if steps > 0 && examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut rng = self.seed_rng(STREAM_D_PRETRAIN, self.progress.d_pretrain);
            losses.push(self.discriminator_step(examples, &mut rng)?);
            self.progress.d_pretrain += 1;
        }
        Ok(losses)
    }

    /// Fraction of `real` scored above 0.5 plus `fake` scored below it.
    pub fn discriminator_accuracy(&self, real: &[&[usize]], fake: &[&[usize]]) -> Result<f64> {
        let mut correct = 0;
        for ids in real {
            correct += usize::from(self.discriminator.score(ids)? > 0.5);
        }
        for ids in fake {
            correct += usize::from(self.discriminator.score(ids)? < 0.5);
        }
        Ok(correct as f64 / (real.len() + fake.len()).max(1) as f64)
    }

    /// Samples a trace for `input` and fills in its rollout rewards.
    pub fn sample_scored<R: Rng>(&self, input: &ModelInput, rng: &mut R) -> Result<GenerationTrace> {
        let enc = self.generator.encode(input)?;
        Ok(sample_with_rewards(
            &self.generator,
            &enc,
            &self.discriminator,
            self.config.n_rollouts,
            rng,
        ))
    }

    /// REINFORCE update on given sequences and per-step rewards. Applies the
    /// configured baseline, normalises by the total token count, clips and
    /// steps the generator optimiser. Returns the applied gradient.
    pub fn policy_gradient_update(&mut self, items: &[(&ModelInput, &[usize], &[f64])]) -> Result<Gradients> {
        let all: Vec<f64> = items.iter().flat_map(|(_, _, r)| r.iter().copied()).collect();
        if all.is_empty() {
            return Err(Error::invalid("policy gradient batch has no steps"));
        }
        let batch_mean = mean(&all);
        let b = match self.config.reward_baseline {
            RewardBaseline::None => 0.0,
            RewardBaseline::RunningMean => {
                let prev = self.baseline.unwrap_or(batch_mean);
                let d = self.config.baseline_decay;
                self.baseline = Some(d * prev + (1.0 - d) * batch_mean);
                prev
            }
        };
        let weights: Vec<Vec<f64>> = items.iter().map(|(_, _, r)| reinforce_weights(r, b)).collect();
        let weighted: Vec<(&ModelInput, &[usize], &[f64])> = items
            .iter()
            .zip(&weights)
            .map(|((input, ids, _), w)| (*input, *ids, w.as_slice()))
            .collect();
        let (_, grads) = self.generator.surrogate_loss_and_grad(&weighted, all.len() as f64)?;
        Ok(self.apply_generator(grads))
    }

    /// Samples one trace per batch item, scores every step by Monte-Carlo
    /// rollouts against the fixed discriminator and takes one policy
    /// gradient step. Returns the mean per-step reward before any baseline.
    pub fn policy_gradient_step(&mut self, inputs: &[&ModelInput], rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut traces = Vec::with_capacity(inputs.len());
        for input in inputs {
            let mut item_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            traces.push(self.sample_scored(input, &mut item_rng)?);
        }
        let items: Vec<(&ModelInput, &[usize], &[f64])> = inputs
            .iter()
            .zip(&traces)
            .map(|(input, t)| (*input, t.ids.as_slice(), t.step_rewards.as_slice()))
            .collect();
        let all: Vec<f64> = traces.iter().flat_map(|t| t.step_rewards.iter().copied()).collect();
        self.policy_gradient_update(&items)?;
        Ok(mean(&all))
    }

    /// One MLE step on gold pairs. Returns the loss before the update and
    /// the applied gradient.
    pub fn teacher_forcing_step(&mut self, batch: &[(&ModelInput, &[usize])]) -> Result<(f64, Gradients)> {
        if batch.is_empty() || batch.iter().any(|(_, ids)| ids.is_empty()) {
            return Err(Error::invalid("teacher forcing needs non-empty gold titles"));
        }
        let (loss, grads) = self.generator.mle_loss_and_grad(batch)?;
        Ok((loss, self.apply_generator(grads)))
    }

    /// `d_steps` discriminator updates, then `g_steps` rounds of a policy
    /// gradient step followed (if enabled) by a teacher-forcing step.
    pub fn adversarial_iteration(&mut self, examples: &[Example]) -> Result<IterationMetrics> {
        if examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let it = self.progress.iteration;
        let mut d_losses = Vec::new();
        for k in 0..self.config.d_steps {
            let mut rng = self.seed_rng(STREAM_D_STEP, it * self.config.d_steps + k);
            d_losses.push(self.discriminator_step(examples, &mut rng)?);
        }
        let mut rewards = Vec::new();
        let mut mle = Vec::new();
        for k in 0..self.config.g_steps {
            let step = it * self.config.g_steps + k;
            let mut rng = self.seed_rng(STREAM_PG, step);
            let idx = pick(examples.len(), self.config.batch_g, &mut rng);
            let inputs: Vec<&ModelInput> = idx.iter().map(|&i| &examples[i].input).collect();
            rewards.push(self.policy_gradient_step(&inputs, &mut rng)?);

            let mut rng = self.seed_rng(STREAM_TF, step);
            let idx = pick(examples.len(), self.config.batch_g, &mut rng);
            let batch: Vec<(&ModelInput, &[usize])> = idx
                .iter()
                .map(|&i| (&examples[i].input, examples[i].target.as_slice()))
                .collect();
            if self.config.teacher_forcing {
                mle.push(self.teacher_forcing_step(&batch)?.0);
            } else {
                mle.push(self.generator.mle_loss(&batch)?);
            }
        }
        self.progress.iteration += 1;
        Ok(IterationMetrics {
            iter: self.progress.iteration,
            mean_reward: mean(&rewards),
            d_loss: mean(&d_losses),
            g_mle_loss: mean(&mle),
            wallclock_s: self
                .config
                .log_wallclock
                .then(|| self.started.elapsed().as_secs_f64()),
        })
    }

    /// Finishes whatever remains of generator pretraining, discriminator
    /// pretraining and the adversarial iterations, calling `on_iteration`
    /// after each iteration.
    pub fn train<F>(&mut self, examples: &[Example], mut on_iteration: F) -> Result<()>
    where
        F: FnMut(&Trainer, &IterationMetrics) -> Result<()>,
    {
        let g_left = self.config.pretrain_steps.saturating_sub(self.progress.g_pretrain);
        self.pretrain_generator(examples, g_left)?;
        let d_left = self.config.d_pretrain_steps.saturating_sub(self.progress.d_pretrain);
        self.pretrain_discriminator(examples, d_left)?;
        while self.progress.iteration < self.config.train_steps {
            let m = self.adversarial_iteration(examples)?;
            on_iteration(self, &m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, CorpusStats, SynthOptions};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            batch_g: 4,
            batch_d: 8,
            n_rollouts: 2,
            vocab_max_size: 60,
            min_frequency: 1,
            embed_dim: 6,
            title_hidden: 8,
            title_layers: 1,
            attr_hidden: 5,
            fusion_dim: 8,
            image_dim: 4,
            decoder_hidden: 8,
            decoder_layers: 1,
            max_decode_len: 6,
            disc_embed_dim: 4,
            disc_hidden: 6,
            pretrain_steps: 2,
            d_pretrain_steps: 2,
            train_steps: 2,
            ..TrainConfig::default()
        }
    }

    fn setup(cfg: &TrainConfig) -> (Trainer, Vec<Example>) {
        let mut opts = SynthOptions::new(12, 5, CorpusStats::reference(), 40);
        opts.image_dim = cfg.image_dim;
        let recs = synth_corpus(&opts);
        let vocab = Vocabulary::build(&recs, cfg.min_frequency, cfg.vocab_max_size).unwrap();
        let ex = prepare_examples(&recs, &vocab, &FeatureSource::Precomputed, cfg).unwrap();
        (Trainer::new(cfg.clone(), vocab).unwrap(), ex)
    }

    #[test]
    fn zero_steps_leave_parameters_alone() {
        let cfg = tiny_config();
        let (mut t, ex) = setup(&cfg);
        let (g, d) = (t.generator().params().clone(), t.discriminator().params().clone());
        assert!(t.pretrain_generator(&ex, 0).unwrap().is_empty());
        assert!(t.pretrain_discriminator(&ex, 0).unwrap().is_empty());
        assert_eq!(t.generator().params(), &g);
        assert_eq!(t.discriminator().params(), &d);
    }

    #[test]
    fn each_player_only_moves_its_own_parameters() {
        let cfg = tiny_config();
        let (mut t, ex) = setup(&cfg);
        let d0 = t.discriminator().params().clone();
        let g0 = t.generator().params().clone();
        t.pretrain_generator(&ex, 1).unwrap();
        let inputs: Vec<&ModelInput> = ex.iter().take(3).map(|e| &e.input).collect();
        t.policy_gradient_step(&inputs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t.discriminator().params(), &d0);
        assert_ne!(t.generator().params(), &g0);
        let g1 = t.generator().params().clone();
        t.pretrain_discriminator(&ex, 1).unwrap();
        assert_eq!(t.generator().params(), &g1);
        assert_ne!(t.discriminator().params(), &d0);
    }

    #[test]
    fn zero_rewards_give_zero_update() {
        let cfg = tiny_config();
        let (mut t, ex) = setup(&cfg);
        let g0 = t.generator().params().clone();
        let zeros: Vec<Vec<f64>> = ex.iter().map(|e| vec![0.0; e.target.len()]).collect();
        let items: Vec<(&ModelInput, &[usize], &[f64])> = ex
            .iter()
            .zip(&zeros)
            .map(|(e, z)| (&e.input, e.target.as_slice(), z.as_slice()))
            .collect();
        let g = t.policy_gradient_update(&items).unwrap();
        assert!(g.is_zero());
        assert_eq!(t.generator().params(), &g0);
    }

    #[test]
    fn teacher_forcing_descends_and_rejects_empty_gold() {
        let cfg = TrainConfig { lr: 1e-3, ..tiny_config() };
        let (mut t, ex) = setup(&cfg);
        let batch: Vec<(&ModelInput, &[usize])> =
            ex.iter().take(4).map(|e| (&e.input, e.target.as_slice())).collect();
        let (before, _) = t.teacher_forcing_step(&batch).unwrap();
        let after = t.generator().mle_loss(&batch).unwrap();
        assert!(after < before, "{before} -> {after}");
        assert!(t.teacher_forcing_step(&[]).is_err());
        assert!(t.teacher_forcing_step(&[(&ex[0].input, &[])]).is_err());
    }

    #[test]
    fn running_mean_baseline_tracks_rewards() {
        let cfg = TrainConfig {
            reward_baseline: RewardBaseline::RunningMean,
            baseline_decay: 0.5,
            ..tiny_config()
        };
        let (mut t, ex) = setup(&cfg);
        let r1 = vec![1.0; ex[0].target.len()];
        t.policy_gradient_update(&[(&ex[0].input, &ex[0].target, &r1)]).unwrap();
        assert_eq!(t.baseline(), Some(1.0));
        let r0 = vec![0.0; ex[0].target.len()];
        t.policy_gradient_update(&[(&ex[0].input, &ex[0].target, &r0)]).unwrap();
        assert_eq!(t.baseline(), Some(0.5));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny_config();
        let run = || {
            let (mut t, ex) = setup(&cfg);
            let mut log = Vec::new();
            t.train(&ex, |_, m| {
                log.push(m.clone());
                Ok(())
            })
            .unwrap();
            (t, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(la.len(), 2);
        assert!(la.iter().all(|m| m.wallclock_s.is_none()));
        assert_eq!(a.generator().params(), b.generator().params());

        // stop after one iteration, restore, finish
        let (mut t, ex) = setup(&TrainConfig { train_steps: 1, ..cfg.clone() });
        t.train(&ex, |_, _| Ok(())).unwrap();
        let (g, d) = t.optimizers();
        let mut resumed = Trainer::restore(
            cfg.clone(),
            t.vocab().clone(),
            t.generator().params(),
            t.discriminator().params(),
            g.clone(),
            d.clone(),
            t.baseline(),
            t.progress(),
        )
        .unwrap();
        let mut tail = Vec::new();
        resumed
            .train(&ex, |_, m| {
                tail.push(m.clone());
                Ok(())
            })
            .unwrap();
        assert_eq!(tail, la[1..]);
        assert_eq!(resumed.generator().params(), a.generator().params());
        assert_eq!(resumed.discriminator().params(), a.discriminator().params());
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let cfg = tiny_config();
        let (t, _) = setup(&cfg);
        let (g, d) = t.optimizers();
        let wider = TrainConfig { decoder_hidden: 9, ..cfg };
        let err = Trainer::restore(
            wider,
            t.vocab().clone(),
            t.generator().params(),
            t.discriminator().params(),
            g.clone(),
            d.clone(),
            None,
            Progress::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }
}
