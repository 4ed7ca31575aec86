//! Attention decoder defining the generation policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, NUM_RESERVED, PAD};
use crate::encoder::{
    attend_vars, encode_vars, fuse_vars, EncodedProduct, EncodedVars, Encoder, EncoderConfig,
    EncoderParams, ModelInput,
};
use crate::error::{Error, Result};
use crate::nn::{
    log_softmax_masked, lstm_stack_step, Gradients, LstmLayer, LstmState, LstmStateVars, ParamId,
    ParamStore, Tape, Var,
};
pub use crate::policy::{DecodeMode, GenerationTrace};
use crate::policy::{greedy_trace, sample_trace, score_sequence, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub max_decode_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 512,
            layers: 2,
            max_decode_len: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {NUM_RESERVED} reserved ids"
            )));
        }
        if self.decoder.hidden == 0 || self.decoder.layers == 0 {
            return Err(Error::Config("decoder hidden and layers must be >= 1".into()));
        }
        if self.decoder.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub encoder: EncoderParams,
    pub decoder: Vec<LstmLayer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Decoder state between steps: per-layer LSTM state and the last token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub lstm: LstmState,
    pub prev: usize,
}

/// Generator parameters (encoder included) plus the policy they define.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    ids: GeneratorParams,
    allowed: Vec<bool>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let dec = &config.decoder;
        let encoder = EncoderParams::register(&mut store, enc, config.vocab_size, dec.hidden, &mut rng);
        let decoder = (0..dec.layers)
            .map(|l| {
                let input = if l == 0 {
                    enc.embed_dim + enc.fusion_dim
                } else {
                    dec.hidden
                };
                LstmLayer::register(&mut store, &format!("dec.lstm.{l}"), input, dec.hidden, &mut rng)
            })
            .collect();
        let out_w = store.uniform(
            "dec.out.w",
            config.vocab_size,
            dec.hidden,
            1.0 / (dec.hidden as f64).sqrt(),
            &mut rng,
        );
        let out_b = store.zeros("dec.out.b", config.vocab_size, 1);
        let mut allowed = vec![true; config.vocab_size];
        allowed[PAD] = false;
        allowed[BOS] = false;
        Ok(Generator {
            config,
            params: store,
            ids: GeneratorParams {
                encoder,
                decoder,
                out_w,
                out_b,
            },
            allowed,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_ids(&self) -> &GeneratorParams {
        &self.ids
    }

    /// Output-layer mask: PAD and BOS are never emitted.
    pub fn allowed_outputs(&self) -> &[bool] {
        &self.allowed
    }

    pub fn encoder(&self) -> Encoder<'_> {
        Encoder {
            params: &self.params,
            ids: &self.ids.encoder,
            config: &self.config.encoder,
        }
    }

    pub fn encode(&self, input: &ModelInput) -> Result<EncodedProduct> {
        self.encoder().encode(input)
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            lstm: LstmState::zeros(&self.ids.decoder),
            prev: BOS,
        }
    }

    /// One decoder step on a tape: attend with `h_{t-1}`, fuse, run the
    /// LSTM on `[embed(s_{t-1}); C_t]` and project to vocabulary logits.
    fn step_vars(
        &self,
        tape: &mut Tape,
        enc: &EncodedVars,
        state: &LstmStateVars,
        prev: usize,
    ) -> (LstmStateVars, Var) {
        let p = &self.ids.encoder;
        let (ctx, _) = attend_vars(tape, p, state.top(), &enc.keys, &enc.o, &enc.mask);
        let c = fuse_vars(tape, p, ctx, enc.v, enc.u);
        let emb = tape.row(p.embed, prev);
        let x = tape.concat(&[emb, c]);
        let next = lstm_stack_step(tape, &self.ids.decoder, x, state);
        let logits = tape.affine(self.ids.out_w, Some(self.ids.out_b), next.top());
        (next, logits)
    }

    /// Returns the next decoder state and the distribution over the vocabulary.
    pub fn decode_step(&self, state: &DecoderState, encoded: &EncodedProduct) -> (DecoderState, Vec<f64>) {
        let (lp, next) = self.step_log_probs(state, encoded);
        (next, lp.into_iter().map(f64::exp).collect())
    }

    fn step_log_probs(&self, state: &DecoderState, encoded: &EncodedProduct) -> (Vec<f64>, DecoderState) {
        let mut tape = Tape::new(&self.params);
        let enc = encoded.to_tape(&mut tape);
        let st = state.lstm.to_tape(&mut tape);
        let (next, logits) = self.step_vars(&mut tape, &enc, &st, state.prev);
        let lp = log_softmax_masked(tape.value(logits), Some(&self.allowed));
        (
            lp,
            DecoderState {
                lstm: LstmState::from_tape(&tape, &next),
                prev: state.prev,
            },
        )
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, encoded: &EncodedProduct, rng: &mut R) -> GenerationTrace {
        sample_trace(self, encoded, rng)
    }

    pub fn sample_sequence_seeded(&self, encoded: &EncodedProduct, seed: u64) -> GenerationTrace {
        self.sample_sequence(encoded, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn greedy_decode(&self, encoded: &EncodedProduct) -> GenerationTrace {
        greedy_trace(self, encoded)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| !self.allowed[id]) {
            return Err(Error::invalid(format!("id {bad} (PAD/BOS) is never a valid target")));
        }
        Ok(())
    }

    /// Teacher-forced per-step log-probabilities of `ids`.
    pub fn log_prob(&self, ids: &[usize], encoded: &EncodedProduct) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        Ok(score_sequence(self, encoded, ids))
    }

    /// `sum_t weights[t] * log pi(ids[t] | ids[..t], C)` on a tape, with
    /// gradients flowing into both encoder and decoder.
    fn weighted_log_likelihood_vars(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        ids: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let enc = encode_vars(tape, &self.ids.encoder, &self.config.encoder, input)?;
        let mut state = crate::nn::zero_state(tape, &self.ids.decoder);
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(ids.len());
        for &tok in ids {
            let (next, logits) = self.step_vars(tape, &enc, &state, prev);
            terms.push(tape.log_softmax_pick(logits, tok, Some(&self.allowed)));
            state = next;
            prev = tok;
        }
        Ok(tape.weighted_total(&terms, weights))
    }

    /// Loss `-(1/normalizer) sum_b sum_t w_bt log pi(s_bt)` and its gradient.
    pub fn surrogate_loss_and_grad(
        &self,
        items: &[(&ModelInput, &[usize], &[f64])],
        normalizer: f64,
    ) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(&self.params);
        let mut total = 0.0;
        for (input, ids, weights) in items {
            self.check_ids(ids)?;
            if ids.len() != weights.len() {
                return Err(Error::invalid("ids and weights differ in length"));
            }
            if ids.is_empty() {
                continue;
            }
            let mut tape = Tape::new(&self.params);
            let ll = self.weighted_log_likelihood_vars(&mut tape, input, ids, weights)?;
            let loss = tape.scale(ll, -1.0 / normalizer);
            total += tape.scalar(loss);
            tape.backward(loss, &mut grads);
        }
        Ok((total, grads))
    }

    /// Per-token negative log-likelihood of gold sequences and its gradient.
    pub fn mle_loss_and_grad(&self, batch: &[(&ModelInput, &[usize])]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let ones: Vec<Vec<f64>> = batch.iter().map(|(_, ids)| vec![1.0; ids.len()]).collect();
        let items: Vec<(&ModelInput, &[usize], &[f64])> = batch
            .iter()
            .zip(&ones)
            .map(|((input, ids), w)| (*input, *ids, w.as_slice()))
            .collect();
        let tokens: usize = batch.iter().map(|(_, ids)| ids.len()).sum();
        if tokens == 0 {
            return Err(Error::invalid("batch has no target tokens"));
        }
        self.surrogate_loss_and_grad(&items, tokens as f64)
    }

    pub fn mle_loss(&self, batch: &[(&ModelInput, &[usize])]) -> Result<f64> {
        Ok(self.mle_loss_and_grad(batch)?.0)
    }
}

impl Policy for Generator {
    type Context = EncodedProduct;
    type State = DecoderState;

    fn initial_state(&self, _: &EncodedProduct) -> DecoderState {
        Generator::initial_state(self)
    }

    fn next_log_probs(&self, ctx: &EncodedProduct, state: &DecoderState) -> (Vec<f64>, DecoderState) {
        self.step_log_probs(state, ctx)
    }

    fn feed(&self, mut state: DecoderState, token: usize) -> DecoderState {
        state.prev = token;
        state
    }

    fn is_terminal(&self, ids: &[usize]) -> bool {
        ids.last() == Some(&EOS) || ids.len() >= self.config.decoder.max_decode_len
    }
}

/// Gold target ids: the encoded short title followed by EOS, truncated so
/// the EOS always fits within `max_decode_len`.
pub fn target_ids(short_ids: &[usize], max_decode_len: usize) -> Vec<usize> {
    let keep = short_ids.len().min(max_decode_len.saturating_sub(1));
    let mut ids = short_ids[..keep].to_vec();
    ids.push(EOS);
    ids
}

/// Strips a trailing EOS.
pub fn strip_eos(ids: &[usize]) -> &[usize] {
    match ids.last() {
        Some(&EOS) => &ids[..ids.len() - 1],
        _ => ids,
    }
}
