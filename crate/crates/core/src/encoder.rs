//! Multi-modal encoder: title LSTM states, attribute features, image
//! features, additive attention and the fused conditioning vector.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ProductRecord, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::nn::{lstm_stack_step, zero_state, LstmLayer, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub title_hidden: usize,
    pub title_layers: usize,
    /// Output width M' of the attribute encoder.
    pub attr_hidden: usize,
    /// Image feature width Z.
    pub image_dim: usize,
    /// Width of the fused vector C.
    pub fusion_dim: usize,
    pub max_title_len: usize,
    /// When false the attribute vector U is replaced by zeros.
    pub use_attributes: bool,
    /// When false the image vector V is replaced by zeros.
    pub use_image: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 128,
            title_hidden: 512,
            title_layers: 2,
            attr_hidden: 100,
            image_dim: 16,
            fusion_dim: 512,
            max_title_len: 40,
            use_attributes: true,
            use_image: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("title_hidden", self.title_hidden),
            ("title_layers", self.title_layers),
            ("attr_hidden", self.attr_hidden),
            ("image_dim", self.image_dim),
            ("fusion_dim", self.fusion_dim),
            ("max_title_len", self.max_title_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Encoder parameter handles. The word embedding is shared with the decoder.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed: ParamId,
    pub title: Vec<LstmLayer>,
    pub attr_fc1: (ParamId, ParamId),
    pub attr_fc2: (ParamId, ParamId),
    pub attn_query: ParamId,
    pub attn_key: ParamId,
    pub attn_v: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl EncoderParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        vocab_size: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Self {
        let e = cfg.embed_dim;
        let h = cfg.title_hidden;
        let embed = store.uniform("embed", vocab_size, e, 1.0, rng);
        let title = (0..cfg.title_layers)
            .map(|l| {
                let input = if l == 0 { e } else { h };
                LstmLayer::register(store, &format!("enc.title.{l}"), input, h, rng)
            })
            .collect();
        let a = cfg.attr_hidden;
        let attr_fc1 = (
            store.uniform("enc.attr.fc1.w", a, e, 1.0 / (e as f64).sqrt(), rng),
            store.zeros("enc.attr.fc1.b", a, 1),
        );
        let attr_fc2 = (
            store.uniform("enc.attr.fc2.w", a, a, 1.0 / (a as f64).sqrt(), rng),
            store.zeros("enc.attr.fc2.b", a, 1),
        );
        let attn_query = store.uniform("enc.attn.query", h, query_dim, 1.0 / (query_dim as f64).sqrt(), rng);
        let attn_key = store.uniform("enc.attn.key", h, h, 1.0 / (h as f64).sqrt(), rng);
        let attn_v = store.uniform("enc.attn.v", h, 1, 1.0 / (h as f64).sqrt(), rng);
        let fuse_in = h + cfg.image_dim + a;
        let fuse_w = store.uniform("enc.fuse.w", cfg.fusion_dim, fuse_in, 1.0 / (fuse_in as f64).sqrt(), rng);
        let fuse_b = store.zeros("enc.fuse.b", cfg.fusion_dim, 1);
        EncoderParams {
            embed,
            title,
            attr_fc1,
            attr_fc2,
            attn_query,
            attn_key,
            attn_v,
            fuse_w,
            fuse_b,
        }
    }
}

/// Token ids and image vector for one product, ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub title_ids: Vec<usize>,
    pub attr_ids: Vec<usize>,
    pub image: Vec<f64>,
}

impl ModelInput {
    pub fn from_record(
        record: &ProductRecord,
        vocab: &Vocabulary,
        source: &FeatureSource,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let mut title_ids = vocab.encode(&record.long_title);
        title_ids.truncate(cfg.max_title_len);
        let image = image_features(record, source)?;
        if image.len() != cfg.image_dim {
            return Err(Error::data(format!(
                "record {}: image features have {} entries, model expects {}",
                record.label(),
                image.len(),
                cfg.image_dim
            )));
        }
        Ok(ModelInput {
            title_ids,
            attr_ids: vocab.encode(&record.attr_tags),
            image,
        })
    }
}

/// Encoder outputs for one product, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedProduct {
    /// Title hidden states `o_1..o_K`, one row per input position.
    pub o: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    /// False at PAD positions.
    pub mask: Vec<bool>,
    /// Cached attention keys `W_key o_k`.
    pub keys: Vec<Vec<f64>>,
}

impl EncodedProduct {
    pub fn to_tape(&self, tape: &mut Tape) -> EncodedVars {
        EncodedVars {
            o: self.o.iter().map(|r| tape.constant(r.clone())).collect(),
            keys: self.keys.iter().map(|r| tape.constant(r.clone())).collect(),
            mask: self.mask.clone(),
            v: tape.constant(self.v.clone()),
            u: tape.constant(self.u.clone()),
        }
    }
}

/// Encoder outputs living on a tape.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub o: Vec<Var>,
    pub keys: Vec<Var>,
    pub mask: Vec<bool>,
    pub v: Var,
    pub u: Var,
}

impl EncodedVars {
    pub fn detach(&self, tape: &Tape) -> EncodedProduct {
        let rows = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).to_vec()).collect();
        EncodedProduct {
            o: rows(&self.o),
            keys: rows(&self.keys),
            mask: self.mask.clone(),
            v: tape.value(self.v).to_vec(),
            u: tape.value(self.u).to_vec(),
        }
    }
}

/// Runs the unidirectional title LSTM; returns the top-layer state per
/// position and the non-PAD mask.
pub fn encode_title_vars(tape: &mut Tape, p: &EncoderParams, ids: &[usize]) -> Result<(Vec<Var>, Vec<bool>)> {
    let mask: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("long title has no non-PAD tokens"));
    }
    let mut state = zero_state(tape, &p.title);
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = tape.row(p.embed, id);
        state = lstm_stack_step(tape, &p.title, x, &state);
        out.push(state.top());
    }
    Ok((out, mask))
}

/// `U = fc2(tanh(fc1(mean_pool(embed(A)))))`. Pad ids are ignored; an empty
/// tag list pools to the zero vector.
pub fn encode_attributes_vars(tape: &mut Tape, p: &EncoderParams, ids: &[usize]) -> Var {
    let rows: Vec<Var> = ids
        .iter()
        .filter(|&&id| id != PAD)
        .map(|&id| tape.row(p.embed, id))
        .collect();
    let pooled = if rows.is_empty() {
        let e = tape.params().get(p.embed).cols();
        tape.constant(vec![0.0; e])
    } else {
        let total = tape.sum(&rows);
        tape.scale(total, 1.0 / rows.len() as f64)
    };
    let h = tape.affine(p.attr_fc1.0, Some(p.attr_fc1.1), pooled);
    let h = tape.tanh(h);
    tape.affine(p.attr_fc2.0, Some(p.attr_fc2.1), h)
}

pub fn attention_keys(tape: &mut Tape, p: &EncoderParams, o: &[Var]) -> Vec<Var> {
    o.iter().map(|&s| tape.affine(p.attn_key, None, s)).collect()
}

/// Additive attention: `alpha = softmax_mask(w . tanh(W_q h + W_k o_k))`,
/// `o_hat = sum_k alpha_k o_k`. Returns `(o_hat, alpha)`.
pub fn attend_vars(
    tape: &mut Tape,
    p: &EncoderParams,
    h_prev: Var,
    keys: &[Var],
    o: &[Var],
    mask: &[bool],
) -> (Var, Var) {
    let q = tape.affine(p.attn_query, None, h_prev);
    let scores = tape.additive_scores(q, keys, p.attn_v);
    let alpha = tape.softmax(scores, Some(mask));
    let ctx = tape.weighted_sum(alpha, o);
    (ctx, alpha)
}

/// `C = tanh(W [o_hat; V; U] + b)`.
pub fn fuse_vars(tape: &mut Tape, p: &EncoderParams, o_hat: Var, v: Var, u: Var) -> Var {
    let x = tape.concat(&[o_hat, v, u]);
    let pre = tape.affine(p.fuse_w, Some(p.fuse_b), x);
    tape.tanh(pre)
}

/// Full encoder pass on a tape, honouring the channel switches.
pub fn encode_vars(
    tape: &mut Tape,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    input: &ModelInput,
) -> Result<EncodedVars> {
    let (o, mask) = encode_title_vars(tape, p, &input.title_ids)?;
    let keys = attention_keys(tape, p, &o);
    let u = if cfg.use_attributes {
        encode_attributes_vars(tape, p, &input.attr_ids)
    } else {
        tape.constant(vec![0.0; cfg.attr_hidden])
    };
    let v = if cfg.use_image {
        tape.constant(input.image.clone())
    } else {
        tape.constant(vec![0.0; cfg.image_dim])
    };
    Ok(EncodedVars { o, keys, mask, v, u })
}

/// Read-only view over encoder parameters with plain-value operations.
pub struct Encoder<'a> {
    pub params: &'a ParamStore,
    pub ids: &'a EncoderParams,
    pub config: &'a EncoderConfig,
}

impl Encoder<'_> {
    /// Title hidden states `O` (K x H) and the PAD mask.
    pub fn encode_title(&self, ids: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let mut tape = Tape::new(self.params);
        let (o, mask) = encode_title_vars(&mut tape, self.ids, ids)?;
        Ok((o.iter().map(|v| tape.value(*v).to_vec()).collect(), mask))
    }

    pub fn encode_attributes(&self, ids: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new(self.params);
        let u = encode_attributes_vars(&mut tape, self.ids, ids);
        tape.value(u).to_vec()
    }

    pub fn encode(&self, input: &ModelInput) -> Result<EncodedProduct> {
        let mut tape = Tape::new(self.params);
        let vars = encode_vars(&mut tape, self.ids, self.config, input)?;
        Ok(vars.detach(&tape))
    }

    /// Returns `(o_hat, alpha)` for decoder state `h_prev`.
    pub fn attend(&self, h_prev: &[f64], encoded: &EncodedProduct) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(self.params);
        let h = tape.constant(h_prev.to_vec());
        let vars = encoded.to_tape(&mut tape);
        let (ctx, alpha) = attend_vars(&mut tape, self.ids, h, &vars.keys, &vars.o, &vars.mask);
        (tape.value(ctx).to_vec(), tape.value(alpha).to_vec())
    }

    pub fn fuse(&self, o_hat: &[f64], v: &[f64], u: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(self.params);
        let (o, v, u) = (
            tape.constant(o_hat.to_vec()),
            tape.constant(v.to_vec()),
            tape.constant(u.to_vec()),
        );
        let c = fuse_vars(&mut tape, self.ids, o, v, u);
        tape.value(c).to_vec()
    }
}

/// Pluggable image feature extractor, e.g. a CNN adapter.
pub trait ImageFeatureExtractor: Send + Sync {
    fn extract(&self, image_ref: &str) -> Result<Vec<f64>>;
}

/// Where image features `V` come from.
#[derive(Clone)]
pub enum FeatureSource {
    /// The record's stored `image_features`, verbatim.
    Precomputed,
    /// Deterministic pseudo-random vector derived from `image_ref`.
    Stub { dim: usize },
    CnnAdapter(Arc<dyn ImageFeatureExtractor>),
}

impl fmt::Debug for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Precomputed => write!(f, "Precomputed"),
            FeatureSource::Stub { dim } => write!(f, "Stub {{ dim: {dim} }}"),
            FeatureSource::CnnAdapter(_) => write!(f, "CnnAdapter(..)"),
        }
    }
}

/// Config-file name of a feature source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageSourceKind {
    #[default]
    Precomputed,
    Stub,
    CnnAdapter,
}

impl ImageSourceKind {
    /// Builds the source; `cnn-adapter` needs an extractor supplied by the caller.
    pub fn build(
        self,
        dim: usize,
        adapter: Option<Arc<dyn ImageFeatureExtractor>>,
    ) -> Result<FeatureSource> {
        match self {
            ImageSourceKind::Precomputed => Ok(FeatureSource::Precomputed),
            ImageSourceKind::Stub => Ok(FeatureSource::Stub { dim }),
            ImageSourceKind::CnnAdapter => adapter
                .map(FeatureSource::CnnAdapter)
                .ok_or_else(|| Error::Config("image_source cnn-adapter: no adapter registered".into())),
        }
    }
}

pub fn stub_features(image_ref: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(image_ref.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn image_features(record: &ProductRecord, source: &FeatureSource) -> Result<Vec<f64>> {
    let unresolvable = |why: &str| Error::data(format!("record {}: {why}", record.label()));
    let v = match source {
        FeatureSource::Precomputed => record
            .image_features
            .clone()
            .ok_or_else(|| unresolvable("no stored image_features"))?,
        FeatureSource::Stub { dim } => {
            let r = record
                .image_ref
                .as_deref()
                .ok_or_else(|| unresolvable("no image_ref to resolve"))?;
            stub_features(r, *dim)
        }
        FeatureSource::CnnAdapter(x) => {
            let r = record
                .image_ref
                .as_deref()
                .ok_or_else(|| unresolvable("no image_ref to resolve"))?;
            x.extract(r)
                .map_err(|e| unresolvable(&format!("cannot resolve image_ref {r:?}: {e}")))?
        }
    };
    if v.iter().any(|x| !x.is_finite()) {
        return Err(unresolvable("image features contain non-finite values"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_rel_error, numeric_gradients};
    use crate::nn::Gradients;
    use std::collections::HashSet;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 4,
            title_hidden: 8,
            title_layers: 2,
            attr_hidden: 5,
            image_dim: 3,
            fusion_dim: 6,
            max_title_len: 20,
            use_attributes: true,
            use_image: true,
        }
    }

    fn setup(seed: u64) -> (ParamStore, EncoderParams, EncoderConfig) {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = EncoderParams::register(&mut store, &cfg, 12, 7, &mut rng);
        (store, p, cfg)
    }

    #[test]
    fn title_states_shape_and_determinism() {
        let (store, p, cfg) = setup(1);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        let (o, mask) = enc.encode_title(&[4, 5, 6, 7, 8]).unwrap();
        assert_eq!(o.len(), 5);
        assert!(o.iter().all(|r| r.len() == 8));
        assert_eq!(mask, vec![true; 5]);
        assert_eq!(enc.encode_title(&[4, 5, 6, 7, 8]).unwrap().0, o);
    }

    #[test]
    fn title_encoder_is_unidirectional() {
        let (store, p, cfg) = setup(2);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        let (a, _) = enc.encode_title(&[4, 5, 6]).unwrap();
        let (b, _) = enc.encode_title(&[4, 9, 6]).unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn all_pad_title_is_an_error() {
        let (store, p, cfg) = setup(3);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        assert!(enc.encode_title(&[PAD, PAD]).is_err());
        assert!(enc.encode_title(&[]).is_err());
        let (_, mask) = enc.encode_title(&[4, PAD]).unwrap();
        assert_eq!(mask, vec![true, false]);
    }

    #[test]
    fn attribute_vector_has_fixed_length_and_ignores_order() {
        let (store, p, cfg) = setup(4);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        for m in 1..=30 {
            let ids: Vec<usize> = (0..m).map(|i| 4 + i % 8).collect();
            assert_eq!(enc.encode_attributes(&ids).len(), 5);
        }
        let a = enc.encode_attributes(&[4, 7, 9]);
        let b = enc.encode_attributes(&[9, 4, 7]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(enc.encode_attributes(&[]).len(), 5);
    }

    #[test]
    fn zero_final_layer_gives_bias() {
        let (mut store, p, cfg) = setup(5);
        store.get_mut(p.attr_fc2.0).data.fill(0.0);
        store.get_mut(p.attr_fc2.1).data = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        assert_eq!(enc.encode_attributes(&[4, 5]), vec![0.1, 0.2, 0.3, 0.4, 0.5]);
    }

    fn encoded(store: &ParamStore, p: &EncoderParams, cfg: &EncoderConfig, ids: &[usize]) -> EncodedProduct {
        let enc = Encoder { params: store, ids: p, config: cfg };
        enc.encode(&ModelInput {
            title_ids: ids.to_vec(),
            attr_ids: vec![4, 5],
            image: vec![0.5, -0.5, 0.25],
        })
        .unwrap()
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let (mut store, p, cfg) = setup(6);
        store.get_mut(p.attn_v).data.fill(0.0);
        let e = encoded(&store, &p, &cfg, &[4, 5, 6, 7]);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        let (_, alpha) = enc.attend(&[0.3; 7], &e);
        for a in alpha {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_position_attends_fully() {
        let (store, p, cfg) = setup(7);
        let e = encoded(&store, &p, &cfg, &[9]);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        let (ctx, alpha) = enc.attend(&[0.1, -0.2, 0.3, 0.0, 0.5, 0.7, -0.9], &e);
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(ctx, e.o[0]);
    }

    #[test]
    fn attention_matches_direct_recomputation() {
        let (store, p, cfg) = setup(8);
        let e = encoded(&store, &p, &cfg, &[4, PAD, 6, 7, 8]);
        let h = [0.2, -0.1, 0.4, 0.3, -0.6, 0.05, 0.9];
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        let (ctx, alpha) = enc.attend(&h, &e);

        let wq = store.get(p.attn_query);
        let wk = store.get(p.attn_key);
        let v = &store.get(p.attn_v).data;
        let matvec = |m: &crate::nn::NamedTensor, x: &[f64]| -> Vec<f64> {
            (0..m.rows()).map(|r| m.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        };
        let q = matvec(wq, &h);
        let scores: Vec<f64> = e
            .o
            .iter()
            .map(|o| {
                let k = matvec(wk, o);
                (0..q.len()).map(|j| v[j] * (q[j] + k[j]).tanh()).sum()
            })
            .collect();
        let z: f64 = scores.iter().zip(&e.mask).filter(|(_, &m)| m).map(|(s, _)| s.exp()).sum();
        let expect_alpha: Vec<f64> = scores
            .iter()
            .zip(&e.mask)
            .map(|(s, &m)| if m { s.exp() / z } else { 0.0 })
            .collect();
        assert_eq!(alpha[1], 0.0);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in alpha.iter().zip(&expect_alpha) {
            assert!((a - b).abs() < 1e-6);
        }
        for j in 0..ctx.len() {
            let want: f64 = expect_alpha.iter().zip(&e.o).map(|(a, o)| a * o[j]).sum();
            assert!((ctx[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_zero_weights_and_bounds() {
        let (mut store, p, cfg) = setup(9);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        let big: Vec<f64> = (0..8).map(|i| 50.0 * (i as f64 - 3.5)).collect();
        let c = enc.fuse(&big, &[100.0, -100.0, 3.0], &[1e3; 5]);
        assert!(c.iter().all(|x| x.abs() <= 1.0));
        let c = enc.fuse(&[0.3; 8], &[0.1, 0.2, 0.3], &[0.5; 5]);
        assert!(c.iter().all(|x| x.abs() < 1.0));

        store.get_mut(p.fuse_w).data.fill(0.0);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        assert_eq!(enc.fuse(&[0.3; 8], &[0.1, 0.2, 0.3], &[0.5; 5]), vec![0.0; 6]);
    }

    #[test]
    fn fuse_matches_hand_computed_product() {
        let (store, p, cfg) = setup(10);
        let enc = Encoder { params: &store, ids: &p, config: &cfg };
        let o: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let v = [0.5, -0.25, 0.75];
        let u = [0.2, 0.1, -0.1, 0.0, 0.3];
        let c = enc.fuse(&o, &v, &u);
        let x: Vec<f64> = o.iter().chain(&v).chain(&u).copied().collect();
        let w = store.get(p.fuse_w);
        let b = &store.get(p.fuse_b).data;
        for r in 0..6 {
            let want = (w.row(r).iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b[r]).tanh();
            assert!((c[r] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn attend_and_fuse_gradients_match_finite_differences() {
        let (mut store, p, cfg) = setup(11);
        let input = ModelInput {
            title_ids: vec![4, 5, PAD, 7],
            attr_ids: vec![6, 8, 9],
            image: vec![0.3, -0.7, 0.1],
        };
        let h: Vec<f64> = (0..7).map(|i| 0.2 * i as f64 - 0.5).collect();
        let run = |store: &ParamStore, grads: Option<&mut Gradients>| {
            let mut tape = Tape::new(store);
            let e = encode_vars(&mut tape, &p, &cfg, &input).unwrap();
            let hv = tape.constant(h.clone());
            let (ctx, _) = attend_vars(&mut tape, &p, hv, &e.keys, &e.o, &e.mask);
            let c = fuse_vars(&mut tape, &p, ctx, e.v, e.u);
            let sq = tape.mul(c, c);
            let loss = tape.mean(sq);
            if let Some(g) = grads {
                tape.backward(loss, g);
            }
            tape.scalar(loss)
        };
        let mut grads = Gradients::zeros_like(&store);
        run(&store, Some(&mut grads));
        let numeric = numeric_gradients(&mut store, 1e-6, |s| run(s, None));
        assert!(max_rel_error(&grads.flatten(), &numeric) < 1e-3);
    }

    #[test]
    fn precomputed_source_is_verbatim() {
        let mut r = ProductRecord::new(vec!["a".into()], None, vec![]);
        r.image_features = Some(vec![0.1, 0.2, 1.0 / 3.0]);
        assert_eq!(
            image_features(&r, &FeatureSource::Precomputed).unwrap(),
            vec![0.1, 0.2, 1.0 / 3.0]
        );
        let bare = ProductRecord::new(vec!["b".into()], None, vec![]);
        let err = image_features(&bare, &FeatureSource::Precomputed).unwrap_err();
        assert!(err.to_string().contains("\"b\""), "{err}");
    }

    #[test]
    fn stub_source_is_deterministic_and_distinct() {
        let mut r = ProductRecord::new(vec!["a".into()], None, vec![]);
        r.image_ref = Some("img/42.jpg".into());
        let src = FeatureSource::Stub { dim: 8 };
        assert_eq!(image_features(&r, &src).unwrap(), image_features(&r, &src).unwrap());
        assert!(image_features(&ProductRecord::new(vec!["a".into()], None, vec![]), &src).is_err());

        let mut seen = HashSet::new();
        for i in 0..20_000 {
            let v = stub_features(&format!("ref-{i}"), 8);
            assert!(seen.insert(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
        }
    }

    struct Failing;
    impl ImageFeatureExtractor for Failing {
        fn extract(&self, r: &str) -> Result<Vec<f64>> {
            Err(Error::data(format!("no such image {r}")))
        }
    }

    #[test]
    fn adapter_errors_name_the_record() {
        let mut r = ProductRecord::new(vec!["shirt".into()], None, vec![]);
        r.image_ref = Some("x.jpg".into());
        let src = ImageSourceKind::CnnAdapter.build(4, Some(Arc::new(Failing))).unwrap();
        let err = image_features(&r, &src).unwrap_err().to_string();
        assert!(err.contains("shirt") && err.contains("x.jpg"), "{err}");
        assert!(ImageSourceKind::CnnAdapter.build(4, None).is_err());
    }
}
