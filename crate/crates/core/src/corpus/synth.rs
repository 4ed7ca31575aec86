//! Deterministic synthetic corpus with known extractive gold titles.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::ProductRecord;

/// Average lengths in words, as reported for a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub avg_long_len: f64,
    pub avg_short_len: f64,
    pub avg_attr_len: f64,
    pub record_count: usize,
}

impl CorpusStats {
    /// Statistics of the crawled e-commerce corpus the synthetic data mimics.
    pub fn reference() -> Self {
        CorpusStats {
            avg_long_len: 13.7,
            avg_short_len: 4.5,
            avg_attr_len: 18.3,
            record_count: 2_403_691,
        }
    }

    pub fn from_records(records: &[ProductRecord]) -> Self {
        let n = records.len();
        if n == 0 {
            return CorpusStats {
                avg_long_len: 0.0,
                avg_short_len: 0.0,
                avg_attr_len: 0.0,
                record_count: 0,
            };
        }
        let mean = |f: &dyn Fn(&ProductRecord) -> usize| {
            records.iter().map(f).sum::<usize>() as f64 / n as f64
        };
        CorpusStats {
            avg_long_len: mean(&|r| r.long_title.len()),
            avg_short_len: mean(&|r| r.short_title.as_ref().map_or(0, Vec::len)),
            avg_attr_len: mean(&|r| r.attr_tags.len()),
            record_count: n,
        }
    }
}

pub const CATEGORIES: [&str; 7] = [
    "one-piece",
    "man-tshirt",
    "shirt",
    "casual-pants",
    "woman-tshirt",
    "skirt",
    "sweater",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub seed: u64,
    pub stats: CorpusStats,
    /// Size of the word pool titles and tags are drawn from.
    pub vocab_size: usize,
    pub image_dim: usize,
    /// Probability that a long-title word is also an attribute tag.
    pub attr_keep_rate: f64,
}

impl SynthOptions {
    pub fn new(n: usize, seed: u64, stats: CorpusStats, vocab_size: usize) -> Self {
        SynthOptions {
            n,
            seed,
            stats,
            vocab_size,
            image_dim: 16,
            attr_keep_rate: 0.5,
        }
    }
}

/// Number of words in every gold short title: `ceil(avg_short_len)`.
pub fn gold_length(stats: &CorpusStats) -> usize {
    (stats.avg_short_len.ceil() as usize).max(1)
}

/// The gold rule: the first `len` long-title words that are also attribute
/// tags, topped up from the head of the title when fewer exist, emitted in
/// title order.
pub fn gold_short_title(long_title: &[String], attr_tags: &[String], len: usize) -> Vec<String> {
    let tags: HashSet<&str> = attr_tags.iter().map(String::as_str).collect();
    let mut chosen = vec![false; long_title.len()];
    let mut count = 0;
    for (i, w) in long_title.iter().enumerate() {
        if count == len {
            break;
        }
        if tags.contains(w.as_str()) {
            chosen[i] = true;
            count += 1;
        }
    }
    for c in chosen.iter_mut() {
        if count == len {
            break;
        }
        if !*c {
            *c = true;
            count += 1;
        }
    }
    long_title
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(w, _)| w.clone())
        .collect()
}

pub fn pool_word(i: usize) -> String {
    format!("w{i:04}")
}

fn record_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

pub fn synth_corpus(opts: &SynthOptions) -> Vec<ProductRecord> {
    let pool: Vec<String> = (0..opts.vocab_size.max(2)).map(pool_word).collect();
    let long_extra = Poisson::new((opts.stats.avg_long_len - 1.0).max(1e-3)).expect("valid rate");
    let attr_len = Poisson::new(opts.stats.avg_attr_len.max(1e-3)).expect("valid rate");
    let short_len = gold_length(&opts.stats);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    (0..opts.n)
        .map(|i| {
            let k = (1 + long_extra.sample(&mut rng) as usize).min(pool.len());
            let long_title: Vec<String> = pool.choose_multiple(&mut rng, k).cloned().collect();

            let mut tags: Vec<String> = long_title
                .iter()
                .filter(|_| rng.gen_bool(opts.attr_keep_rate))
                .cloned()
                .collect();
            if tags.is_empty() {
                tags.push(long_title[rng.gen_range(0..k)].clone());
            }
            let target = attr_len.sample(&mut rng) as usize;
            let in_title: HashSet<&String> = long_title.iter().collect();
            let distractors: Vec<&String> = pool.iter().filter(|w| !in_title.contains(w)).collect();
            let extra = target.saturating_sub(tags.len()).min(distractors.len());
            tags.extend(distractors.choose_multiple(&mut rng, extra).map(|w| (*w).clone()));
            tags.shuffle(&mut rng);

            let short = gold_short_title(&long_title, &tags, short_len);
            let category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())].to_string();

            let mut img_rng = ChaCha8Rng::seed_from_u64(record_seed(opts.seed, i));
            let features = (0..opts.image_dim).map(|_| img_rng.gen_range(-1.0..1.0)).collect();

            ProductRecord {
                long_title,
                short_title: Some(short),
                attr_tags: tags,
                image_features: Some(features),
                image_ref: Some(format!("img-{i:06}")),
                category,
            }
        })
        .collect()
}
