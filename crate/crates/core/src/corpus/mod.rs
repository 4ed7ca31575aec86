//! Product records, tokenization, vocabulary and corpus files.

mod record;
mod synth;
mod tokenize;
mod vocab;

pub use record::{
    load_corpus, load_generated, record_to_json, save_corpus, save_generated, ProductRecord,
    GENERATED_KEY,
};
pub use synth::{
    gold_length, gold_short_title, pool_word, synth_corpus, CorpusStats, SynthOptions, CATEGORIES,
};
pub use tokenize::{is_cjk, tokenize, LanguageMode, Tokenizer};
pub use vocab::{
    decode_ids, encode_ids, Vocabulary, BOS, EOS, NUM_RESERVED, PAD, RESERVED_TOKENS, UNK,
};
