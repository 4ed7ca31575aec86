use std::collections::HashSet;

/// Segmentation mode. Only mixed CJK/Latin text is supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LanguageMode {
    #[default]
    Mixed,
}

/// Returns true for characters that segment one-per-token by default:
/// CJK ideographs, kana, hangul syllables and CJK/fullwidth punctuation.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F      // CJK symbols and punctuation
        | 0x3040..=0x30FF    // hiragana, katakana
        | 0x3400..=0x4DBF    // extension A
        | 0x4E00..=0x9FFF    // unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0xFF00..=0xFFEF    // halfwidth and fullwidth forms
        | 0x20000..=0x2FA1F  // extensions B..F, compatibility supplement
    )
}

/// Deterministic mixed-script tokenizer.
///
/// Whitespace separates runs. Inside a run, maximal non-CJK stretches
/// (Latin words, digits, SKU codes such as `S110061Q`) stay whole, while CJK
/// stretches are emitted one character per token unless the dictionary holds
/// a longer word, in which case the longest dictionary match wins.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    dictionary: HashSet<String>,
    longest_entry: usize,
}

impl Tokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dictionary<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let dictionary: HashSet<String> = words
            .into_iter()
            .map(Into::into)
            .filter(|w| !w.is_empty())
            .collect();
        let longest_entry = dictionary
            .iter()
            .map(|w| w.chars().count())
            .max()
            .unwrap_or(0);
        Tokenizer {
            dictionary,
            longest_entry,
        }
    }

    pub fn tokenize(&self, text: &str, _mode: LanguageMode) -> Vec<String> {
        let mut out = Vec::new();
        for run in text.split_whitespace() {
            let chars: Vec<char> = run.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                if is_cjk(chars[i]) {
                    let end = (i..chars.len())
                        .find(|&j| !is_cjk(chars[j]))
                        .unwrap_or(chars.len());
                    self.segment_cjk(&chars[i..end], &mut out);
                    i = end;
                } else {
                    let end = (i..chars.len())
                        .find(|&j| is_cjk(chars[j]))
                        .unwrap_or(chars.len());
                    out.push(chars[i..end].iter().collect());
                    i = end;
                }
            }
        }
        out
    }

    fn segment_cjk(&self, chars: &[char], out: &mut Vec<String>) {
        let mut i = 0;
        while i < chars.len() {
            let max = self.longest_entry.min(chars.len() - i);
            let mut taken = 1;
            for len in (2..=max).rev() {
                let cand: String = chars[i..i + len].iter().collect();
                if self.dictionary.contains(&cand) {
                    taken = len;
                    break;
                }
            }
            out.push(chars[i..i + taken].iter().collect());
            i += taken;
        }
    }
}

/// Tokenizes with the default (dictionary-free) tokenizer.
pub fn tokenize(text: &str, mode: LanguageMode) -> Vec<String> {
    Tokenizer::new().tokenize(text, mode)
}
