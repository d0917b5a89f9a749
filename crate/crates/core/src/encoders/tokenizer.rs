//! Hash tokenizer: lowercase words mapped by FNV-1a into a fixed vocabulary.

/// Reserved id for empty input. Words never map here.
pub const UNK: u32 = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Set when the sequence was cut to the encoder's maximum length.
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased words split on anything that is not alphanumeric.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Id of a single (already normalized) word.
pub fn word_id(word: &str, vocab_size: usize) -> u32 {
    debug_assert!(vocab_size >= 2);
    1 + (fnv1a64(word.as_bytes()) % (vocab_size as u64 - 1)) as u32
}

/// Tokenizes `text`; ids lie in `1..vocab_size`, and empty text yields `[UNK]`.
pub fn tokenize(text: &str, vocab_size: usize) -> TokenSequence {
    let vocab_size = vocab_size.max(2);
    let mut ids: Vec<u32> = words(text).map(|w| word_id(&w, vocab_size)).collect();
    if ids.is_empty() {
        ids.push(UNK);
    }
    TokenSequence {
        ids,
        truncated: false,
    }
}
