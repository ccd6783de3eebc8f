use serde::{Deserialize, Serialize};

/// Hashed bag-of-words vector. Entries are token counts divided by the total
/// token count, so they are non-negative and sum to 1 for non-empty text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextVector {
    pub values: Vec<f64>,
    /// Number of tokens that survived tokenization; zero means the text was
    /// empty after filtering and `values` is all zeros.
    pub tokens: usize,
}

impl TextVector {
    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Anything that maps text to a fixed-width vector.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> TextVector;
}

/// 64-bit FNV-1a over the UTF-8 bytes of `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Lowercases, splits on every non-alphanumeric character and drops tokens
/// shorter than two characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
}

/// Feature-hashing encoder: token `t` lands in bucket `fnv1a64(t) mod dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    /// # Panics
    /// If `dim` is zero.
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "text dimension must be at least 1");
        Self { dim }
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> TextVector {
        let mut values = vec![0.0; self.dim];
        let mut tokens = 0usize;
        for token in tokenize(text) {
            values[(fnv1a64(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
            tokens += 1;
        }
        let scale = 1.0 / tokens.max(1) as f64;
        values.iter_mut().for_each(|v| *v *= scale);
        TextVector { values, tokens }
    }
}

/// Shorthand for `HashingEncoder::new(dim).encode(text)`.
pub fn encode_text(text: &str, dim: usize) -> TextVector {
    HashingEncoder::new(dim).encode(text)
}
