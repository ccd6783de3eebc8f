//! Hashes a few texts into fixed-width bag-of-words vectors.

use postrank::encoding::{encode_text, tokenize};

fn main() {
    for text in ["Sunset over the bay #goldenhour", "Rain again. Umbrella weather!", ""] {
        let v = encode_text(text, 16);
        let tokens: Vec<String> = tokenize(text).collect();
        let nonzero: Vec<String> = v
            .values
            .iter()
            .enumerate()
            .filter(|(_, x)| **x > 0.0)
            .map(|(i, x)| format!("{i}:{x:.2}"))
            .collect();
        println!("{text:?}\n  tokens {tokens:?}\n  buckets {}", nonzero.join(" "));
    }
}
