//! Byte-level tokenization and seeded synthetic prompts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::planner::{BUCKET_COUNT, BUCKET_WIDTH};

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Tokens above 255 have no byte and are rendered as `?`.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .map(|&t| u8::try_from(t).unwrap_or(b'?'))
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn read_prompt_file(path: &std::path::Path) -> Result<Vec<u32>> {
    Ok(encode(&std::fs::read_to_string(path)?))
}

const WORDS: &[&str] = &[
    "the", "cache", "block", "query", "tree", "draft", "token", "layer", "index", "sparse",
    "window", "select", "merge", "group", "verify", "accept", "route", "score", "head", "value",
    "of", "and", "to", "in", "is", "a", "for", "with", "each", "when",
];

/// Pseudo-text of exactly `len` bytes: seeded word salad with recurring phrases.
pub fn synthetic_prompt(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phrases: Vec<String> = (0..6)
        .map(|_| {
            (0..rng.random_range(3..7))
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut text = String::with_capacity(len + 64);
    while text.len() < len {
        if rng.random_bool(0.4) {
            text.push_str(&phrases[rng.random_range(0..phrases.len())]);
        } else {
            text.push_str(WORDS[rng.random_range(0..WORDS.len())]);
        }
        text.push(if rng.random_bool(0.1) { '.' } else { ' ' });
    }
    text.truncate(len);
    encode(&text)
}

/// `count` prompts with lengths drawn from `[min_len, max_len]`.
pub fn synthetic_set(seed: u64, count: usize, min_len: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..count)
        .map(|i| {
            let len = rng.random_range(min_len..=max_len.max(min_len));
            synthetic_prompt(seed.wrapping_mul(1000).wrapping_add(i as u64), len)
        })
        .collect()
}

/// Prompt length range for a context bucket, shrunk by `scale` (1 = full size).
pub fn bucket_length_range(bucket: usize, scale: usize) -> (usize, usize) {
    let b = bucket.min(BUCKET_COUNT - 1);
    let lo = (b * BUCKET_WIDTH + 256) / scale.max(1);
    let hi = ((b + 1) * BUCKET_WIDTH - 512) / scale.max(1);
    (lo.max(8), hi.max(lo.max(8)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::bucket_of;

    #[test]
    fn byte_round_trip() {
        let s = "sparse ✓ verify";
        assert_eq!(decode(&encode(s)), s);
        assert_eq!(decode(&[104, 105, 999]), "hi?");
    }

    #[test]
    fn synthetic_is_seeded_and_sized() {
        let a = synthetic_prompt(3, 500);
        assert_eq!(a.len(), 500);
        assert_eq!(a, synthetic_prompt(3, 500));
        assert_ne!(a, synthetic_prompt(4, 500));
        assert!(a.iter().all(|&t| t < 128));
    }

    #[test]
    fn bucket_ranges_land_in_bucket() {
        for b in 0..4 {
            let (lo, hi) = bucket_length_range(b, 1);
            assert_eq!(bucket_of(lo), b);
            assert_eq!(bucket_of(hi), b);
        }
    }
}
