use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level corpus with contiguous, disjoint train and validation splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteCorpus {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
}

impl ByteCorpus {
    /// The last `valid_fraction` of `data` becomes the validation split.
    pub fn from_bytes(data: Vec<u8>, valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {valid_fraction} must be in [0, 1)"
            )));
        }
        let cut = data.len() - (data.len() as f64 * valid_fraction).round() as usize;
        let mut train = data;
        let valid = train.split_off(cut);
        Ok(Self { train, valid })
    }

    pub fn from_file(path: &Path, valid_fraction: f64) -> Result<Self> {
        Self::from_bytes(fs::read(path)?, valid_fraction)
    }

    /// Deterministic English-like text of exactly `len` bytes.
    pub fn synthetic(len: usize, seed: u64, valid_fraction: f64) -> Result<Self> {
        Self::from_bytes(synthetic_text(len, seed), valid_fraction)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "that", "it", "was", "he", "his", "with", "had", "as",
    "for", "she", "her", "you", "not", "at", "on", "but", "be", "they", "all", "by", "him", "said",
    "have", "from", "there", "one", "were", "which", "when", "so", "would", "what", "been", "no",
    "if", "them", "an", "out", "up", "into", "could", "more", "then", "time", "now", "little",
    "man", "some", "very", "upon", "know", "about", "like", "only", "down", "come", "long", "old",
    "great", "before", "over", "house", "never", "again", "way", "must", "good", "night", "day",
    "hand", "through", "eyes", "after", "world", "door", "room", "light", "water", "road", "river",
    "morning", "garden", "letter", "window", "voice", "silence", "mountain", "winter", "village",
    "stranger", "journey", "question", "answer", "remember", "thought", "looked", "walked",
    "turned", "began", "heard", "across", "between", "without", "against", "toward", "beneath",
];

/// Zipf-weighted words, sentences of 4 to 15 words, paragraphs of a few
/// sentences. Only printable ASCII plus `\n`.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..WORDS.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");
    let mut out = Vec::with_capacity(len + 64);
    while out.len() < len {
        let sentences = rng.gen_range(2..7);
        for s in 0..sentences {
            let words = rng.gen_range(4..16);
            for w in 0..words {
                let word = WORDS[pick.sample(&mut rng)].as_bytes();
                if w == 0 {
                    out.push(word[0].to_ascii_uppercase());
                    out.extend_from_slice(&word[1..]);
                } else {
                    out.push(b' ');
                    out.extend_from_slice(word);
                }
                if w + 1 < words && rng.gen_bool(0.08) {
                    out.push(b',');
                }
            }
            out.push(if rng.gen_bool(0.1) { b'?' } else { b'.' });
            if s + 1 < sentences {
                out.push(b' ');
            }
        }
        out.extend_from_slice(b"\n\n");
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_contiguous_and_disjoint() {
        let data: Vec<u8> = (0..100u8).collect();
        let c = ByteCorpus::from_bytes(data.clone(), 0.1).unwrap();
        assert_eq!(c.train.len(), 90);
        assert_eq!(c.valid.len(), 10);
        let mut joined = c.train.clone();
        joined.extend(&c.valid);
        assert_eq!(joined, data);
        assert!(ByteCorpus::from_bytes(data, 1.0).is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_text(10_000, 3);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_text(10_000, 3));
        assert_ne!(a, synthetic_text(10_000, 4));
        assert!(a.iter().all(|&b| b == b'\n' || (32..127).contains(&b)));
    }
}
