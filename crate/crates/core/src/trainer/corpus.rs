//! Character-level corpus ingestion and a seeded train/validation split.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_VOCAB: usize = 256;

/// Characters per block when splitting; blocks, not characters, are
/// shuffled so both halves keep local structure.
pub const SPLIT_BLOCK: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Sorted distinct characters; token id = index.
    pub vocab: Vec<char>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

pub fn encode(vocab: &[char], text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            vocab
                .binary_search(&c)
                .map_err(|_| Error::Input(format!("character {c:?} is not in the vocabulary")))
        })
        .collect()
}

pub fn decode(vocab: &[char], ids: &[usize]) -> String {
    ids.iter().map(|&i| vocab.get(i).copied().unwrap_or('\u{fffd}')).collect()
}

impl Corpus {
    /// Builds the vocabulary of `text` and splits its blocks so that about
    /// `train_ratio` of the characters go to training.
    pub fn from_text(text: &str, train_ratio: f64, seed: u64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Ingestion("corpus is empty".into()));
        }
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(Error::Ingestion(format!("train ratio {train_ratio} must lie in (0, 1)")));
        }
        let mut vocab: Vec<char> = text.chars().collect();
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.len() > MAX_VOCAB {
            return Err(Error::Ingestion(format!(
                "corpus has {} distinct characters, at most {MAX_VOCAB} supported",
                vocab.len()
            )));
        }
        let ids = encode(&vocab, text)?;
        let blocks: Vec<&[usize]> = ids.chunks(SPLIT_BLOCK).collect();
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let target = (ids.len() as f64 * train_ratio).round() as usize;
        let mut in_train = vec![false; blocks.len()];
        let mut taken = 0;
        for &b in &order {
            if taken >= target {
                break;
            }
            in_train[b] = true;
            taken += blocks[b].len();
        }
        if taken == ids.len() && blocks.len() > 1 {
            // keep at least one validation block
            in_train[*order.last().expect("non-empty")] = false;
        }
        let (mut train, mut valid) = (Vec::new(), Vec::new());
        for (b, block) in blocks.iter().enumerate() {
            if in_train[b] { &mut train } else { &mut valid }.extend_from_slice(block);
        }
        Ok(Self { vocab, train, valid })
    }

    pub fn from_path(path: &Path, train_ratio: f64, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Ingestion(format!("{} is not UTF-8: {e}", path.display())))?;
        Self::from_text(&text, train_ratio, seed)
    }

    /// Hash of both halves, for comparing splits across runs.
    pub fn split_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.vocab.hash(&mut h);
        self.train.hash(&mut h);
        self.valid.hash(&mut h);
        h.finish()
    }
}
