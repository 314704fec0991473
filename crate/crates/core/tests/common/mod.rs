#![allow(dead_code)]

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ou"];
const CODAS: [&str; 8] = ["", "", "n", "r", "s", "t", "l", "nd"];

/// Deterministic pseudo-English text of at least `bytes` bytes: a Zipfian
/// lexicon of syllable words arranged into sentences and paragraphs.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..600)
        .map(|_| {
            let syllables = rng.gen_range(1..=3);
            (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.gen_range(0..ONSETS.len())],
                        VOWELS[rng.gen_range(0..VOWELS.len())],
                        CODAS[rng.gen_range(0..CODAS.len())]
                    )
                })
                .collect()
        })
        .collect();
    let zipf = WeightedIndex::new((1..=lexicon.len()).map(|r| 1.0 / r as f64)).unwrap();
    let mut text = String::with_capacity(bytes + 256);
    let mut prev = 0usize;
    while text.len() < bytes {
        let words = rng.gen_range(4..14);
        for w in 0..words {
            // bigram flavour: often follow the previous word's neighbour
            let idx = if rng.gen_bool(0.3) { (prev * 7 + 3) % lexicon.len() } else { zipf.sample(&mut rng) };
            prev = idx;
            let word = &lexicon[idx];
            if w == 0 {
                let mut c = word.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                text.push(first);
                text.push_str(c.as_str());
            } else {
                text.push_str(word);
            }
            if w + 1 < words {
                text.push(if rng.gen_bool(0.08) { ',' } else { ' ' });
                if text.ends_with(',') {
                    text.push(' ');
                }
            }
        }
        text.push_str(if rng.gen_bool(0.1) { "?" } else { "." });
        text.push(if rng.gen_bool(0.15) { '\n' } else { ' ' });
    }
    text
}
