//! Deterministic synthetic text corpus.
//!
//! Generates pseudo-prose from a seeded vocabulary of syllable-composed
//! words with a Zipf-like frequency profile, sentence casing and
//! punctuation. The output is a pure function of `(seed, bytes)`, so runs on
//! different machines train on identical data without shipping megabytes of
//! text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
    "br", "ch", "cl", "cr", "dr", "fl", "fr", "gl", "gr", "pl", "pr", "sc", "sh", "sk", "sl",
    "sm", "sn", "sp", "st", "str", "sw", "th", "tr", "wh", "",
];
const NUCLEI: &[&str] = &[
    "a", "e", "i", "o", "u", "a", "e", "i", "o", "u", "ai", "ea", "ee", "ia", "ie", "io", "oa",
    "oo", "ou",
];
const CODAS: &[&str] = &[
    "", "", "", "b", "ck", "d", "g", "l", "ll", "m", "n", "nd", "ng", "nt", "p", "r", "rd", "rn",
    "s", "ss", "st", "t", "th", "x",
];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = match rng.gen_range(0..10) {
        0..=4 => 1,
        5..=8 => 2,
        _ => 3,
    };
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
        w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    }
    w
}

/// Generates at least `bytes` bytes of deterministic pseudo-text.
pub fn generate_corpus(seed: u64, bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let vocab_size = 2000;
    let mut words: Vec<String> = Vec::with_capacity(vocab_size);
    while words.len() < vocab_size {
        let w = make_word(&mut rng);
        if w.len() >= 2 && w.len() <= 14 {
            words.push(w);
        }
    }

    // Zipf-like cumulative weights over the ranked vocabulary.
    let mut cumulative = Vec::with_capacity(vocab_size);
    let mut total = 0.0f64;
    for r in 0..vocab_size {
        total += 1.0 / (r as f64 + 1.0).powf(1.05);
        cumulative.push(total);
    }

    let pick_word = |rng: &mut ChaCha8Rng| -> usize {
        let x = rng.gen_range(0.0..total);
        cumulative.partition_point(|&c| c < x).min(vocab_size - 1)
    };

    let mut out: Vec<u8> = Vec::with_capacity(bytes + 256);
    let mut sentences_in_paragraph = 0usize;
    let mut paragraph_len = rng.gen_range(40..70);
    while out.len() < bytes {
        let sentence_words = rng.gen_range(4..=14);
        for wi in 0..sentence_words {
            let word = &words[pick_word(&mut rng)];
            if wi == 0 {
                let mut chars = word.chars();
                if let Some(c) = chars.next() {
                    out.extend(c.to_uppercase().to_string().as_bytes());
                    out.extend(chars.as_str().as_bytes());
                }
            } else {
                out.push(b' ');
                out.extend(word.as_bytes());
            }
            if wi + 1 < sentence_words && rng.gen_range(0..12) == 0 {
                out.push(b',');
            }
        }
        out.extend(match rng.gen_range(0..10) {
            0 => b"? ".as_slice(),
            1 => b"! ".as_slice(),
            _ => b". ".as_slice(),
        });
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= paragraph_len {
            out.pop(); // trailing space
            out.extend(b"\n\n");
            sentences_in_paragraph = 0;
            paragraph_len = rng.gen_range(40..70);
        }
    }
    out
}
