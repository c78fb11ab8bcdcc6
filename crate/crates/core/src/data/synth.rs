//! Seeded generator for a small synthetic instruction corpus.
//!
//! Tasks mix deterministic answers (reversal, counting, copying) with
//! open-ended ones (naming a colour, picking a word) so the teacher has both
//! confident and uncertain positions.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::InstructionRecord;

const WORDS: &[&str] = &[
    "cat", "dog", "sun", "map", "fox", "owl", "bee", "jam", "ink", "oak", "cup", "hat", "net", "pen", "rug",
    "van", "zip", "log", "mud", "toy", "kite", "lamp", "frog", "moon", "rain", "seed", "tree", "wolf", "bird",
    "fish", "gold", "milk", "rose", "sand", "star", "wind",
];

const COLORS: &[&str] = &["red", "blue", "green", "gold", "pink", "gray"];
const ANIMALS: &[&str] = &["cat", "dog", "fox", "owl", "bee", "frog", "wolf", "bird", "fish"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty list")
}

fn record(rng: &mut ChaCha8Rng) -> InstructionRecord {
    match rng.random_range(0..9) {
        0 => {
            let w = pick(rng, WORDS);
            InstructionRecord::new(format!("Reverse {w}."), "", w.chars().rev().collect::<String>())
        }
        1 => {
            let w = pick(rng, WORDS);
            InstructionRecord::new(format!("Repeat {w} twice."), "", format!("{w} {w}"))
        }
        2 => {
            let w = pick(rng, WORDS);
            InstructionRecord::new(format!("Shout {w}."), "", w.to_uppercase())
        }
        3 => InstructionRecord::new("Name a color.", "", pick(rng, COLORS)),
        4 => InstructionRecord::new("Name an animal.", "", pick(rng, ANIMALS)),
        5 => {
            let a = rng.random_range(1..6u32);
            let b = rng.random_range(a + 1..=9);
            let out = (a..=b).map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            InstructionRecord::new(format!("Count {a} to {b}."), "", out)
        }
        6 => {
            let w1 = pick(rng, WORDS);
            let w2 = pick(rng, WORDS);
            InstructionRecord::new("Join the words.", format!("{w1} {w2}"), format!("{w1}-{w2}"))
        }
        7 => {
            let mut letters: Vec<char> = (0..4).map(|_| (b'a' + rng.random_range(0..8u8)) as char).collect();
            let input: String = letters.iter().collect();
            letters.sort_unstable();
            InstructionRecord::new("Sort the letters.", input, letters.into_iter().collect::<String>())
        }
        _ => {
            let w = pick(rng, WORDS);
            let first = w.chars().next().unwrap();
            let options: Vec<&str> = WORDS.iter().copied().filter(|x| x.starts_with(first)).collect();
            InstructionRecord::new(format!("A word like {w}?"), "", pick(rng, &options))
        }
    }
}

/// `n` records drawn from the task grammar with a fixed seed.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<InstructionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| record(&mut rng)).collect()
}
