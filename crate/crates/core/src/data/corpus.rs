use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// One instruction-following example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
}

impl InstructionRecord {
    pub fn new(instruction: impl Into<String>, input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
        }
    }

    fn violation(&self) -> Option<&'static str> {
        if self.instruction.is_empty() {
            Some("instruction is empty")
        } else if self.output.is_empty() {
            Some("output is empty")
        } else {
            None
        }
    }
}

/// How a corpus is partitioned after the seeded shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Exact counts; must sum to the corpus size.
    Counts { train: usize, valid: usize, test: usize },
    /// Validation and test fractions; training gets the remainder.
    Fractions { valid: f64, test: f64 },
}

impl SplitSpec {
    /// 14K train / 500 valid / 500 test, as fractions of 15K.
    pub fn dolly_ratio() -> Self {
        SplitSpec::Fractions {
            valid: 500.0 / 15_000.0,
            test: 500.0 / 15_000.0,
        }
    }

    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitSpec::Counts { train, valid, test } => {
                ensure!(
                    train + valid + test == n,
                    "split counts {train}+{valid}+{test} do not sum to {n} records"
                );
                Ok((train, valid, test))
            }
            SplitSpec::Fractions { valid, test } => {
                ensure!(
                    (0.0..1.0).contains(&valid) && (0.0..1.0).contains(&test) && valid + test < 1.0,
                    "split fractions valid={valid} test={test} are out of range"
                );
                let v = (valid * n as f64).round() as usize;
                let t = (test * n as f64).round() as usize;
                ensure!(v + t <= n, "split leaves no training records");
                Ok((n - v - t, v, t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusSplits {
    pub train: Vec<InstructionRecord>,
    pub valid: Vec<InstructionRecord>,
    pub test: Vec<InstructionRecord>,
}

/// Parses JSONL text; every malformed or invalid line is reported.
pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<InstructionRecord>> {
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<InstructionRecord>(line) {
            Ok(rec) => match rec.violation() {
                None => records.push(rec),
                Some(why) => bad.push((lineno, why.to_string())),
            },
            Err(e) => bad.push((lineno, e.to_string())),
        }
    }
    match bad.len() {
        0 => Ok(records),
        1 => {
            let (line, message) = bad.pop().unwrap();
            Err(Error::Parse {
                path: origin.to_string(),
                line,
                message,
            })
        }
        _ => Err(Error::Corpus(bad)),
    }
}

/// Seeded shuffle followed by a train/valid/test split.
pub fn split_records(mut records: Vec<InstructionRecord>, split: &SplitSpec, seed: u64) -> Result<CorpusSplits> {
    let (train, valid, _test) = split.sizes(records.len())?;
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = records.split_off(train + valid);
    let valid = records.split_off(train);
    Ok(CorpusSplits {
        train: records,
        valid,
        test,
    })
}

pub fn load_corpus(path: &Path, split: &SplitSpec, seed: u64) -> Result<CorpusSplits> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_jsonl(&text, &path.display().to_string())?;
    split_records(records, split, seed)
}

pub fn write_jsonl(path: &Path, records: &[InstructionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
