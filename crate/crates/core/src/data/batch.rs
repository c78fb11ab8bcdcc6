use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::InstructionRecord;
use super::tokenizer::{ByteTokenizer, BOS_ID, EOS_ID, PAD_ID};
use crate::error::{ensure, Result};

/// Renders the prompt side of a record.
///
/// Without input: `"\n\nInstruction:\n{instruction}\n\nResponse:\n"`.
/// With input: `"\n\nInstruction:\n{instruction}\n{input}\n\nResponse:\n"`.
pub fn render_prompt(record: &InstructionRecord) -> String {
    if record.input.is_empty() {
        format!("\n\nInstruction:\n{}\n\nResponse:\n", record.instruction)
    } else {
        format!(
            "\n\nInstruction:\n{}\n{}\n\nResponse:\n",
            record.instruction, record.input
        )
    }
}

/// A tokenized record: `prompt` starts with bos, `response` ends with eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.prompt.len() + self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokenizes `record`, dropping prompt tokens from the left (after bos)
    /// until it fits in `max_len`. Returns `None` when the response alone does
    /// not fit.
    pub fn encode(record: &InstructionRecord, tok: &ByteTokenizer, max_len: usize) -> Option<Self> {
        let mut response = tok.encode(&record.output);
        response.push(EOS_ID);
        let body = tok.encode(&render_prompt(record));
        if response.len() + 2 > max_len {
            return None;
        }
        let room = max_len - response.len() - 1;
        let keep = body.len().min(room);
        let mut prompt = Vec::with_capacity(keep + 1);
        prompt.push(BOS_ID);
        prompt.extend_from_slice(&body[body.len() - keep..]);
        Some(Self { prompt, response })
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }
}

/// Encodes every record that fits, warning about the ones that do not.
pub fn encode_records(records: &[InstructionRecord], tok: &ByteTokenizer, max_len: usize) -> Vec<Example> {
    records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let e = Example::encode(r, tok, max_len);
            if e.is_none() {
                log::warn!("record {i}: response does not fit in {max_len} tokens, skipped");
            }
            e
        })
        .collect()
}

/// Right-padded token matrix with a response mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub token_ids: Vec<usize>,
    /// 1 on response and eos positions, 0 on prompt and padding.
    pub loss_mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
    pub pad_id: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        ensure!(!examples.is_empty(), "a batch needs at least one example");
        let seq = examples.iter().map(|e| e.len()).max().unwrap();
        let batch = examples.len();
        let mut token_ids = vec![PAD_ID; batch * seq];
        let mut loss_mask = vec![0u8; batch * seq];
        let mut lengths = Vec::with_capacity(batch);
        for (b, e) in examples.iter().enumerate() {
            let row = b * seq;
            for (m, &t) in e.prompt.iter().chain(&e.response).enumerate() {
                token_ids[row + m] = t;
            }
            for m in e.prompt.len()..e.len() {
                loss_mask[row + m] = 1;
            }
            lengths.push(e.len());
        }
        Ok(Self {
            token_ids,
            loss_mask,
            batch,
            seq,
            pad_id: PAD_ID,
            lengths,
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.token_ids[b * self.seq..b * self.seq + self.lengths[b]]
    }

    /// Next-token targets and weights per logit row.
    ///
    /// Row `(b, m)` predicts token `m + 1`; its weight is the mask of that
    /// token. The last position of every row has weight zero.
    pub fn prediction_targets(&self) -> (Vec<usize>, Vec<f64>) {
        let n = self.batch * self.seq;
        let mut targets = vec![self.pad_id; n];
        let mut mask = vec![0.0; n];
        for b in 0..self.batch {
            for m in 0..self.seq - 1 {
                let i = b * self.seq + m;
                targets[i] = self.token_ids[i + 1];
                mask[i] = f64::from(self.loss_mask[i + 1]);
            }
        }
        (targets, mask)
    }

    pub fn masked_tokens(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Seeded shuffle of the encodable records, then fixed-size chunks.
pub fn build_batches(
    records: &[InstructionRecord],
    tok: &ByteTokenizer,
    max_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TokenBatch>> {
    ensure!(batch_size >= 1, "batch size must be at least 1");
    let examples = encode_records(records, tok, max_len);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|idx| TokenBatch::from_examples(&idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>()))
        .collect()
}

/// Endless epoch-wise sampler over encoded examples.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    examples: Vec<Example>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(examples: Vec<Example>, seed: u64) -> Result<Self> {
        ensure!(!examples.is_empty(), "cannot sample from an empty example set");
        let mut s = Self {
            order: (0..examples.len()).collect(),
            examples,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// The next `batch_size` examples, reshuffling at epoch boundaries.
    pub fn next_examples(&mut self, batch_size: usize) -> Vec<&Example> {
        let mut picked = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        picked.into_iter().map(|i| &self.examples[i]).collect()
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<TokenBatch> {
        let ex = self.next_examples(batch_size);
        TokenBatch::from_examples(&ex)
    }
}
