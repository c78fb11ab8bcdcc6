//! Autoregressive decoding and the minimal language-model interface used by
//! the exposure-bias metrics.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{GradMode, TransformerLm};
use crate::adapters::AdapterSet;
use crate::data::EOS_ID;
use crate::error::{ensure, Error, Result};
use crate::numcore::{argmax, softmax_rows, Graph, Real, Tensor};

/// Anything that scores next tokens given a prefix.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;

    /// Longest prefix [`CausalLm::logits`] accepts.
    fn max_context(&self) -> usize;

    /// Row `m` of the `[tokens.len(), vocab]` result scores the token that
    /// follows `tokens[..=m]`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>>;
}

impl<T: Real> CausalLm for TransformerLm<T> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_context(&self) -> usize {
        self.config().max_seq_len
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.sequence_logits(tokens, None)?.cast())
    }
}

/// A transformer together with an optional adapter set.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedLm<'a, T> {
    pub model: &'a TransformerLm<T>,
    pub adapters: Option<&'a AdapterSet<T>>,
}

impl<T: Real> CausalLm for AdaptedLm<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_context(&self) -> usize {
        self.model.config().max_seq_len
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.model.sequence_logits(tokens, self.adapters)?.cast())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            mode: DecodeMode::Greedy,
        }
    }

    pub fn sample(max_new_tokens: usize, temperature: f64) -> Self {
        Self {
            max_new_tokens,
            mode: DecodeMode::Sample { temperature },
        }
    }

    fn validate(&self) -> Result<()> {
        if let DecodeMode::Sample { temperature } = self.mode {
            ensure!(
                temperature.is_finite() && temperature > 0.0,
                "sampling temperature must be positive, got {temperature}"
            );
        }
        Ok(())
    }
}

fn pick<R: Rng>(row: &[f64], mode: DecodeMode, rng: &mut R) -> Result<usize> {
    match mode {
        DecodeMode::Greedy => Ok(argmax(row)),
        DecodeMode::Sample { temperature } => {
            let t = Tensor::new(vec![1, row.len()], row.to_vec())?;
            let p = softmax_rows(&t, temperature)?;
            let dist = WeightedIndex::new(p.data()).map_err(|e| Error::NumericDomain(e.to_string()))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Continues `prompt` until eos, `max_new_tokens`, or the context limit.
///
/// The returned continuation includes the eos token when one was produced.
pub fn generate<L: CausalLm, R: Rng>(lm: &L, prompt: &[usize], cfg: &DecodeConfig, rng: &mut R) -> Result<Vec<usize>> {
    cfg.validate()?;
    ensure!(!prompt.is_empty(), "prompt must contain at least one token");
    ensure!(
        prompt.len() <= lm.max_context(),
        "prompt of {} tokens exceeds the context of {}",
        prompt.len(),
        lm.max_context()
    );
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && tokens.len() < lm.max_context() {
        let logits = lm.logits(&tokens)?;
        let next = pick(logits.row(tokens.len() - 1), cfg.mode, rng)?;
        tokens.push(next);
        out.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(out)
}

/// Decodes several prompts together with one forward pass per new token.
///
/// Rows are right-padded; causal attention keeps every row's next-token
/// scores independent of the padding after it. Rows draw from `rng` in
/// order, so the result matches calling [`generate`] row by row only for
/// greedy decoding.
pub fn generate_batch<T: Real, R: Rng>(
    model: &TransformerLm<T>,
    adapters: Option<&AdapterSet<T>>,
    prompts: &[&[usize]],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    ensure!(!prompts.is_empty(), "no prompts to decode");
    let limit = model.config().max_seq_len;
    let vocab = model.config().vocab_size;
    ensure!(
        prompts.iter().all(|p| !p.is_empty() && p.len() <= limit),
        "every prompt must hold between 1 and {limit} tokens"
    );
    let mut rows: Vec<Vec<usize>> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut outs = vec![Vec::new(); prompts.len()];
    let mut live: Vec<bool> = rows.iter().map(|r| r.len() < limit && cfg.max_new_tokens > 0).collect();
    while live.iter().any(|&l| l) {
        let seq = rows.iter().map(Vec::len).max().unwrap();
        let batch = rows.len();
        let mut ids = vec![crate::data::PAD_ID; batch * seq];
        for (b, r) in rows.iter().enumerate() {
            ids[b * seq..b * seq + r.len()].copy_from_slice(r);
        }
        let mut g = Graph::new();
        let fp = model.forward(&mut g, &ids, batch, seq, adapters, GradMode::NONE)?;
        let logits = g.value(fp.logits);
        for b in 0..batch {
            if !live[b] {
                continue;
            }
            let at = (b * seq + rows[b].len() - 1) * vocab;
            let row: Vec<f64> = logits[at..at + vocab].iter().map(|v| v.to_f64()).collect();
            let next = pick(&row, cfg.mode, rng)?;
            rows[b].push(next);
            outs[b].push(next);
            if next == EOS_ID || outs[b].len() >= cfg.max_new_tokens || rows[b].len() >= limit {
                live[b] = false;
            }
        }
    }
    Ok(outs)
}
