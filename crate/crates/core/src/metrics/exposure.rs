//! Exposure-bias measurement.
//!
//! For a horizon `l`, the regret `R(l)` sums the per-step divergence
//! `KL(p || q)` between teacher `p` and student `q` along contexts the
//! student generates itself; the oracle-context error `eps(l)` averages the
//! same per-step divergence along contexts the teacher generates.
//! `ExAccErr = (R - l eps) / (l eps) * 100%` is the excess error caused by
//! the student consuming its own outputs. Contexts are sampled; the
//! per-step expectation over the next token is computed exactly.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::CausalLm;
use crate::numcore::{softmax_rows, Tensor};
use crate::objectives::kl_logits;
use crate::trainers::derive_seed;

/// Below this both the regret and the oracle error count as zero.
pub const EXPOSURE_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub horizon: usize,
    pub samples: usize,
    pub regret: f64,
    pub regret_se: f64,
    pub epsilon: f64,
    pub epsilon_se: f64,
    pub exaccerr_percent: f64,
}

/// `(R - l eps) / (l eps) * 100`, returning 0 when both terms vanish and an
/// error when only the denominator does.
pub fn exaccerr_percent(regret: f64, epsilon: f64, horizon: usize) -> Result<f64> {
    let denom = horizon as f64 * epsilon;
    if regret.abs() < EXPOSURE_GUARD && denom.abs() < EXPOSURE_GUARD {
        return Ok(0.0);
    }
    if denom.abs() < EXPOSURE_GUARD {
        return Err(Error::DegenerateDenominator {
            regret,
            denominator: denom,
        });
    }
    Ok((regret - denom) / denom * 100.0)
}

fn sample_row<R: Rng>(logits: &[f64], rng: &mut R) -> Result<usize> {
    let p = softmax_rows(&Tensor::new(vec![1, logits.len()], logits.to_vec())?, 1.0)?;
    let dist = WeightedIndex::new(p.data()).map_err(|e| Error::NumericDomain(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Sum over `l` steps of `KL(p || q)` along one context path sampled from
/// `sampler` (which is either `teacher` or `student`).
fn path_divergence<R: Rng>(
    teacher: &dyn CausalLm,
    student: &dyn CausalLm,
    sample_from_teacher: bool,
    prompt: &[usize],
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    let sampler = if sample_from_teacher { teacher } else { student };
    let mut ctx = prompt.to_vec();
    for _ in 1..horizon {
        let logits = sampler.logits(&ctx)?;
        let next = sample_row(logits.row(ctx.len() - 1), rng)?;
        ctx.push(next);
    }
    // Causal models: one pass over the full path scores every prefix.
    let lp = teacher.logits(&ctx)?;
    let lq = student.logits(&ctx)?;
    let start = prompt.len() - 1;
    (start..start + horizon)
        .map(|m| kl_logits(lp.row(m), lq.row(m), 1.0))
        .sum()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimates of `R(l)`, `eps(l)` and ExAccErr.
///
/// Sample `i` starts from `prompts[i % prompts.len()]`. Regret and oracle
/// paths use independent random streams derived from `seed`.
pub fn exposure_metrics(
    teacher: &dyn CausalLm,
    student: &dyn CausalLm,
    prompts: &[Vec<usize>],
    horizon: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<ExposureReport> {
    ensure!(horizon >= 1, "horizon must be at least 1");
    ensure!(mc_samples >= 1, "need at least one Monte-Carlo sample");
    ensure!(!prompts.is_empty(), "need at least one prompt");
    ensure!(
        teacher.vocab_size() == student.vocab_size(),
        "vocabulary mismatch: {} vs {}",
        teacher.vocab_size(),
        student.vocab_size()
    );
    let limit = teacher.max_context().min(student.max_context());
    for p in prompts {
        ensure!(!p.is_empty(), "prompts must be non-empty");
        ensure!(
            p.len() + horizon - 1 <= limit,
            "prompt of {} tokens plus horizon {horizon} exceeds the context of {limit}",
            p.len()
        );
    }
    let mut regret_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mc-regret"));
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mc-oracle"));
    let mut regrets = Vec::with_capacity(mc_samples);
    let mut errors = Vec::with_capacity(mc_samples);
    for i in 0..mc_samples {
        let prompt = &prompts[i % prompts.len()];
        regrets.push(path_divergence(teacher, student, false, prompt, horizon, &mut regret_rng)?);
        errors.push(path_divergence(teacher, student, true, prompt, horizon, &mut oracle_rng)? / horizon as f64);
    }
    let (regret, regret_se) = mean_se(&regrets);
    let (epsilon, epsilon_se) = mean_se(&errors);
    Ok(ExposureReport {
        horizon,
        samples: mc_samples,
        regret,
        regret_se,
        epsilon,
        epsilon_se,
        exaccerr_percent: exaccerr_percent(regret, epsilon, horizon)?,
    })
}

/// First-order Markov language model given by a row-stochastic transition
/// matrix. Useful as a small model with exactly enumerable trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramLm {
    transitions: Vec<Vec<f64>>,
}

impl BigramLm {
    pub fn new(transitions: Vec<Vec<f64>>) -> Result<Self> {
        let c = transitions.len();
        ensure!(c >= 1, "empty transition matrix");
        for row in &transitions {
            ensure!(row.len() == c, "transition matrix must be square");
            ensure!(row.iter().all(|&p| p > 0.0 && p.is_finite()), "transition probabilities must be positive");
            let s: f64 = row.iter().sum();
            ensure!((s - 1.0).abs() < 1e-12, "transition rows must sum to 1, got {s}");
        }
        Ok(Self { transitions })
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transitions[from][to]
    }
}

impl CausalLm for BigramLm {
    fn vocab_size(&self) -> usize {
        self.transitions.len()
    }

    fn max_context(&self) -> usize {
        usize::MAX
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor<f64>> {
        let c = self.transitions.len();
        ensure!(tokens.iter().all(|&t| t < c), "token outside the vocabulary of {c}");
        let data = tokens.iter().flat_map(|&t| self.transitions[t].iter().map(|p| p.ln())).collect();
        Tensor::new(vec![tokens.len(), c], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_and_degenerate_denominator() {
        assert_eq!(exaccerr_percent(0.0, 0.0, 5).unwrap(), 0.0);
        assert!(matches!(
            exaccerr_percent(0.5, 0.0, 5),
            Err(Error::DegenerateDenominator { .. })
        ));
        assert!((exaccerr_percent(1.5, 0.2, 5).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn identical_models_report_zero() {
        let m = BigramLm::new(vec![vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let r = exposure_metrics(&m, &m, &[vec![0]], 4, 50, 1).unwrap();
        assert_eq!((r.regret, r.epsilon, r.exaccerr_percent), (0.0, 0.0, 0.0));
    }

    #[test]
    fn horizon_one_has_no_sampling() {
        let p = BigramLm::new(vec![vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let q = BigramLm::new(vec![vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let r = exposure_metrics(&p, &q, &[vec![1]], 1, 10, 1).unwrap();
        let kl = 0.4 * (0.4f64 / 0.2).ln() + 0.6 * (0.6f64 / 0.8).ln();
        assert!((r.regret - kl).abs() < 1e-12 && (r.epsilon - kl).abs() < 1e-12);
        assert_eq!(r.regret_se, 0.0);
        assert!(r.exaccerr_percent.abs() < 1e-9);
    }

    #[test]
    fn preconditions() {
        let p = BigramLm::new(vec![vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        assert!(exposure_metrics(&p, &p, &[vec![0]], 0, 1, 0).is_err());
        assert!(exposure_metrics(&p, &p, &[vec![0]], 1, 0, 0).is_err());
        assert!(exposure_metrics(&p, &p, &[], 1, 1, 0).is_err());
        assert!(BigramLm::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
    }
}
