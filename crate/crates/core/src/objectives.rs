//! Training losses: masked likelihood, temperature-scaled KL in either
//! direction, generalised Jensen-Shannon, and the online teacher/student
//! pair.
//!
//! Every loss exists twice: a graph builder used by the trainers (so
//! gradients come for free) and a value function over plain tensors that
//! evaluates the same graph on constants.
//!
//! Conventions: natural logarithms; `KL(p || q) = sum p (ln p - ln q) >= 0`;
//! losses are means over the rows whose weight is 1. Logit row `i` is scored
//! with weight `weights[i]`, so callers shift the response mask by one so
//! that each row is paired with the token it predicts.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numcore::{Graph, Real, Tensor, Var, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    ForwardKl,
    ReverseKl,
    Jsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `KL(teacher || student)`: mean-seeking.
    Forward,
    /// `KL(student || teacher)`: mode-seeking.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub divergence: Divergence,
    pub temperature: f64,
    /// Weight of the KL term in the online teacher loss.
    pub alpha: f64,
    pub jsd_beta: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            divergence: Divergence::ForwardKl,
            temperature: 1.0,
            alpha: 0.5,
            jsd_beta: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        check_alpha(self.alpha)?;
        check_beta(self.jsd_beta)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    ensure!(t.is_finite() && t > 0.0, "temperature must be positive, got {t}");
    Ok(())
}

fn check_alpha(a: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&a), "alpha must lie in [0, 1], got {a}");
    Ok(())
}

fn check_beta(b: f64) -> Result<()> {
    ensure!(b > 0.0 && b < 1.0, "jsd beta must lie in (0, 1), got {b}");
    Ok(())
}

/// Row weights normalised to sum to one.
fn mean_weights(weights: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        weights.iter().all(|&w| w == 0.0 || w == 1.0),
        "loss mask entries must be 0 or 1"
    );
    let n: f64 = weights.iter().sum();
    ensure!(n > 0.0, "loss mask selects no positions");
    Ok(weights.iter().map(|w| w / n).collect())
}

/// Masked mean of `-ln softmax(logits)[target]`.
pub fn mle<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let w = mean_weights(weights)?;
    let lp = g.log_softmax(logits, 1.0)?;
    let picked = g.gather(lp, targets)?;
    let s = g.weighted_sum(picked, &w)?;
    Ok(g.scale(s, -1.0))
}

/// `tau^2 * masked mean of KL(softmax(reference / tau) || softmax(other / tau))`.
///
/// Gradients reach whichever side the caller has not detached.
pub fn kl<T: Real>(g: &mut Graph<T>, reference: Var, other: Var, temperature: f64, weights: &[f64]) -> Result<Var> {
    check_temperature(temperature)?;
    ensure!(
        g.shape(reference) == g.shape(other),
        "logit shapes differ: {:?} vs {:?}",
        g.shape(reference),
        g.shape(other)
    );
    let w = mean_weights(weights)?;
    let lr = g.log_softmax(reference, temperature)?;
    let lo = g.log_softmax(other, temperature)?;
    let pr = g.exp(lr);
    let diff = g.sub(lr, lo)?;
    let prod = g.mul(pr, diff)?;
    let rows = g.sum_rows(prod);
    let s = g.weighted_sum(rows, &w)?;
    Ok(g.scale(s, temperature * temperature))
}

/// Standard distillation loss; the teacher side is always stop-gradient.
pub fn kd_kl<T: Real>(
    g: &mut Graph<T>,
    teacher: Var,
    student: Var,
    temperature: f64,
    direction: Direction,
    weights: &[f64],
) -> Result<Var> {
    let t = g.detach(teacher);
    match direction {
        Direction::Forward => kl(g, t, student, temperature, weights),
        Direction::Reverse => kl(g, student, t, temperature, weights),
    }
}

/// Generalised Jensen-Shannon divergence
/// `beta KL(p || m) + (1 - beta) KL(q || m)`, `m = beta p + (1 - beta) q`,
/// with `p` the (stop-gradient) teacher and `q` the student. The mixture's
/// logarithm is floored at the probability floor.
pub fn jsd<T: Real>(
    g: &mut Graph<T>,
    teacher: Var,
    student: Var,
    beta: f64,
    temperature: f64,
    weights: &[f64],
) -> Result<Var> {
    check_beta(beta)?;
    check_temperature(temperature)?;
    ensure!(
        g.shape(teacher) == g.shape(student),
        "logit shapes differ: {:?} vs {:?}",
        g.shape(teacher),
        g.shape(student)
    );
    let w = mean_weights(weights)?;
    let t = g.detach(teacher);
    let lp = g.log_softmax(t, temperature)?;
    let lq = g.log_softmax(student, temperature)?;
    let p = g.exp(lp);
    let q = g.exp(lq);
    let bp = g.scale(p, beta);
    let bq = g.scale(q, 1.0 - beta);
    let m = g.add(bp, bq)?;
    let lm = g.log_floor(m, PROB_FLOOR);
    let dp = g.sub(lp, lm)?;
    let dq = g.sub(lq, lm)?;
    let tp = g.mul(bp, dp)?;
    let tq = g.mul(bq, dq)?;
    let both = g.add(tp, tq)?;
    let rows = g.sum_rows(both);
    let s = g.weighted_sum(rows, &w)?;
    Ok(g.scale(s, temperature * temperature))
}

/// Loss selected by `cfg.divergence`, teacher side stop-gradient.
pub fn distill<T: Real>(g: &mut Graph<T>, teacher: Var, student: Var, cfg: &DistillConfig, weights: &[f64]) -> Result<Var> {
    match cfg.divergence {
        Divergence::ForwardKl => kd_kl(g, teacher, student, cfg.temperature, Direction::Forward, weights),
        Divergence::ReverseKl => kd_kl(g, teacher, student, cfg.temperature, Direction::Reverse, weights),
        Divergence::Jsd => jsd(g, teacher, student, cfg.jsd_beta, cfg.temperature, weights),
    }
}

/// Online teacher loss `alpha KL(p^s || p^ta) + (1 - alpha) MLE(p^ta)`.
///
/// The student side is stop-gradient; only the adapted teacher's logits
/// receive gradient.
pub fn teacher_loss<T: Real>(
    g: &mut Graph<T>,
    adapted_teacher: Var,
    student: Var,
    targets: &[usize],
    weights: &[f64],
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    let s = g.detach(student);
    let k = kl(g, s, adapted_teacher, temperature, weights)?;
    let m = mle(g, adapted_teacher, targets, weights)?;
    let k = g.scale(k, alpha);
    let m = g.scale(m, 1.0 - alpha);
    g.add(k, m)
}

/// Online student loss `KL(p^ta || p^s)`; the adapted teacher is
/// stop-gradient.
pub fn student_loss<T: Real>(
    g: &mut Graph<T>,
    adapted_teacher: Var,
    student: Var,
    weights: &[f64],
    temperature: f64,
) -> Result<Var> {
    kd_kl(g, adapted_teacher, student, temperature, Direction::Forward, weights)
}

/// Teacher and student logits over the same positions plus the row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistributions {
    pub teacher_logits: Tensor<f64>,
    pub student_logits: Tensor<f64>,
    /// One 0/1 weight per logit row.
    pub loss_mask: Vec<f64>,
}

impl TokenDistributions {
    pub fn new(teacher_logits: Tensor<f64>, student_logits: Tensor<f64>, loss_mask: Vec<f64>) -> Result<Self> {
        ensure!(
            teacher_logits.shape() == student_logits.shape(),
            "teacher logits {:?} and student logits {:?} differ in shape",
            teacher_logits.shape(),
            student_logits.shape()
        );
        ensure!(
            teacher_logits.rows() == loss_mask.len(),
            "{} logit rows but {} mask entries",
            teacher_logits.rows(),
            loss_mask.len()
        );
        Ok(Self {
            teacher_logits,
            student_logits,
            loss_mask,
        })
    }

    fn flat(t: &Tensor<f64>) -> Tensor<f64> {
        t.clone().reshape(vec![t.rows(), t.cols()]).expect("same size")
    }

    fn eval(&self, f: impl FnOnce(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new();
        let t = g.constant(Self::flat(&self.teacher_logits));
        let s = g.constant(Self::flat(&self.student_logits));
        let out = f(&mut g, t, s)?;
        g.scalar(out)
    }
}

fn eval_logits(logits: &Tensor<f64>, f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(TokenDistributions::flat(logits));
    let out = f(&mut g, l)?;
    g.scalar(out)
}

pub fn mle_loss(logits: &Tensor<f64>, targets: &[usize], loss_mask: &[f64]) -> Result<f64> {
    ensure!(
        logits.rows() == targets.len() && targets.len() == loss_mask.len(),
        "{} logit rows, {} targets, {} mask entries",
        logits.rows(),
        targets.len(),
        loss_mask.len()
    );
    eval_logits(logits, |g, l| mle(g, l, targets, loss_mask))
}

// Divergence values are clamped at zero: for equal distributions the
// summation can round to a few ulps below it.

pub fn kd_kl_loss(dists: &TokenDistributions, temperature: f64, direction: Direction) -> Result<f64> {
    let v = dists.eval(|g, t, s| kd_kl(g, t, s, temperature, direction, &dists.loss_mask))?;
    Ok(v.max(0.0))
}

pub fn jsd_loss(dists: &TokenDistributions, beta: f64) -> Result<f64> {
    let v = dists.eval(|g, t, s| jsd(g, t, s, beta, 1.0, &dists.loss_mask))?;
    Ok(v.max(0.0))
}

/// `teacher_logits` here are the adapted teacher's.
pub fn teacher_loss_value(dists: &TokenDistributions, targets: &[usize], alpha: f64) -> Result<f64> {
    ensure!(targets.len() == dists.loss_mask.len(), "one target per logit row required");
    dists.eval(|g, t, s| teacher_loss(g, t, s, targets, &dists.loss_mask, alpha, 1.0))
}

pub fn student_loss_value(dists: &TokenDistributions) -> Result<f64> {
    let v = dists.eval(|g, t, s| student_loss(g, t, s, &dists.loss_mask, 1.0))?;
    Ok(v.max(0.0))
}

/// `KL(softmax(p_logits / tau) || softmax(q_logits / tau))` for one row.
pub fn kl_logits(p_logits: &[f64], q_logits: &[f64], temperature: f64) -> Result<f64> {
    ensure!(p_logits.len() == q_logits.len(), "rows differ in length");
    let rows = |x: &[f64]| Tensor::new(vec![1, x.len()], x.to_vec());
    let lp = crate::numcore::log_softmax_rows(&rows(p_logits)?, temperature)?;
    let lq = crate::numcore::log_softmax_rows(&rows(q_logits)?, temperature)?;
    let v: f64 = lp
        .data()
        .iter()
        .zip(lq.data())
        .map(|(&a, &b)| if a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum();
    if !v.is_finite() {
        return Err(Error::NumericDomain("KL is not finite".into()));
    }
    Ok(v.max(0.0))
}
