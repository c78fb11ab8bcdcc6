use std::path::Path;

use serde::{Deserialize, Serialize};

use super::agreement::unc;
use crate::data::{Example, TokenBatch};
use crate::error::{ensure, Error, Result};
use crate::model::{AdaptedLm, TransformerLm};
use crate::numcore::{argmax, softmax_rows, Real, Tensor};

/// One of the teacher's top-k candidates at one response position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCase {
    pub example: usize,
    /// Index of the predicted token within the full sequence.
    pub position: usize,
    pub target: usize,
    /// Teacher uncertainty on the target.
    pub unc: f64,
    /// Whether teacher and student argmaxes agree at this position.
    pub top1_agree: bool,
    /// Rank among the teacher's candidates, from 0.
    pub rank: usize,
    pub token: usize,
    pub teacher_prob: f64,
    pub student_prob: f64,
}

/// Teacher-forced listing of the teacher's top-`k` tokens at every response
/// position, with both models' probabilities.
pub fn dump_token_cases<T: Real>(
    teacher: AdaptedLm<'_, T>,
    student: &TransformerLm<T>,
    examples: &[Example],
    k: usize,
) -> Result<Vec<TokenCase>> {
    ensure!(k >= 1, "k must be at least 1");
    let c = student.config().vocab_size;
    ensure!(k <= c, "k = {k} exceeds the vocabulary of {c}");
    let mut out = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let batch = TokenBatch::from_examples(&[e])?;
        let t: Tensor<f64> = teacher.model.forward_logits(&batch, teacher.adapters)?.cast();
        let s: Tensor<f64> = student.forward_logits(&batch, None)?.cast();
        let flat = |x: Tensor<f64>| x.reshape(vec![batch.seq, c]);
        let (t, s) = (flat(t)?, flat(s)?);
        let (pt, ps) = (softmax_rows(&t, 1.0)?, softmax_rows(&s, 1.0)?);
        let (targets, mask) = batch.prediction_targets();
        for m in (0..batch.seq).filter(|&m| mask[m] != 0.0) {
            let (tp, sp) = (pt.row(m), ps.row(m));
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| tp[b].total_cmp(&tp[a]).then(a.cmp(&b)));
            let agree = argmax(t.row(m)) == argmax(s.row(m));
            let u = unc(t.row(m), targets[m])?;
            for (rank, &tok) in order.iter().take(k).enumerate() {
                out.push(TokenCase {
                    example: i,
                    position: m + 1,
                    target: targets[m],
                    unc: u,
                    top1_agree: agree,
                    rank,
                    token: tok,
                    teacher_prob: tp[tok],
                    student_prob: sp[tok],
                });
            }
        }
    }
    Ok(out)
}

pub fn write_token_cases(cases: &[TokenCase], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cases {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
