use crate::error::{ensure, Error, Result};
use crate::numcore::{argmax, Real, Tensor};

/// Splits `[B, M, C]` (or `[N, C]`, one sentence) logits into sentences.
fn sentences<T: Real>(logits: &Tensor<T>) -> (usize, usize, usize) {
    let s = logits.shape();
    match s.len() {
        3 => (s[0], s[1], s[2]),
        _ => (1, logits.rows(), logits.cols()),
    }
}

/// Per-sentence top-1 agreement: the fraction of masked positions where
/// both argmaxes (lowest index on ties) coincide. Sentences without masked
/// positions are skipped.
pub fn sentence_agreements<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>, loss_mask: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        teacher.shape() == student.shape(),
        "teacher logits {:?} and student logits {:?} differ in shape",
        teacher.shape(),
        student.shape()
    );
    let (b, m, c) = sentences(teacher);
    ensure!(loss_mask.len() == b * m, "{} mask entries for {b}x{m} positions", loss_mask.len());
    let mut out = Vec::with_capacity(b);
    for s in 0..b {
        let (mut hits, mut n) = (0usize, 0usize);
        for r in (s * m..(s + 1) * m).filter(|&r| loss_mask[r] != 0.0) {
            n += 1;
            let rt = &teacher.data()[r * c..(r + 1) * c];
            let rs = &student.data()[r * c..(r + 1) * c];
            hits += usize::from(argmax(rt) == argmax(rs));
        }
        if n > 0 {
            out.push(hits as f64 / n as f64);
        }
    }
    Ok(out)
}

/// Teacher-forced top-1 agreement, macro-averaged over sentences.
pub fn top1_agreement<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>, loss_mask: &[f64]) -> Result<f64> {
    let per = sentence_agreements(teacher, student, loss_mask)?;
    if per.is_empty() {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Uncertainty coefficient `1 - softmax(z)[target]`, computed from the
/// off-target mass so that it stays accurate near zero.
pub fn unc(logits: &[f64], target: usize) -> Result<f64> {
    ensure!(
        target < logits.len(),
        "target {target} out of range for {} classes",
        logits.len()
    );
    ensure!(logits.iter().all(|x| x.is_finite()), "logits must be finite");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut other = 0.0;
    let mut all = 0.0;
    for (k, &z) in logits.iter().enumerate() {
        let e = (z - max).exp();
        all += e;
        if k != target {
            other += e;
        }
    }
    Ok(other / all)
}

/// Population standard deviation of one logit row.
pub fn logit_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
