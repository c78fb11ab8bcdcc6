//! Difficulty buckets: masked tokens are ranked by the teacher's uncertainty
//! on the reference token and split at quantile edges.

use serde::{Deserialize, Serialize};

use super::agreement::{logit_std, unc};
use crate::error::{ensure, Result};
use crate::numcore::{argmax, Real, Tensor};
use crate::objectives::kl_logits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    /// Quantile edges, strictly increasing from 0 to 1.
    pub edges: Vec<f64>,
}

impl Default for BucketSpec {
    fn default() -> Self {
        Self::terciles()
    }
}

impl BucketSpec {
    pub fn terciles() -> Self {
        Self {
            edges: vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
        }
    }

    pub fn buckets(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.edges.len() >= 2, "a bucket spec needs at least two edges");
        ensure!(
            self.edges[0] == 0.0 && *self.edges.last().unwrap() == 1.0,
            "bucket edges must start at 0 and end at 1"
        );
        ensure!(
            self.edges.windows(2).all(|w| w[0] < w[1]),
            "bucket edges must be strictly increasing"
        );
        Ok(())
    }

    /// Conventional label for bucket `i`: easy/medium/hard for terciles,
    /// `q{i}` otherwise.
    pub fn label(&self, i: usize) -> String {
        if self.buckets() == 3 {
            ["easy", "medium", "hard"][i].to_string()
        } else {
            format!("q{i}")
        }
    }
}

/// Bucket index of every value: values are ranked ascending (ties by
/// position) and rank `r` of `n` falls in the bucket whose edges contain
/// `r / n`.
pub fn assign_buckets(values: &[f64], spec: &BucketSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let n = values.len();
    ensure!(
        n >= spec.buckets(),
        "{n} tokens cannot fill {} buckets",
        spec.buckets()
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        let q = rank as f64 / n as f64;
        out[i] = spec.edges[1..].iter().position(|&e| q < e).unwrap_or(spec.buckets() - 1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub tokens: usize,
    pub mean_unc: f64,
    /// Mean token-level `KL(p^t || p^s)`.
    pub mean_kl: f64,
    pub mean_logit_std: f64,
    pub top1_agreement: f64,
}

/// Per-bucket KL, student logit spread, and agreement over masked rows.
/// `targets[r]` is the reference token scored by logit row `r`.
pub fn bucketed_analysis<T: Real>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    targets: &[usize],
    loss_mask: &[f64],
    spec: &BucketSpec,
) -> Result<Vec<BucketStats>> {
    ensure!(teacher.shape() == student.shape(), "teacher and student logits differ in shape");
    let (rows, c) = (teacher.rows(), teacher.cols());
    ensure!(
        targets.len() == rows && loss_mask.len() == rows,
        "need one target and mask entry per logit row"
    );
    let mut unc_values = Vec::new();
    let mut stats = Vec::new();
    for r in (0..rows).filter(|&r| loss_mask[r] != 0.0) {
        let t: Vec<f64> = teacher.data()[r * c..(r + 1) * c].iter().map(|x| x.to_f64()).collect();
        let s: Vec<f64> = student.data()[r * c..(r + 1) * c].iter().map(|x| x.to_f64()).collect();
        unc_values.push(unc(&t, targets[r])?);
        stats.push((kl_logits(&t, &s, 1.0)?, logit_std(&s), argmax(&t) == argmax(&s)));
    }
    let assign = assign_buckets(&unc_values, spec)?;
    let mut out = vec![BucketStats::default(); spec.buckets()];
    for ((&b, &u), &(kl, std, agree)) in assign.iter().zip(&unc_values).zip(&stats) {
        let o = &mut out[b];
        o.tokens += 1;
        o.mean_unc += u;
        o.mean_kl += kl;
        o.mean_logit_std += std;
        o.top1_agreement += f64::from(u8::from(agree));
    }
    for o in &mut out {
        if o.tokens > 0 {
            let n = o.tokens as f64;
            o.mean_unc /= n;
            o.mean_kl /= n;
            o.mean_logit_std /= n;
            o.top1_agreement /= n;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_tokens_split_into_hand_sorted_terciles() {
        let u = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6];
        // Sorted: 0.1 0.2 0.3 | 0.4 0.5 0.6 | 0.7 0.8 0.9
        let expect = [2, 0, 1, 0, 2, 0, 2, 1, 1];
        assert_eq!(assign_buckets(&u, &BucketSpec::terciles()).unwrap(), expect);
        assert!(assign_buckets(&u[..2], &BucketSpec::terciles()).is_err());
        assert!(BucketSpec { edges: vec![0.0, 0.5, 0.5, 1.0] }.validate().is_err());
    }

    #[test]
    fn self_comparison_and_uniform_student() {
        let data: Vec<f64> = (0..36).map(|i| ((i * 7 % 11) as f64 * 0.37).sin()).collect();
        let t = Tensor::new(vec![9, 4], data).unwrap();
        let targets: Vec<usize> = (0..9).map(|i| i % 4).collect();
        let mask = vec![1.0; 9];
        let same = bucketed_analysis(&t, &t, &targets, &mask, &BucketSpec::terciles()).unwrap();
        for b in &same {
            assert_eq!(b.tokens, 3);
            assert_eq!(b.mean_kl, 0.0);
            assert_eq!(b.top1_agreement, 1.0);
        }
        let flat = Tensor::new(vec![9, 4], vec![0.25; 36]).unwrap();
        let uni = bucketed_analysis(&t, &flat, &targets, &mask, &BucketSpec::terciles()).unwrap();
        assert!(uni.iter().all(|b| b.mean_logit_std == 0.0));
    }
}
