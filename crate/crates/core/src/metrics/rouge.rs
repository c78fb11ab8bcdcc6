use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Length of the longest common subsequence, in `O(|a| |b|)` time and
/// `O(|b|)` memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L over token sequences.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<RougeScore> {
    ensure!(
        !candidate.is_empty() && !reference.is_empty(),
        "ROUGE-L needs two non-empty sequences"
    );
    let l = lcs_len(candidate, reference) as f64;
    let precision = l / candidate.len() as f64;
    let recall = l / reference.len() as f64;
    // Harmonic mean of precision and recall, 2PR / (P + R), in its single
    // rounding form.
    let f1 = 2.0 * l / (candidate.len() + reference.len()) as f64;
    Ok(RougeScore { precision, recall, f1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_cases() {
        let s = rouge_l(b"abcd", b"acde").unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l(b"abc", b"abc").unwrap().f1, 1.0);
        assert_eq!(rouge_l(b"abc", b"xyz").unwrap().f1, 0.0);
        assert!(rouge_l::<u8>(b"", b"x").is_err());
    }

    #[test]
    fn swapping_exchanges_precision_and_recall() {
        let a = [1, 2, 3, 4, 5];
        let b = [2, 9, 4];
        let x = rouge_l(&a, &b).unwrap();
        let y = rouge_l(&b, &a).unwrap();
        assert_eq!((x.precision, x.recall), (y.recall, y.precision));
    }
}
