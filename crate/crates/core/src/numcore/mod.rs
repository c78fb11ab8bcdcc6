//! Dense tensors and reverse-mode differentiation over the small op set the
//! transformer and the distillation objectives need.
//!
//! All logarithms are natural logarithms, so every divergence is reported in
//! nats.

mod gemm;
pub mod gradcheck;
mod graph;
mod real;

use serde::{Deserialize, Serialize};

pub use gemm::{gemm, MatRef};
pub use gradcheck::{finite_difference_check, FnObjective, ScalarObjective};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;

use crate::error::{ensure, Error, Result};

/// Smallest probability ever passed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Storage type tag used by checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Row-major dense array with a fixed shape.
///
/// Values are always finite; constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values that are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![T::ZERO; n])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for optimizer updates.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Ok(Self::from_parts(shape, self.data))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    ensure!(
        temperature.is_finite() && temperature > 0.0,
        "temperature must be positive, got {temperature}"
    );
    Ok(())
}

/// Row-wise softmax of `logits / temperature` over the trailing dimension.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let logp = log_softmax_rows(logits, temperature)?;
    let data = logp.data.iter().map(|v| v.exp()).collect();
    Ok(Tensor::from_parts(logp.shape, data))
}

/// Row-wise log-softmax of `logits / temperature`, computed with the row
/// maximum subtracted first.
pub fn log_softmax_rows<T: Real>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite logit".into()));
    }
    let inv = T::from_f64(1.0 / temperature);
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data.chunks(c) {
        log_softmax_into(row, inv, &mut out);
    }
    Ok(Tensor::from_parts(logits.shape.clone(), out))
}

pub(crate) fn log_softmax_into<T: Real>(row: &[T], inv_temp: T, out: &mut Vec<T>) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let sum: T = row.iter().map(|&v| ((v - max) * inv_temp).exp()).sum();
    let lse = sum.ln();
    out.extend(row.iter().map(|&v| (v - max) * inv_temp - lse));
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let t = Tensor::<f64>::new(vec![1, 3], vec![0.0; 3]).unwrap();
        let p = softmax_rows(&t, 1.0).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn worked_softmax_value() {
        // exp(2), exp(1), exp(0) normalised, evaluated at high precision.
        let t = Tensor::<f64>::new(vec![1, 3], vec![2.0, 1.0, 0.0]).unwrap();
        let p = softmax_rows(&t, 1.0).unwrap();
        let expected = [0.665_240_955_774_821_6, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn high_temperature_approaches_uniform_monotonically() {
        let t = Tensor::<f64>::new(vec![1, 3], vec![2.0, 1.0, 0.0]).unwrap();
        let gap = |tau: f64| {
            let p = softmax_rows(&t, tau).unwrap();
            p.data()
                .iter()
                .map(|v| (v - 1.0 / 3.0).abs())
                .fold(0.0, f64::max)
        };
        let (g1, g10, g100) = (gap(1.0), gap(10.0), gap(100.0));
        assert!(g1 > g10 && g10 > g100);
        assert!(g100 < 1e-2);
    }

    #[test]
    fn rejects_bad_temperature_and_non_finite_logits() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(softmax_rows(&t, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_rows(&t, -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            Tensor::<f64>::new(vec![1, 2], vec![f64::NAN, 1.0]),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn log_softmax_stays_finite_for_tiny_probabilities() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![0.0, -80.0]).unwrap();
        let lp = log_softmax_rows(&t, 1.0).unwrap();
        assert!(lp.data().iter().all(|v| v.is_finite()));
        assert!((lp.data()[1] + 80.0).abs() < 1e-9);
        let t32 = Tensor::<f32>::new(vec![1, 2], vec![0.0, -80.0]).unwrap();
        assert!(log_softmax_rows(&t32, 1.0).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 2..40), tau in 0.05f64..20.0) {
            let n = row.len();
            let t = Tensor::new(vec![1, n], row).unwrap();
            let p = softmax_rows(&t, tau).unwrap();
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn shift_invariance(row in prop::collection::vec(-20.0f64..20.0, 2..30), c in -100.0f64..100.0) {
            let n = row.len();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = softmax_rows(&Tensor::new(vec![1, n], row).unwrap(), 1.0).unwrap();
            let b = softmax_rows(&Tensor::new(vec![1, n], shifted).unwrap(), 1.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-7);
            }
        }

        #[test]
        fn log_softmax_matches_log_of_softmax(row in prop::collection::vec(-30.0f64..30.0, 2..30)) {
            let n = row.len();
            let t = Tensor::new(vec![1, n], row).unwrap();
            let lp = log_softmax_rows(&t, 1.0).unwrap();
            let p = softmax_rows(&t, 1.0).unwrap();
            for (l, q) in lp.data().iter().zip(p.data()) {
                prop_assert!((l - q.ln()).abs() < 1e-6);
            }
        }
    }
}
