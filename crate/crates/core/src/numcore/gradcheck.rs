//! Central finite-difference gradient checking.

use crate::error::{ensure, Error, Result};

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait ScalarObjective {
    fn value(&mut self, params: &[f64]) -> Result<f64>;
    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a pair of closures into a [`ScalarObjective`].
pub struct FnObjective<V, G> {
    value: V,
    gradient: G,
}

impl<V, G> FnObjective<V, G>
where
    V: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    pub fn new(value: V, gradient: G) -> Self {
        Self { value, gradient }
    }
}

impl<V, G> ScalarObjective for FnObjective<V, G>
where
    V: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&mut self, params: &[f64]) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(params)
    }
}

/// Relative disagreement used by the checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the analytic gradient against central differences with step
/// `h * (1 + |theta_i|)` and returns the largest relative error.
pub fn finite_difference_check<O: ScalarObjective + ?Sized>(
    objective: &mut O,
    params: &[f64],
    h: f64,
) -> Result<f64> {
    ensure!(h > 0.0 && h.is_finite(), "step must be positive, got {h}");
    let first = objective.value(params)?;
    let second = objective.value(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = objective.gradient(params)?;
    ensure!(
        analytic.len() == params.len(),
        "gradient has {} entries for {} parameters",
        analytic.len(),
        params.len()
    );
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let step = h * (1.0 + params[i].abs());
        work[i] = params[i] + step;
        let up = objective.value(&work)?;
        work[i] = params[i] - step;
        let down = objective.value(&work)?;
        work[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
