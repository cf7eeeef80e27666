//! Central-difference gradient oracle and the check suite built on it.
//!
//! `finite_diff_grad` never touches the reverse pass: it only re-evaluates
//! the forward closure, so it stays an independent witness for `backward`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences (f(x+h e_k) - f(x-h e_k)) / 2h per element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { context: format!("finite_diff_grad element {k}") });
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Worst relative disagreement between analytic and numeric gradients.
///
/// Per element: |a - n| / max(|a| + |n|, floor). The floor turns the test
/// absolute for near-zero gradients, where central differences only carry
/// ~1e-10 of signal.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// One entry of the machine-readable pass list emitted by the suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckItem {
    pub name: String,
    pub seeds: u32,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckItem {
    pub fn line(&self) -> String {
        format!(
            "[{}] {} (seeds={}, max_rel_err={:.3e}, tol={:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seeds,
            self.max_rel_error,
            self.tolerance
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 4.0, 0.0, 7.5, -2.2]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_finite_evaluations() {
        let x = Tensor::scalar(0.0);
        let r = finite_diff_grad(|t| Ok(1.0 / t.data()[0]), &x, 1e-5);
        // 1/x is finite at +-h, so this passes; ln(x) at -h is NaN.
        assert!(r.is_ok());
        let r = finite_diff_grad(|t| Ok(t.data()[0].ln()), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
