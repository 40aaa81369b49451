//! Central finite-difference check of recorded gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU or
    /// max-pool kink.
    pub excluded: usize,
}

/// Check every coordinate of `x`. `f` builds a scalar on a fresh graph from
/// the input variable it is handed.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, &all, eps)
}

/// As [`grad_check`], restricted to the flat coordinates in `indices`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, indices: &[usize], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    let base_sig = g.kink_signature();
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        if g.value(out).numel() != 1 {
            return Err(Error::NonScalarLoss(g.value(out).shape().to_vec()));
        }
        Ok((g.value(out).item(), g.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != base_sig || sm != base_sig {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Reduction;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_f64(vec![5], &[0.1, -0.4, 2.0, 3.0, -7.0]).unwrap();
        let r = grad_check(|g, v| g.sum(v), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn cross_entropy_passes() {
        let x = Tensor::from_f64(vec![2, 3], &[0.3, -1.2, 0.8, 2.0, 0.1, -0.5]).unwrap();
        let r = grad_check(
            |g, v| g.weighted_cross_entropy(v, &[2, 0], &[0.5, 3.0, 1.2], Reduction::WeightedMean),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn kinks_are_excluded() {
        let x = Tensor::from_f64(vec![3], &[1e-7, 1.0, -1.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.relu(v)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }
}
