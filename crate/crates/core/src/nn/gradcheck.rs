//! Finite-difference verification of graph gradients.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over smooth coordinates of |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
    pub max_rel_error: f64,
    /// Coordinates where the one-sided differences disagree, i.e. the input sits on a kink.
    pub kinks: Vec<usize>,
}

/// Compares the gradient of the scalar `f(x)` against central differences.
///
/// `f` receives a fresh graph and the node holding `x`; it must return a
/// scalar node. Coordinates flagged as kinks are excluded from the error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let y = f(&mut g, v)?;
        let out = g.value(y);
        if out.len() != 1 {
            return Err(Error::NonScalarLoss(out.shape().to_vec()));
        }
        let val = out.data()[0];
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(val)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut g, xv)?;
    let analytic = g
        .backward(y)?
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let f0 = eval(x)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        kinks: Vec::new(),
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let forward = (fp - f0) / eps;
        let backward = (f0 - fm) / eps;
        let numeric = (fp - fm) / (2.0 * eps);
        if (forward - backward).abs() > 1e-2 * (1.0 + numeric.abs()) {
            report.kinks.push(i);
            continue;
        }
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_accurate() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let xx = g.mul(x, x)?;
                Ok(g.sum(xx))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.kinks.is_empty());
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let x = Tensor::vector(vec![0.5, -1.5, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.scale(x, 3.0);
                Ok(g.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn relu_kink_is_flagged() {
        let x = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.relu(x);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.kinks, vec![0]);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn eps_range_and_non_finite() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
        let err = grad_check(
            |g, x| {
                let y = g.scale(x, f64::INFINITY);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(err.is_err());
    }
}
