//! Central finite-difference gradient checks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Relative error `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = 1.0_f64.max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / scale
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(invalid(format!("epsilon {eps} outside (0, 1e-2]")));
    }
    Ok(())
}

fn eval_scalar<F>(f: &mut F, point: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot { numel: v.numel() });
    }
    Ok(v.item())
}

/// Maximum relative error between the graph gradient of `f` at `point` and
/// central differences with step `eps`. `f` receives the point as a leaf.
pub fn grad_check<F>(mut f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).unwrap_or_else(|| Tensor::zeros(point.dims()));
    let mut worst = 0.0_f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Result of [`grad_check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval_params<F>(f: &mut F, params: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let y = f(&mut g, &p)?;
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot { numel: v.numel() });
    }
    Ok(v.item())
}

/// Like [`grad_check`] over every coordinate of every parameter in `params`.
pub fn grad_check_params<F>(mut f: F, params: &ParamStore, eps: f64) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let y = f(&mut g, &p)?;
    g.backward(y)?;
    let analytic = p.grads(&g);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut probe = params.clone();
    let mut report = GradReport { max_rel_err: 0.0, worst: None, coordinates: 0 };
    for name in names {
        let n = params.get(&name)?.numel();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = eval_params(&mut f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = eval_params(&mut f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(&name)?.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{name}[{i}]: analytic {a}, numeric {numeric}"
                )));
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), i));
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![3, 1], vec![0.5, -2.0, 1.25]).unwrap();
        let point = Tensor::new(vec![2, 3], vec![1.0, 2.0, -3.0, 0.1, 0.2, 0.3]).unwrap();
        let err = grad_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv)?;
                Ok(g.sum(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn non_finite_is_reported() {
        let point = Tensor::row(vec![0.0, 1.0]);
        let r = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &point,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let point = Tensor::row(vec![1.0]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &point, 0.0).is_err());
        assert!(grad_check(|g, x| Ok(g.sum(x)), &point, 0.1).is_err());
    }
}
