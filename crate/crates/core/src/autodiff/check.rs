use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{GradientRequest, Graph, NodeId};

/// Central differences of a scalar function at `point`.
pub fn central_difference<F>(mut f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut out = Vec::with_capacity(point.numel());
    let mut probe = point.data().to_vec();
    for i in 0..point.numel() {
        let x0 = probe[i];
        probe[i] = x0 + step;
        let up = f(&Tensor::new(point.shape().to_vec(), probe.clone())?)?;
        probe[i] = x0 - step;
        let down = f(&Tensor::new(point.shape().to_vec(), probe.clone())?)?;
        probe[i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical {
                message: format!("non-finite value in stencil at coordinate {i}"),
                coordinate: Some(i),
            });
        }
        out.push((up - down) / (2.0 * step));
    }
    Tensor::new(point.shape().to_vec(), out)
}

/// `max_i |a_i - n_i| / (|n_i| + 1e-12)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let errs = analytic.zip_with(numeric, "relative_error", |a, n| (a - n).abs() / (n.abs() + 1e-12))?;
    Ok(errs.data().iter().fold(0.0, |m: f64, &e| m.max(e)))
}

fn eval_at<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let p = g.param(x.clone());
    let out = f(&mut g, p)?;
    g.scalar_value(out)
}

/// Compares the reverse-mode gradient of `f` against central differences
/// and returns the worst relative error over coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let numeric = central_difference(|x| eval_at(&f, x), point, step)?;
    let mut g = Graph::new();
    let p = g.param(point.clone());
    let out = f(&mut g, p)?;
    let gp = g.grad(&GradientRequest::new(out, vec![p]))?[0];
    let analytic = g.evaluate(gp)?.clone();
    relative_error(&analytic, &numeric)
}

/// Dense Hessian by differentiating the gradient once per coordinate.
pub fn hessian<F>(f: F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let n = point.numel();
    let mut g = Graph::new();
    let p = g.param(point.clone());
    let out = f(&mut g, p)?;
    let gp = g.grad(&GradientRequest::new(out, vec![p]).create_graph(true))?[0];
    let flat = g.vec(gp)?;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let gi = g.slice_rows(flat, i, 1)?;
        let gi = g.sum(gi)?;
        let row = g.grad(&GradientRequest::new(gi, vec![p]))?[0];
        data.extend_from_slice(g.evaluate(row)?.data());
    }
    Tensor::matrix(n, n, data)
}
