//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Floor of the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Per-element comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn eval_scalar<F>(f: &F, input: &Tensor<f64>, as_param: bool) -> Result<(Graph<f64>, Var, Var)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = if as_param {
        g.param(input.clone())
    } else {
        g.constant(input.clone())
    };
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::contract(
            "finite_diff_check",
            format!("function must return a scalar, got shape {:?}", g.shape(y)),
        ));
    }
    Ok((g, x, y))
}

/// Compares the gradient of `f` at `input` with central differences of
/// step `eps`, returning the full report.
pub fn grad_report<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::contract("finite_diff_check", format!("eps must be positive, got {eps}")));
    }
    let (mut g, x, y) = eval_scalar(&f, input, true)?;
    let analytic = if g.requires_grad(y) {
        g.backward(y)?;
        g.grad(x)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()])
    } else {
        vec![0.0; input.numel()]
    };

    let mut numeric = Vec::with_capacity(input.numel());
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (gp, _, yp) = eval_scalar(&f, &probe, false)?;
        let fp = gp.value(yp).item();
        probe.data_mut()[i] = orig - eps;
        let (gm, _, ym) = eval_scalar(&f, &probe, false)?;
        let fm = gm.value(ym).item();
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * eps));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
    })
}

/// Maximum relative error between analytic and central-difference
/// gradients of the scalar function `f` at `input`.
pub fn finite_diff_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_report(f, input, eps).map(|r| r.max_rel_error)
}
