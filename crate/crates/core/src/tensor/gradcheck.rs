//! Finite-difference verification of backward passes.
//!
//! The checked function must be deterministic across calls: anything random
//! (masks, dropout patterns, pseudo-labels) has to be frozen by the caller
//! before handing the closure in, otherwise the difference quotient measures
//! noise instead of the derivative.

use crate::scalar::Scalar;

use super::{no_grad, Result, Tensor};

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (parameter index in the input slice, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Compares analytic gradients of `f` with central differences of step `h`
/// for every element of every tensor in `params`.
///
/// Relative error per element is |fd - an| / max(|fd|, |an|); entries where
/// both magnitudes are below `atol` count as exact.
pub fn finite_diff_check<S, F>(
    params: &[Tensor<S>],
    f: F,
    h: f64,
    atol: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn() -> Result<Tensor<S>>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v.to_f64_lossy()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    for p in params {
        p.zero_grad();
    }

    let eval = || -> Result<f64> { no_grad(&f).map(|t| t.item().to_f64_lossy()) };

    let mut report = GradCheckReport::default();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.apply(|d| d[i] = orig + S::from_f64_lossy(h));
            let lp = eval()?;
            p.apply(|d| d[i] = orig - S::from_f64_lossy(h));
            let lm = eval()?;
            p.apply(|d| d[i] = orig);

            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[pi][i];
            let scale = fd.abs().max(an.abs());
            let rel = if scale < atol { 0.0 } else { (fd - an).abs() / scale };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, i));
            }
        }
    }
    Ok(report)
}
