//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `closure` against central
/// differences with step `h` on up to `per_param` randomly sampled
/// coordinates of every parameter tensor.
///
/// `closure` must return `(loss, gradients)` and be deterministic: dropout
/// has to run in evaluation mode or with a frozen mask.
pub fn grad_check<F, R>(
    mut closure: F,
    params: &[Tensor<f64>],
    h: f64,
    per_param: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Gradients<f64>)>,
    R: Rng + ?Sized,
{
    let (loss0, grads) = closure(params)?;
    let (loss_again, _) = closure(params)?;
    if loss0.to_bits() != loss_again.to_bits() {
        return Err(Error::Verification(format!(
            "closure is not deterministic: {loss0} then {loss_again}"
        )));
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None, passed: true };
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let coords = sample(rng, n, per_param.min(n)).into_vec();
        for idx in coords {
            let analytic = grads.get(pi).map_or(0.0, |g| g.data()[idx]);
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let (plus, _) = closure(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let (minus, _) = closure(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, idx, analytic, numeric));
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
