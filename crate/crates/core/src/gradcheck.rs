//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it stays
//! independent of the backward rules it verifies.
//!
//! ReLU and max pooling are only piecewise smooth. When a perturbation
//! crosses a kink the central difference averages two slopes and no longer
//! estimates the gradient. Such elements are recognised by their forward and
//! backward differences disagreeing, and are counted in
//! [`TensorCheck::skipped`] instead of entering the error.

use rand::seq::index;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Per-tensor comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub checked: usize,
    /// Elements whose perturbation crossed a kink.
    pub skipped: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6)` over
    /// the checked elements.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    /// `(skipped, checked)` summed over all tensors.
    pub fn skipped(&self) -> (usize, usize) {
        self.tensors.iter().fold((0, 0), |(s, c), t| (s + t.skipped, c + t.checked))
    }
}

/// One-sided differences of a smooth function differ by about
/// `step * |f''|`; a kink makes them differ by the jump in slope.
const KINK_TOL: f64 = 1e-3;
const KINK_FLOOR: f64 = 1e-8;

/// Compares the gradients `loss_fn` produces for each of `wrt` against
/// central differences with the given `step`.
///
/// At most `max_elems` randomly chosen elements per tensor are perturbed
/// (all of them when the tensor is smaller). Gradients on `wrt` are cleared
/// before and after.
pub fn check<R: Rng>(
    wrt: &[Tensor<f64>],
    mut loss_fn: impl FnMut() -> Result<Tensor<f64>>,
    step: f64,
    max_elems: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    wrt.iter().for_each(Tensor::zero_grad);
    loss_fn()?.backward()?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    wrt.iter().for_each(Tensor::zero_grad);

    let _guard = no_grad();
    let base = loss_fn()?.item()?;
    let mut report = GradCheckReport::default();
    for (ti, t) in wrt.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = if n <= max_elems {
            (0..n).collect()
        } else {
            let mut v = index::sample(rng, n, max_elems).into_vec();
            v.sort_unstable();
            v
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut skipped = 0;
        for &i in &picks {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + step;
            let up = loss_fn()?.item()?;
            t.data_mut()[i] = orig - step;
            let down = loss_fn()?.item()?;
            t.data_mut()[i] = orig;
            let (fwd, bwd) = ((up - base) / step, (base - down) / step);
            if (fwd - bwd).abs() > KINK_TOL * (fwd.abs() + bwd.abs()) + KINK_FLOOR {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
        report.tensors.push(TensorCheck {
            index: ti,
            checked: picks.len(),
            skipped,
            rel_error: diff2.sqrt() / denom,
        });
    }
    Ok(report)
}
