//! Sign-gradient attacks under an L-infinity budget.

use crate::error::{Error, Result};
use crate::network::{LossSpec, Model};
use crate::numerics::Tensor;

use super::{check_box, check_label, AttackOutcome};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step of size `epsilon` on the cross-entropy of `label`.
pub fn fgsm(model: &Model, x: &Tensor, label: usize, epsilon: f64) -> Result<AttackOutcome> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be finite and >= 0")));
    }
    sign_steps(model, x, label, epsilon, epsilon, 1)
}

/// Iterates `x <- Clip_{x0, eps}(x + alpha * sign(grad))` from `x0 = x`,
/// clipping to the pixel box after every update.
pub fn linf_pgd(
    model: &Model,
    x: &Tensor,
    label: usize,
    epsilon: f64,
    alpha: f64,
    steps: usize,
) -> Result<AttackOutcome> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) || !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need epsilon >= 0 and alpha > 0, got {epsilon} / {alpha}"
        )));
    }
    sign_steps(model, x, label, epsilon, alpha, steps)
}

fn sign_steps(model: &Model, x: &Tensor, label: usize, epsilon: f64, alpha: f64, steps: usize) -> Result<AttackOutcome> {
    check_box(x)?;
    check_label(model, label)?;
    let x0 = x.data();
    let lo: Vec<f64> = x0.iter().map(|v| (v - epsilon).max(0.0)).collect();
    let hi: Vec<f64> = x0.iter().map(|v| (v + epsilon).min(1.0)).collect();
    let loss = LossSpec::CrossEntropy { label };
    let mut cur = x.clone();
    for _ in 0..steps {
        let g = model.input_gradient(&cur, &loss)?;
        let next: Vec<f64> = cur
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(i, (v, gi))| (v + alpha * sign(*gi)).clamp(lo[i], hi[i]))
            .collect();
        cur = Tensor::new(x.shape().to_vec(), next)?;
    }
    let success = model.predict(&cur)? != label;
    Ok(AttackOutcome {
        adversarial: cur,
        success,
        iterations: steps,
    })
}
