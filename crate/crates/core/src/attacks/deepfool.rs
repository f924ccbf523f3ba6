//! DeepFool: repeated projection onto the nearest linearised class boundary.

use crate::error::Result;
use crate::network::Model;
use crate::numerics::Tensor;

use super::{check_box, check_label, AttackOutcome};

/// Added to every projection distance. Without it iterates that the box
/// clip pulls back land on the boundary (logit tie) and stay there.
pub const STEP_SLACK: f64 = 1e-4;

/// Accumulates minimal linearised steps `r_i` and evaluates
/// `clip(x + (1 + overshoot) * sum r_i)` until the label leaves `label` or
/// `max_steps` projections have been taken. Each step is lengthened by
/// [`STEP_SLACK`] so the iterate cannot settle exactly on a boundary.
pub fn deepfool(model: &Model, x: &Tensor, label: usize, overshoot: f64, max_steps: usize) -> Result<AttackOutcome> {
    check_box(x)?;
    check_label(model, label)?;
    let d = x.len();
    let c = model.num_classes();
    let mut r_total = vec![0.0; d];
    let mut cur = x.clone();
    let mut steps = 0;
    loop {
        let acts = model.forward(&cur)?;
        if acts.predicted_class != label || steps >= max_steps {
            return Ok(AttackOutcome {
                success: acts.predicted_class != label,
                adversarial: cur,
                iterations: steps,
            });
        }
        let (jac, acts) = model.logit_jacobian(&cur)?;
        let z = acts.logits.data();
        let j = jac.data();
        let grad_y = &j[label * d..(label + 1) * d];
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for k in (0..c).filter(|&k| k != label) {
            let wk: Vec<f64> = j[k * d..(k + 1) * d].iter().zip(grad_y).map(|(a, b)| a - b).collect();
            let norm2: f64 = wk.iter().map(|v| v * v).sum();
            if norm2 == 0.0 {
                continue;
            }
            let fk = z[k] - z[label];
            let norm = norm2.sqrt();
            let dist = fk.abs() / norm;
            if best.as_ref().map_or(true, |b| dist < b.0) {
                best = Some((dist, (dist + STEP_SLACK) / norm, wk));
            }
        }
        let Some((_, scale, w)) = best else {
            // Flat logits: no direction to follow.
            return Ok(AttackOutcome {
                success: false,
                adversarial: cur,
                iterations: steps,
            });
        };
        for (r, wi) in r_total.iter_mut().zip(&w) {
            *r += scale * wi;
        }
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(&r_total)
            .map(|(v, r)| (v + (1.0 + overshoot) * r).clamp(0.0, 1.0))
            .collect();
        cur = Tensor::new(x.shape().to_vec(), next)?;
        steps += 1;
    }
}
