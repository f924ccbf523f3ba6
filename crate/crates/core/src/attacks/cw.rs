//! Carlini-Wagner L2 attack with a confidence margin.
//!
//! Optimises `w` where `x' = (tanh(w) + 1) / 2`, minimising
//! `||x' - x||_2 + a * max(Z_y(x') - max_{j != y} Z_j(x') + c, 0)` with Adam,
//! and binary-searches the trade-off `a`.

use crate::error::Result;
use crate::network::{best_other, Model};
use crate::numerics::Tensor;

use super::{check_box, check_label, l2, AttackOutcome, AttackParams};

const NUDGE: f64 = 1e-6;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// `Z_y - max_{j != y} Z_j`.
fn margin(z: &[f64], y: usize) -> (f64, usize) {
    let o = best_other(z, y);
    (z[y] - z[o], o)
}

/// Untargeted C&W L2. Succeeds when the label changes with logit margin at
/// least `params.confidence`; returns the smallest-L2 success found across
/// the binary search, or the clean input flagged as a failure.
pub fn cw_l2(model: &Model, x: &Tensor, label: usize, params: &AttackParams) -> Result<AttackOutcome> {
    check_box(x)?;
    check_label(model, label)?;
    let c = params.confidence;
    let x0 = x.data();
    let d = x0.len();

    let clean = model.forward(x)?;
    if margin(clean.logits.data(), label).0 <= -c {
        return Ok(AttackOutcome {
            adversarial: x.clone(),
            success: true,
            iterations: 0,
        });
    }

    let w0: Vec<f64> = x0
        .iter()
        .map(|v| (2.0 * v.clamp(NUDGE, 1.0 - NUDGE) - 1.0).atanh())
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let (mut lower, mut upper) = (params.tradeoff_min, f64::INFINITY);
    let mut a = params.tradeoff;
    let mut iterations = 0;
    let abort_every = (params.steps / 10).max(1);

    for _ in 0..params.binary_steps {
        let mut w = w0.clone();
        let mut m = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut round_success = false;
        let mut prev_check = f64::INFINITY;
        for step in 0..params.steps {
            iterations += 1;
            let t: Vec<f64> = w.iter().map(|wi| wi.tanh()).collect();
            let xp: Vec<f64> = t.iter().map(|ti| 0.5 * (ti + 1.0)).collect();
            let xt = Tensor::new(x.shape().to_vec(), xp)?;
            let acts = model.forward(&xt)?;
            let xp = xt.data();
            let dist = l2(xp, x0);
            let (mg, other) = margin(acts.logits.data(), label);
            let hinge = (mg + c).max(0.0);
            let loss = dist + a * hinge;

            if acts.predicted_class != label && mg <= -c && best.as_ref().map_or(true, |b| dist < b.0) {
                best = Some((dist, xp.to_vec()));
            }
            if acts.predicted_class != label && mg <= -c {
                round_success = true;
            }

            if step % abort_every == 0 {
                if loss > prev_check * 0.9999 {
                    break;
                }
                prev_check = loss;
            }

            // Gradient with respect to x'.
            let mut gx: Vec<f64> = if dist > 0.0 {
                xp.iter().zip(x0).map(|(p, o)| (p - o) / dist).collect()
            } else {
                vec![0.0; d]
            };
            if hinge > 0.0 {
                let mut cot = vec![0.0; model.num_classes()];
                cot[label] = a;
                cot[other] = -a;
                let gz = model.vector_jacobian_product(&acts, &cot)?;
                for (g, h) in gx.iter_mut().zip(gz.data()) {
                    *g += h;
                }
            }
            // Chain through x' = (tanh(w) + 1) / 2 and take an Adam step.
            let k = (step + 1) as i32;
            let (b1, b2) = (1.0 - BETA1.powi(k), 1.0 - BETA2.powi(k));
            for i in 0..d {
                let g = gx[i] * 0.5 * (1.0 - t[i] * t[i]);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                w[i] -= params.learning_rate * (m[i] / b1) / ((v[i] / b2).sqrt() + ADAM_EPS);
            }
        }

        if round_success {
            upper = upper.min(a);
            a = 0.5 * (lower + upper);
        } else {
            lower = lower.max(a);
            a = if upper.is_finite() {
                0.5 * (lower + upper)
            } else {
                (a * 10.0).min(params.tradeoff_max)
            };
        }
    }

    Ok(match best {
        Some((_, xp)) => AttackOutcome {
            adversarial: Tensor::new(x.shape().to_vec(), xp)?,
            success: true,
            iterations,
        },
        None => AttackOutcome {
            adversarial: x.clone(),
            success: false,
            iterations,
        },
    })
}
