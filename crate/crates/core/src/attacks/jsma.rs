//! Jacobian-based saliency map attack with pairwise feature selection.

use crate::error::{Error, Result};
use crate::network::{best_other, Model};
use crate::numerics::Tensor;

use super::{check_box, check_label, AttackOutcome};

/// Best admissible pair `(p, q)`, `p < q`, from `domain`.
///
/// With `a = alpha_p + alpha_q` (target gradient) and `b = beta_p + beta_q`
/// (sum of the other gradients), a pair is admissible when `a > 0` and
/// `b < 0`; the score is `a * |b|`. Ties keep the first pair in index order.
pub fn pair_saliency(alpha: &[f64], beta: &[f64], domain: &[usize]) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (i, &p) in domain.iter().enumerate() {
        for &q in &domain[i + 1..] {
            let a = alpha[p] + alpha[q];
            let b = beta[p] + beta[q];
            if a > 0.0 && b < 0.0 {
                let s = a * -b;
                if best.map_or(true, |(bs, _, _)| s > bs) {
                    best = Some((s, p.min(q), p.max(q)));
                }
            }
        }
    }
    best.map(|(_, p, q)| (p, q))
}

/// Drives the prediction towards `target` (default: the runner-up class),
/// changing two features by `theta` per iteration until the target is
/// reached or `floor(gamma * d)` features have been modified.
pub fn jsma(
    model: &Model,
    x: &Tensor,
    label: usize,
    target: Option<usize>,
    theta: f64,
    gamma: f64,
) -> Result<AttackOutcome> {
    check_box(x)?;
    check_label(model, label)?;
    let d = x.len();
    let c = model.num_classes();
    let clean = model.forward(x)?;
    let target = target.unwrap_or_else(|| best_other(clean.logits.data(), label));
    check_label(model, target)?;
    if target == label {
        return Err(Error::InvalidArgument("jsma target equals the source label".into()));
    }
    let budget = (gamma * d as f64).floor() as usize;
    let mut cur = x.data().to_vec();
    let mut domain: Vec<usize> = (0..d)
        .filter(|&i| if theta > 0.0 { cur[i] < 1.0 } else { cur[i] > 0.0 })
        .collect();
    let mut modified = 0;
    let mut iterations = 0;
    let mut acts = clean;
    while acts.predicted_class != target && modified + 2 <= budget {
        let mut e_t = vec![0.0; c];
        e_t[target] = 1.0;
        let others: Vec<f64> = (0..c).map(|j| if j == target { 0.0 } else { 1.0 }).collect();
        let alpha = model.vector_jacobian_product(&acts, &e_t)?;
        let beta = model.vector_jacobian_product(&acts, &others)?;
        let Some((p, q)) = pair_saliency(alpha.data(), beta.data(), &domain) else {
            break;
        };
        for i in [p, q] {
            cur[i] = (cur[i] + theta).clamp(0.0, 1.0);
        }
        domain.retain(|&i| i != p && i != q);
        modified += 2;
        iterations += 1;
        acts = model.forward(&Tensor::new(x.shape().to_vec(), cur.clone())?)?;
    }
    Ok(AttackOutcome {
        success: acts.predicted_class == target,
        adversarial: Tensor::new(x.shape().to_vec(), cur)?,
        iterations,
    })
}
