//! Decision-based boundary attack. Uses forward passes only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::network::Model;
use crate::numerics::Tensor;

use super::{check_box, check_label, l2, AttackOutcome};

const INIT_TRIES: usize = 200;
const BLEND_STEPS: usize = 20;
const WINDOW: usize = 10;
const ADAPT: f64 = 1.1;
const SPHERICAL_TARGET: f64 = 0.5;
const STEP_TARGET: f64 = 0.25;

/// Best distance after each iteration, for auditing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryTrace {
    pub best_l2: Vec<f64>,
    pub accepted: usize,
}

/// Starts from uniform noise that is misclassified, blends it towards `x`
/// by bisection, then alternates an orthogonal step on the sphere around `x`
/// with a contraction towards `x`. A candidate is accepted only when it is
/// misclassified and strictly closer than the current point.
pub fn boundary_attack(
    model: &Model,
    x: &Tensor,
    label: usize,
    seed: u64,
    iterations: usize,
) -> Result<(AttackOutcome, BoundaryTrace)> {
    check_box(x)?;
    check_label(model, label)?;
    let x0 = x.data();
    let d = x0.len();
    let shape = x.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adversarial = |v: &[f64]| -> Result<bool> {
        Ok(model.forward(&Tensor::new(shape.clone(), v.to_vec())?)?.predicted_class != label)
    };
    let mut trace = BoundaryTrace::default();

    let mut start = None;
    for _ in 0..INIT_TRIES {
        let cand: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        if adversarial(&cand)? {
            start = Some(cand);
            break;
        }
    }
    let Some(noise) = start else {
        return Ok((
            AttackOutcome {
                adversarial: x.clone(),
                success: false,
                iterations: 0,
            },
            trace,
        ));
    };

    // Bisection on the blend factor: 1 is the noise, 0 the clean image.
    let blend = |t: f64| -> Vec<f64> { x0.iter().zip(&noise).map(|(a, b)| a + t * (b - a)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BLEND_STEPS {
        let mid = 0.5 * (lo + hi);
        if adversarial(&blend(mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut cur = if hi == 1.0 { noise.clone() } else { blend(hi) };
    let mut dist = l2(&cur, x0);

    let mut spherical = 0.01;
    let mut source = 0.01;
    let (mut sph_ok, mut step_ok) = (0usize, 0usize);
    for it in 0..iterations {
        // Orthogonal perturbation of relative size `spherical`, projected
        // back onto the sphere of radius `dist` around x.
        let eta: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dir: Vec<f64> = cur.iter().zip(x0).map(|(c, o)| c - o).collect();
        let dir_norm = dist.max(f64::MIN_POSITIVE);
        let along: f64 = eta.iter().zip(&dir).map(|(e, u)| e * u).sum::<f64>() / dir_norm;
        let mut ortho: Vec<f64> = eta.iter().zip(&dir).map(|(e, u)| e - along * u / dir_norm).collect();
        let on: f64 = ortho.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for v in &mut ortho {
            *v *= spherical * dist / on;
        }
        let moved: Vec<f64> = dir.iter().zip(&ortho).map(|(u, o)| u + o).collect();
        let mn: f64 = moved.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let sph: Vec<f64> = x0
            .iter()
            .zip(&moved)
            .map(|(o, m)| (o + m * dist / mn).clamp(0.0, 1.0))
            .collect();
        let cand: Vec<f64> = sph
            .iter()
            .zip(x0)
            .map(|(s, o)| (s + source * (o - s)).clamp(0.0, 1.0))
            .collect();

        let outs = model.forward_batch(&[&sph, &cand])?;
        if outs[0].predicted_class != label {
            sph_ok += 1;
        }
        let cand_dist = l2(&cand, x0);
        if outs[1].predicted_class != label && cand_dist < dist {
            step_ok += 1;
            cur = cand;
            dist = cand_dist;
            trace.accepted += 1;
        }
        trace.best_l2.push(dist);

        if (it + 1) % WINDOW == 0 {
            let w = WINDOW as f64;
            if sph_ok as f64 / w > SPHERICAL_TARGET {
                spherical *= ADAPT;
            } else {
                spherical /= ADAPT;
            }
            if step_ok as f64 / w > STEP_TARGET {
                source *= ADAPT;
            } else {
                source /= ADAPT;
            }
            sph_ok = 0;
            step_ok = 0;
        }
    }

    Ok((
        AttackOutcome {
            adversarial: Tensor::new(shape, cur)?,
            success: true,
            iterations,
        },
        trace,
    ))
}
