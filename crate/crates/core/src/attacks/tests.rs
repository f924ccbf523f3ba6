use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::Dataset;
use crate::network::LossSpec;
use crate::numerics::softmax_slice;
use crate::testutil::{linear, rand_t, small_cnn, t};

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.linf_distance(b).unwrap()
}

fn in_box(x: &Tensor) -> bool {
    x.data().iter().all(|v| (0.0..=1.0).contains(v))
}

#[test]
fn fgsm_zero_budget_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let y = m.predict(&x).unwrap();
    assert_eq!(fgsm(&m, &x, y, 0.0).unwrap().adversarial, x);
}

#[test]
fn fgsm_follows_analytic_sign_on_linear_model() {
    let rows = vec![vec![0.5, -1.0, 2.0, 0.0], vec![1.5, 0.25, -0.5, 0.0], vec![-1.0, 1.0, 0.3, 0.0]];
    let m = linear(&rows, &[0.0, 0.1, -0.1]);
    let x = t(vec![1, 4, 1], vec![0.4, 0.5, 0.6, 0.5]);
    let y = m.predict(&x).unwrap();
    let z: Vec<f64> = rows.iter().map(|r| r.iter().zip(x.data()).map(|(a, b)| a * b).sum()).collect();
    let z: Vec<f64> = z.iter().zip([0.0, 0.1, -0.1]).map(|(a, b)| a + b).collect();
    let p = softmax_slice(&z).unwrap();
    let eps = 0.1;
    let out = fgsm(&m, &x, y, eps).unwrap();
    for i in 0..4 {
        let g: f64 = (0..3).map(|j| rows[j][i] * (p[j] - f64::from(u8::from(j == y)))).sum();
        let expect = if g > 0.0 { eps } else if g < 0.0 { -eps } else { 0.0 };
        let delta = out.adversarial.data()[i] - x.data()[i];
        assert!((delta - expect).abs() < 1e-15, "feature {i}: {delta} vs {expect}");
    }
}

#[test]
fn pgd_step_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10 {
        let m = small_cnn(&mut rng, 4);
        let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
        let y = m.predict(&x).unwrap();
        assert_eq!(linf_pgd(&m, &x, y, 0.1, 0.01, 0).unwrap().adversarial, x);
        let (eps, alpha) = if trial % 2 == 0 { (0.05, 0.2) } else { (0.3, 0.02) };
        let one = linf_pgd(&m, &x, y, eps, alpha, 1).unwrap().adversarial;
        let f = fgsm(&m, &x, y, eps.min(alpha)).unwrap().adversarial;
        assert_eq!(one, f);
        let many = linf_pgd(&m, &x, y, eps, alpha, 15).unwrap().adversarial;
        assert!(linf(&many, &x) <= eps + 1e-12);
        assert!(in_box(&many));
    }
}

#[test]
fn pgd_increases_loss_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = small_cnn(&mut rng, 3);
    let mut up = 0;
    for _ in 0..20 {
        let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
        let y = m.predict(&x).unwrap();
        let loss = LossSpec::CrossEntropy { label: y };
        let before = loss.value(&m.forward(&x).unwrap());
        let adv = linf_pgd(&m, &x, y, 0.1, 0.01, 20).unwrap().adversarial;
        let after = loss.value(&m.forward(&adv).unwrap());
        up += usize::from(after > before);
    }
    assert!(up >= 18, "{up}");
}

fn cw_params(c: f64) -> AttackParams {
    AttackParams {
        confidence: c,
        steps: 300,
        learning_rate: 0.05,
        binary_steps: 8,
        ..AttackParams::defaults(AttackKind::CwL2)
    }
}

#[test]
fn cw_meets_margin_and_higher_confidence_is_more_confident() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let m = linear(&rows, &[0.0, 0.0, 0.0]);
    let mut compared = 0;
    for _ in 0..10 {
        let x = rand_t(&mut rng, vec![1, 6, 1], 0.2, 0.8);
        let y = m.predict(&x).unwrap();
        let lo = cw_l2(&m, &x, y, &cw_params(0.0)).unwrap();
        let hi = cw_l2(&m, &x, y, &cw_params(2.0)).unwrap();
        for (out, c) in [(&lo, 0.0), (&hi, 2.0)] {
            assert!(in_box(&out.adversarial));
            if out.success {
                let a = m.forward(&out.adversarial).unwrap();
                assert_ne!(a.predicted_class, y);
                assert!(a.logit_margin(y) <= -c, "margin {}", a.logit_margin(y));
            }
        }
        if lo.success && hi.success {
            compared += 1;
            let cl = confidence_level(&m, &lo.adversarial).unwrap();
            let ch = confidence_level(&m, &hi.adversarial).unwrap();
            assert!(ch >= cl, "{ch} < {cl}");
            assert!(x.l2_distance(&hi.adversarial).unwrap() >= x.l2_distance(&lo.adversarial).unwrap());
        }
    }
    assert!(compared >= 5, "{compared}");
}

#[test]
fn cw_returns_input_when_already_adversarial() {
    let m = linear(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]);
    let x = t(vec![1, 2, 1], vec![0.1, 0.9]);
    let out = cw_l2(&m, &x, 0, &cw_params(0.5)).unwrap();
    assert!(out.success);
    assert_eq!(out.adversarial, x);
    assert_eq!(out.iterations, 0);
}

#[test]
fn deepfool_projects_onto_linear_boundary() {
    // Two logits: z0 = 0, z1 = w.x + b. Class 0 wins while w.x + b <= 0.
    let w = [0.8, -0.5, 0.3, 0.6];
    let b = -0.2;
    let m = linear(&[vec![0.0; 4], w.to_vec()], &[0.0, b]);
    let x = t(vec![1, 4, 1], vec![0.6, 0.3, 0.5, 0.4]);
    let f: f64 = w.iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>() + b;
    assert!(f > 0.0);
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    // One projection travels the boundary distance plus the fixed slack.
    let analytic = f.abs() / wn + deepfool::STEP_SLACK;

    let out = deepfool(&m, &x, 1, 0.0, 1).unwrap();
    let a = m.forward(&out.adversarial).unwrap();
    assert!((a.logit_margin(1) + wn * deepfool::STEP_SLACK).abs() < 1e-12);
    assert!((x.l2_distance(&out.adversarial).unwrap() - analytic).abs() < 1e-12);

    let out = deepfool(&m, &x, 1, 0.02, 50).unwrap();
    assert!(out.success);
    assert_eq!(out.iterations, 1);
    assert!((x.l2_distance(&out.adversarial).unwrap() - 1.02 * analytic).abs() < 1e-12);
    assert_ne!(m.predict(&out.adversarial).unwrap(), 1);
}

#[test]
fn deepfool_flips_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = small_cnn(&mut rng, 3);
    let mut flipped = 0;
    for _ in 0..20 {
        let x = rand_t(&mut rng, vec![6, 6, 1], 0.2, 0.8);
        let y = m.predict(&x).unwrap();
        let out = deepfool(&m, &x, y, 0.02, 50).unwrap();
        assert!(in_box(&out.adversarial));
        assert_eq!(out.success, m.predict(&out.adversarial).unwrap() != y);
        flipped += usize::from(out.success);
    }
    assert!(flipped >= 18, "{flipped}");
}

#[test]
fn jsma_first_pair_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 12;
    let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let m = linear(&rows, &[0.0; 3]);
    let x = rand_t(&mut rng, vec![1, d, 1], 0.0, 0.5);
    let y = m.predict(&x).unwrap();
    let target = (y + 1) % 3;
    let alpha: Vec<f64> = rows[target].clone();
    let beta: Vec<f64> = (0..d).map(|i| (0..3).filter(|&j| j != target).map(|j| rows[j][i]).sum()).collect();
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for p in 0..d {
        for q in p + 1..d {
            let (a, b) = (alpha[p] + alpha[q], beta[p] + beta[q]);
            if a > 0.0 && b < 0.0 && a * -b > best.0 {
                best = (a * -b, p, q);
            }
        }
    }
    let domain: Vec<usize> = (0..d).collect();
    assert_eq!(pair_saliency(&alpha, &beta, &domain), Some((best.1, best.2)));

    let out = jsma(&m, &x, y, Some(target), 1.0, 2.0 / d as f64).unwrap();
    let changed: Vec<usize> = (0..d).filter(|&i| out.adversarial.data()[i] != x.data()[i]).collect();
    assert_eq!(changed, vec![best.1, best.2]);
}

#[test]
fn jsma_budget_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 0.6);
    let y = m.predict(&x).unwrap();
    let out = jsma(&m, &x, y, None, 1.0, 1.0 / 36.0).unwrap();
    assert!(!out.success);
    assert_eq!(out.adversarial, x);
    for gamma in [0.1, 0.3, 1.0] {
        let out = jsma(&m, &x, y, None, 1.0, gamma).unwrap();
        let l0 = x.l0_distance(&out.adversarial).unwrap();
        assert!(l0 as f64 <= (gamma * 36.0).floor());
        assert!(in_box(&out.adversarial));
    }
    assert!(jsma(&m, &x, y, Some(y), 1.0, 0.1).is_err());
}

#[test]
fn boundary_attack_is_decision_only_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let y = m.predict(&x).unwrap();
    m.reset_counters();
    let (out, trace) = boundary_attack(&m, &x, y, 11, 300).unwrap();
    assert_eq!(m.gradient_passes(), 0);
    assert!(out.success);
    assert_ne!(m.predict(&out.adversarial).unwrap(), y);
    assert!(in_box(&out.adversarial));
    assert!(trace.best_l2.windows(2).all(|w| w[1] <= w[0]));
    assert!((trace.best_l2.last().unwrap() - x.l2_distance(&out.adversarial).unwrap()).abs() < 1e-12);
    let (again, _) = boundary_attack(&m, &x, y, 11, 300).unwrap();
    assert_eq!(again, out);
}

#[test]
fn boundary_attack_approaches_analytic_plane() {
    // Class 1 iff x0 > 0.5; the closest adversarial point moves only x0.
    let d = 4;
    let mut row = vec![0.0; d];
    row[0] = 10.0;
    let m = linear(&[vec![0.0; d], row], &[0.0, -5.0]);
    let x = t(vec![1, d, 1], vec![0.8, 0.3, 0.6, 0.2]);
    assert_eq!(m.predict(&x).unwrap(), 1);
    let (out, _) = boundary_attack(&m, &x, 1, 3, 2000).unwrap();
    let a = out.adversarial.data();
    assert!(a[0] <= 0.5 && a[0] > 0.45, "x0 = {}", a[0]);
    let off: f64 = (1..d).map(|i| (a[i] - x.data()[i]).abs()).fold(0.0, f64::max);
    assert!(off < 0.05, "{off}");
}

#[test]
fn confidence_level_values() {
    assert!((confidence_from_prob(0.5) - 2f64.ln()).abs() < 1e-15);
    assert!((confidence_from_prob(0.9) - 10f64.ln()).abs() < 1e-12);
    assert!((confidence_from_prob(1.0) - 1e12f64.ln()).abs() < 1e-3);
    assert!((confidence_from_prob(1.0) - 27.631).abs() < 1e-3);
    let m = linear(&[vec![0.0], vec![0.0]], &[0.0, 0.0]);
    let v = confidence_level(&m, &t(vec![1, 1, 1], vec![0.3])).unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-15);
}

fn toy_dataset(rng: &mut ChaCha8Rng, m: &Model, n: usize) -> Dataset {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let x = rand_t(rng, vec![6, 6, 1], 0.0, 1.0);
        let p = m.predict(&x).unwrap();
        // Every fifth label is wrong so some images get skipped.
        labels.push(if i % 5 == 4 { (p + 1) % 3 } else { p });
        pixels.extend_from_slice(x.data());
    }
    Dataset::new([6, 6, 1], 3, pixels, labels).unwrap()
}

#[test]
fn attack_sets_are_deterministic_and_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = small_cnn(&mut rng, 3);
    let data = toy_dataset(&mut rng, &m, 30);
    let params = AttackParams {
        epsilon: 0.2,
        seed: 17,
        mixing: Some(Mixing::Epsilon {
            values: vec![0.1, 0.2, 0.3],
        }),
        ..AttackParams::defaults(AttackKind::LinfPgd)
    };
    let a = generate_attack_set(&m, &data, 0..30, &params, 5).unwrap();
    let b = generate_attack_set(&m, &data, 0..30, &params, 5).unwrap();
    assert_eq!(a, b);
    for e in &a.examples {
        assert_ne!(e.id % 5, 4);
        assert!(in_box(&e.adversarial));
        assert!([0.1, 0.2, 0.3].contains(&e.attack.epsilon));
        assert!(e.linf_dist <= e.attack.epsilon + 1e-12);
        assert!((e.l2_dist - e.original.l2_distance(&e.adversarial).unwrap()).abs() <= 1e-9);
        assert!((e.linf_dist - e.original.linf_distance(&e.adversarial).unwrap()).abs() <= 1e-9);
        assert_eq!(e.success, e.adversarial_label != e.original_label);
        assert_eq!(e.original, data.image(e.id));
    }
    assert!(a.summary.successes <= 5);
    assert_eq!(a.summary.shortfall, a.summary.successes < 5);
    let ids: Vec<usize> = a.examples.iter().map(|e| e.id).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));

    let path = std::path::Path::new("mem");
    let bytes = a.to_bytes();
    assert_eq!(AttackSet::from_bytes(&bytes, path).unwrap(), a);
    assert!(AttackSet::from_bytes(&bytes[..bytes.len() - 3], path).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(AttackSet::from_bytes(&extra, path).is_err());

    let csv = a.summary_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,attack,success,l2,linf,confidence_level"));
    for (line, e) in lines.zip(&a.examples) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0].parse::<usize>().unwrap(), e.id);
        assert_eq!(cells[1], e.attack.kind.name());
        assert_eq!(cells[2] == "1", e.success);
        assert_eq!(cells[3].parse::<f64>().unwrap(), e.l2_dist);
        assert_eq!(cells[5].parse::<f64>().unwrap(), e.confidence_level);
    }
    assert_eq!(csv.lines().count(), a.examples.len() + 1);
}

#[test]
fn attack_set_shortfall_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = small_cnn(&mut rng, 3);
    let data = toy_dataset(&mut rng, &m, 10);
    let params = AttackParams {
        epsilon: 0.0,
        ..AttackParams::defaults(AttackKind::Fgsm)
    };
    let set = generate_attack_set(&m, &data, 0..10, &params, 3).unwrap();
    assert!(set.summary.shortfall);
    assert_eq!(set.summary.successes, 0);
    assert_eq!(set.summary.skipped_misclassified, 2);
    assert_eq!(set.summary.attempted, 8);
}

#[test]
fn mixing_grids_and_validation() {
    let Mixing::Confidence { values } = Mixing::confidence_grid() else { panic!() };
    assert_eq!(values.len(), 15);
    assert_eq!((values[0], values[14]), (1.0, 29.0));
    let Mixing::Epsilon { values } = Mixing::epsilon_grid() else { panic!() };
    assert_eq!(values, (1..=8).map(|k| k as f64 / 255.0).collect::<Vec<_>>());
    let mut p = AttackParams::defaults(AttackKind::Jsma);
    p.gamma = 0.0;
    assert!(p.validate().is_err());
    p = AttackParams::defaults(AttackKind::Fgsm);
    p.epsilon = -1.0;
    assert!(p.validate().is_err());
    let mut counts = [0usize; 15];
    let p = AttackParams {
        mixing: Some(Mixing::confidence_grid()),
        ..AttackParams::defaults(AttackKind::CwL2)
    };
    for id in 0..3000 {
        let r = set::resolve_params(&p, id);
        counts[((r.confidence - 1.0) / 2.0) as usize] += 1;
    }
    assert!(counts.iter().all(|&c| c > 150), "{counts:?}");
}
