use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::{Layer, ModelMetadata};
use crate::testutil::{linear, rand_t, small_cnn, t};

fn masked_probs(m: &Model, x: &[f64], shape: &[usize]) -> Vec<f64> {
    m.forward(&t(shape.to_vec(), x.to_vec())).unwrap().probs.into_data()
}

/// Two-class softmax of logits `(a, b)` evaluated by hand.
fn p0(a: f64, b: f64) -> f64 {
    a.exp() / (a.exp() + b.exp())
}

#[test]
fn loo_identity_two_class_example() {
    let m = linear(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]);
    let x = t(vec![1, 2, 1], vec![2.0, 1.0]);
    let phi = loo_attribution(&m, &x, &MaskSpec::default()).unwrap();
    let clean = p0(2.0, 1.0);
    let expect = [clean - p0(0.0, 1.0), clean - p0(2.0, 0.0)];
    for (a, b) in phi.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((phi.data()[0] - 0.4621).abs() < 1e-4);
    assert!((phi.data()[1] + 0.1497).abs() < 1e-4);
}

#[test]
fn loo_of_constant_model_is_zero() {
    let m = linear(&[vec![0.0; 5], vec![0.0; 5], vec![0.0; 5]], &[0.3, -0.2, 0.1]);
    let x = t(vec![1, 5, 1], vec![0.2, 0.9, 0.4, 1.0, 0.7]);
    let phi = loo_attribution(&m, &x, &MaskSpec::default()).unwrap();
    assert!(phi.data().iter().all(|&v| v == 0.0));
}

#[test]
fn loo_matches_brute_force_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let m = small_cnn(&mut rng, 4);
        let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
        let mask = MaskSpec {
            reference_value: rng.gen_range(0.0..1.0),
            granularity: Granularity::PerScalar,
        };
        let phi = loo_attribution(&m, &x, &mask).unwrap();
        let clean = masked_probs(&m, x.data(), x.shape());
        let c = (0..4).max_by(|&a, &b| clean[a].total_cmp(&clean[b])).unwrap();
        for i in 0..36 {
            let mut xi = x.data().to_vec();
            xi[i] = mask.reference_value;
            let want = clean[c] - masked_probs(&m, &xi, x.shape())[c];
            assert!((phi.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0), "position {i}");
        }
    }
}

#[test]
fn per_pixel_masks_every_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = [2, 3, 2];
    let d = 12;
    let m = Model::new(
        shape,
        vec![
            Layer::Flatten,
            Layer::Dense {
                weights: rand_t(&mut rng, vec![d, 3], -1.0, 1.0),
                bias: rand_t(&mut rng, vec![3], -0.1, 0.1),
            },
            Layer::Softmax,
        ],
        ModelMetadata::default(),
    )
    .unwrap();
    let x = rand_t(&mut rng, shape.to_vec(), 0.0, 1.0);
    let mask = MaskSpec::default();
    assert_eq!(mask.num_positions(shape), 6);
    let phi = loo_attribution(&m, &x, &mask).unwrap();
    assert_eq!(phi.len(), 6);
    let clean = masked_probs(&m, x.data(), &shape);
    let c = m.predict(&x).unwrap();
    for p in 0..6 {
        let mut xi = x.data().to_vec();
        xi[2 * p] = 0.0;
        xi[2 * p + 1] = 0.0;
        let want = clean[c] - masked_probs(&m, &xi, &shape)[c];
        assert!((phi.data()[p] - want).abs() < 1e-12);
    }
    let scalar = MaskSpec {
        granularity: Granularity::PerScalar,
        ..mask
    };
    assert_eq!(loo_attribution(&m, &x, &scalar).unwrap().len(), 12);
}

#[test]
fn ml_loo_output_only_equals_loo_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let mask = MaskSpec::default();
    let loo = loo_attribution(&m, &x, &mask).unwrap();
    let rec = ml_loo_attribution(&m, &x, &LayerSelection::output_only(), &mask, 7).unwrap();
    assert_eq!(rec.per_neuron.shape(), &[1, 36]);
    assert_eq!(rec.row(0), loo.data());
    assert_eq!(rec.input_id, 7);
    assert_eq!(rec.method, AttributionMethod::Loo);

    let sel = select_layers(&m, &[x.clone()], 64, 0).unwrap();
    let full = ml_loo_attribution(&m, &x, &sel, &mask, 7).unwrap();
    assert_eq!(full.row(0), loo.data());
}

#[test]
fn ml_loo_rows_match_brute_force_neurons() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let sel = LayerSelection {
        entries: vec![
            SelectionEntry {
                layer: 0,
                neurons: vec![0, 5, 107],
            },
            SelectionEntry {
                layer: 2,
                neurons: vec![3, 26],
            },
            SelectionEntry {
                layer: 5,
                neurons: (0..8).collect(),
            },
            SelectionEntry {
                layer: 6,
                neurons: vec![1],
            },
        ],
    };
    let rec = ml_loo_attribution(&m, &x, &sel, &MaskSpec::default(), 0).unwrap();
    assert_eq!(rec.num_neurons(), 15);
    let clean = m.forward(&x).unwrap();
    let mut row = 1;
    for e in &sel.entries {
        for &n in &e.neurons {
            for i in 0..36 {
                let mut xi = x.data().to_vec();
                xi[i] = 0.0;
                let masked = m.forward(&t(vec![6, 6, 1], xi)).unwrap();
                let want = clean.per_layer[e.layer].data()[n] - masked.per_layer[e.layer].data()[n];
                let got = rec.row(row)[i];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "layer {} neuron {n} pos {i}", e.layer);
            }
            row += 1;
        }
    }
}

#[test]
fn ml_loo_linear_neuron_is_weight_times_input() {
    let rows = vec![vec![0.5, -1.5, 2.0, 0.25], vec![-0.3, 0.8, 0.1, 1.2]];
    let m = linear(&rows, &[0.4, -0.7]);
    let x = t(vec![1, 4, 1], vec![0.9, 0.3, 0.6, 0.1]);
    let sel = LayerSelection {
        entries: vec![SelectionEntry {
            layer: 0,
            neurons: vec![0, 1],
        }],
    };
    let rec = ml_loo_attribution(&m, &x, &sel, &MaskSpec::default(), 0).unwrap();
    for (n, w) in rows.iter().enumerate() {
        for i in 0..4 {
            assert!((rec.row(n + 1)[i] - w[i] * x.data()[i]).abs() < 1e-14);
        }
    }
}

#[test]
fn forward_budget_is_d_plus_one_for_any_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let calib: Vec<Tensor> = (0..4).map(|_| rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0)).collect();
    for cap in [0, 1, 4, 1000] {
        let sel = select_layers(&m, &calib, cap, 0).unwrap();
        m.reset_counters();
        ml_loo_attribution(&m, &x, &sel, &MaskSpec::default(), 0).unwrap();
        assert_eq!(m.forward_passes(), 37, "cap {cap}");
        assert_eq!(m.gradient_passes(), 0);
    }
    m.reset_counters();
    loo_attribution(&m, &x, &MaskSpec::default()).unwrap();
    assert_eq!(m.forward_passes(), 37);
}

#[test]
fn invalid_selection_and_shape_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let mask = MaskSpec::default();
    let bad_layer = LayerSelection {
        entries: vec![SelectionEntry {
            layer: 7,
            neurons: vec![0],
        }],
    };
    assert!(ml_loo_attribution(&m, &x, &bad_layer, &mask, 0).is_err());
    let bad_neuron = LayerSelection {
        entries: vec![SelectionEntry {
            layer: 5,
            neurons: vec![8],
        }],
    };
    assert!(ml_loo_attribution(&m, &x, &bad_neuron, &mask, 0).is_err());
    assert!(loo_attribution(&m, &t(vec![36], vec![0.0; 36]), &mask).is_err());
    let bad_mask = MaskSpec {
        reference_value: 1.5,
        ..mask
    };
    assert!(loo_attribution(&m, &x, &bad_mask).is_err());
}

#[test]
fn record_round_trips_through_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let sel = select_layers(&m, &[x.clone()], 3, 0).unwrap();
    let rec = ml_loo_attribution(&m, &x, &sel, &MaskSpec::default(), 42).unwrap();
    let p = Path::new("mem");
    let bytes = rec.to_bytes();
    assert_eq!(AttributionRecord::from_bytes(&bytes, p).unwrap(), rec);
    assert!(AttributionRecord::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(AttributionRecord::from_bytes(&bad, p).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.attr");
    rec.save(&path).unwrap();
    assert_eq!(AttributionRecord::load(&path).unwrap(), rec);
}

/// IG computed one gradient at a time, no batching.
fn ig_oracle(m: &Model, x: &Tensor, base: &Tensor, steps: usize, loss: LossSpec) -> Vec<f64> {
    let d = x.len();
    let mut acc = vec![0.0; d];
    for k in 1..=steps {
        let a = k as f64 / steps as f64;
        let p: Vec<f64> = (0..d).map(|i| base.data()[i] + a * (x.data()[i] - base.data()[i])).collect();
        let g = m.input_gradient(&t(x.shape().to_vec(), p), &loss).unwrap();
        for (s, v) in acc.iter_mut().zip(g.data()) {
            *s += v;
        }
    }
    (0..d).map(|i| (x.data()[i] - base.data()[i]) * acc[i] / steps as f64).collect()
}

#[test]
fn ig_matches_unbatched_riemann_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let base = rand_t(&mut rng, vec![6, 6, 1], 0.0, 0.2);
    let c = m.predict(&x).unwrap();
    for steps in [1, 7, 40] {
        let ig = integrated_gradients(&m, &x, &base, steps).unwrap();
        let want = ig_oracle(&m, &x, &base, steps, LossSpec::Probability { class: c });
        for (a, b) in ig.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3));
        }
    }
}

#[test]
fn ig_exact_for_linear_score() {
    let rows = vec![vec![0.5, -1.5, 2.0, 0.25], vec![-0.3, 0.8, 0.1, 1.2]];
    let m = linear(&rows, &[0.4, -0.7]);
    let x = t(vec![1, 4, 1], vec![0.9, 0.3, 0.6, 0.1]);
    let base = t(vec![1, 4, 1], vec![0.0; 4]);
    for steps in [1, 3, 50] {
        let ig = integrated_gradients_of(&m, &x, &base, steps, LossSpec::Logit { class: 1 }).unwrap();
        for i in 0..4 {
            assert!((ig.data()[i] - rows[1][i] * x.data()[i]).abs() < 1e-14);
        }
    }
}

#[test]
fn ig_zero_when_input_is_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let ig = integrated_gradients(&m, &x, &x, 5).unwrap();
    assert!(ig.data().iter().all(|&v| v == 0.0));
    assert!(integrated_gradients(&m, &x, &x, 0).is_err());
    assert!(integrated_gradients(&m, &x, &t(vec![36], vec![0.0; 36]), 4).is_err());
}

#[test]
fn ig_completeness_at_256_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut checked = 0;
    while checked < 5 {
        let m = small_cnn(&mut rng, 3);
        let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
        let base = t(vec![6, 6, 1], vec![0.0; 36]);
        let c = m.predict(&x).unwrap();
        let gap = m.forward(&x).unwrap().probs.data()[c] - m.forward(&base).unwrap().probs.data()[c];
        if gap.abs() < 0.05 {
            continue;
        }
        let ig = integrated_gradients(&m, &x, &base, 256).unwrap();
        let sum: f64 = ig.data().iter().sum();
        assert!((sum - gap).abs() <= 1e-2 * gap.abs(), "sum {sum} gap {gap}");
        checked += 1;
    }
}

#[test]
fn ig_record_is_output_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = small_cnn(&mut rng, 3);
    let x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0);
    let rec = ig_record(&m, &x, 16, &MaskSpec::default(), 3).unwrap();
    assert_eq!(rec.method, AttributionMethod::Ig);
    assert_eq!(rec.per_neuron.shape(), &[1, 36]);
    let base = t(vec![6, 6, 1], vec![0.0; 36]);
    assert_eq!(rec.row(0), integrated_gradients(&m, &x, &base, 16).unwrap().data());
}

#[test]
fn full_cap_selects_every_relu_neuron() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let m = small_cnn(&mut rng, 3);
    let calib: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0)).collect();
    let sel = select_layers(&m, &calib, 1000, 0).unwrap();
    let layers: Vec<usize> = sel.entries.iter().map(|e| e.layer).collect();
    assert_eq!(layers, vec![1, 5]);
    assert_eq!(sel.entries[0].neurons, (0..108).collect::<Vec<_>>());
    assert_eq!(sel.entries[1].neurons, (0..8).collect::<Vec<_>>());
    assert_eq!(sel.num_neurons(), 117);
    assert!(select_layers(&m, &[], 4, 0).is_err());
}

#[test]
fn variance_ranking_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let m = small_cnn(&mut rng, 3);
    let calib: Vec<Tensor> = (0..20).map(|_| rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0)).collect();
    let cap = 10;
    let sel = select_layers(&m, &calib, cap, 0).unwrap();
    let acts: Vec<_> = calib.iter().map(|x| m.forward(x).unwrap()).collect();
    for e in &sel.entries {
        let width = m.layer_output_len(e.layer);
        if width <= cap {
            assert_eq!(e.neurons.len(), width);
            continue;
        }
        // Two-pass sample variance per neuron; ranking is scale-free so the
        // divisor is irrelevant.
        let var: Vec<f64> = (0..width)
            .map(|n| {
                let vals: Vec<f64> = acts.iter().map(|a| a.per_layer[e.layer].data()[n]).collect();
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>()
            })
            .collect();
        let mut want = Vec::new();
        let mut taken = vec![false; width];
        for _ in 0..cap {
            let mut best = None;
            for n in 0..width {
                if taken[n] {
                    continue;
                }
                if best.map_or(true, |b: usize| var[n] > var[b] + 1e-12 * var[b].abs()) {
                    best = Some(n);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            want.push(b);
        }
        want.sort_unstable();
        assert_eq!(e.neurons, want, "layer {}", e.layer);
    }
}

#[test]
fn ties_go_to_lower_index() {
    // Every relu activation is constant over the calibration inputs.
    let model = Model::new(
        [1, 3, 1],
        vec![
            Layer::Flatten,
            Layer::Dense {
                weights: t(vec![3, 6], vec![0.0; 18]),
                bias: t(vec![6], vec![1.0; 6]),
            },
            Layer::Relu,
            Layer::Dense {
                weights: t(vec![6, 2], vec![0.0; 12]),
                bias: t(vec![2], vec![0.0; 2]),
            },
            Layer::Softmax,
        ],
        ModelMetadata::default(),
    )
    .unwrap();
    let calib = vec![t(vec![1, 3, 1], vec![0.1, 0.2, 0.3]), t(vec![1, 3, 1], vec![0.9, 0.0, 0.4])];
    let sel = select_layers(&model, &calib, 4, 0).unwrap();
    assert_eq!(sel.entries.len(), 1);
    assert_eq!(sel.entries[0].neurons, vec![0, 1, 2, 3]);
}

#[test]
fn selection_is_deterministic_under_subsampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let m = small_cnn(&mut rng, 3);
    let calib: Vec<Tensor> = (0..300).map(|_| rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0)).collect();
    let a = select_layers(&m, &calib, 5, 9).unwrap();
    let b = select_layers(&m, &calib, 5, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), LayerSelection::output_only().hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// A position already at the reference value contributes nothing, and
    /// the scores elsewhere do not depend on what the other masked positions
    /// held before masking.
    #[test]
    fn masking_locality(seed in any::<u64>(), reference in 0.0f64..1.0, zero_mask in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = small_cnn(&mut rng, 3);
        let mut x = rand_t(&mut rng, vec![6, 6, 1], 0.0, 1.0).into_data();
        for (i, v) in x.iter_mut().enumerate() {
            if zero_mask >> (i % 64) & 1 == 1 {
                *v = reference;
            }
        }
        let x = t(vec![6, 6, 1], x);
        let mask = MaskSpec { reference_value: reference, granularity: Granularity::PerScalar };
        let sel = select_layers(&m, &[x.clone()], 1000, 0).unwrap();
        let rec = ml_loo_attribution(&m, &x, &sel, &mask, 0).unwrap();
        for n in 0..rec.num_neurons() {
            for i in 0..36 {
                if x.data()[i] == reference {
                    prop_assert_eq!(rec.row(n)[i], 0.0);
                }
                prop_assert!(rec.row(n)[i].is_finite());
            }
        }
    }
}
