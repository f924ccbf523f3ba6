//! ROC curves, AUC, TPR at fixed FPR and histograms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::check_finite;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores strictly above this value are flagged at this point.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub n_nat: usize,
    pub n_adv: usize,
}

fn check_scores(nat: &[f64], adv: &[f64]) -> Result<()> {
    if nat.is_empty() || adv.is_empty() {
        return Err(Error::Empty("ROC needs natural and adversarial scores".into()));
    }
    check_finite(nat, "natural scores")?;
    check_finite(adv, "adversarial scores")
}

/// Sweeps the threshold down through every distinct score. Tied natural and
/// adversarial scores enter together, giving a diagonal segment.
pub fn roc_curve(nat: &[f64], adv: &[f64]) -> Result<RocCurve> {
    check_scores(nat, adv)?;
    let mut all: Vec<(f64, bool)> = nat
        .iter()
        .map(|&s| (s, false))
        .chain(adv.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nn, na) = (nat.len() as f64, adv.len() as f64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: all[0].0,
    }];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < all.len() { all[i].0 } else { s.next_down() };
        points.push(RocPoint {
            fpr: fp as f64 / nn,
            tpr: tp as f64 / na,
            threshold,
        });
    }
    Ok(RocCurve {
        points,
        n_nat: nat.len(),
        n_adv: adv.len(),
    })
}

/// Trapezoidal area under the curve.
pub fn auc(roc: &RocCurve) -> f64 {
    roc.points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum()
}

/// Largest `k` in `0..=n` with `k / n <= target`.
fn allowed(target: f64, n: usize) -> usize {
    crate::detector::allowed_count(target, n)
}

/// TPR at the most permissive threshold whose empirical FPR is at most
/// `target`.
pub fn tpr_at_fpr(nat: &[f64], adv: &[f64], target: f64) -> Result<f64> {
    check_scores(nat, adv)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("fpr target {target} outside [0, 1]")));
    }
    let mut s = nat.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let k = allowed(target, n);
    let tp = if k == n {
        adv.len()
    } else {
        let t = s[n - k - 1];
        adv.iter().filter(|&&a| a > t).count()
    };
    Ok(tp as f64 / adv.len() as f64)
}

pub fn roc_csv(roc: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &roc.points {
        let _ = writeln!(out, "{:?},{:?},{:?}", p.fpr, p.tpr, p.threshold);
    }
    out
}

/// Metrics at the reported operating points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auc: f64,
    pub tpr_at_fpr_0_01: f64,
    pub tpr_at_fpr_0_05: f64,
    pub tpr_at_fpr_0_10: f64,
}

impl DetectionMetrics {
    pub fn compute(nat: &[f64], adv: &[f64]) -> Result<Self> {
        Ok(Self {
            auc: auc(&roc_curve(nat, adv)?),
            tpr_at_fpr_0_01: tpr_at_fpr(nat, adv, 0.01)?,
            tpr_at_fpr_0_05: tpr_at_fpr(nat, adv, 0.05)?,
            tpr_at_fpr_0_10: tpr_at_fpr(nat, adv, 0.10)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub population: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal-width bins on `[lo, hi]`; values outside are clamped
    /// into the end bins.
    pub fn new(population: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::InvalidArgument(format!("histogram range [{lo}, {hi}] with {bins} bins")));
        }
        check_finite(values, "histogram values")?;
        let w = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + w * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            counts[Self::bin_of(v, lo, w, bins)] += 1;
        }
        Ok(Self {
            population: population.to_string(),
            edges,
            counts,
        })
    }

    fn bin_of(v: f64, lo: f64, w: f64, bins: usize) -> usize {
        (((v - lo) / w).floor().max(0.0) as usize).min(bins - 1)
    }

    pub fn bin(&self, v: f64) -> usize {
        let bins = self.counts.len();
        let lo = self.edges[0];
        Self::bin_of(v, lo, (self.edges[bins] - lo) / bins as f64, bins)
    }
}

/// `population,bin_left,bin_right,count`.
pub fn histograms_csv(hists: &[Histogram]) -> String {
    let mut out = String::from("population,bin_left,bin_right,count\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{:?},{:?},{c}", h.population, h.edges[i], h.edges[i + 1]);
        }
    }
    out
}

pub fn median(values: &[f64]) -> Result<f64> {
    crate::dispersion::quantile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// `P(adv > nat) + P(adv = nat) / 2` by counting all pairs.
    fn mann_whitney(nat: &[f64], adv: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in adv {
            for &n in nat {
                if a > n {
                    s += 1.0;
                } else if a == n {
                    s += 0.5;
                }
            }
        }
        s / (nat.len() * adv.len()) as f64
    }

    #[test]
    fn perfect_separation() {
        let roc = roc_curve(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert!(roc.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&roc), 1.0);
        for t in [0.0, 0.01, 0.05, 0.1] {
            assert_eq!(tpr_at_fpr(&[0.1, 0.2], &[0.8, 0.9], t).unwrap(), 1.0);
        }
    }

    #[test]
    fn all_tied_is_half() {
        let roc = roc_curve(&[0.3; 5], &[0.3; 7]).unwrap();
        assert_eq!(auc(&roc), 0.5);
        assert_eq!(roc.points.len(), 2);
        let p = roc.points[1];
        assert_eq!((p.fpr, p.tpr), (1.0, 1.0));
    }

    #[test]
    fn identical_distributions_lie_on_diagonal() {
        let s: Vec<f64> = (0..50).map(f64::from).collect();
        let roc = roc_curve(&s, &s).unwrap();
        assert!(roc.points.iter().all(|p| p.fpr == p.tpr));
        assert_eq!(auc(&roc), 0.5);
    }

    #[test]
    fn tpr_at_fpr_enumeration() {
        let nat: Vec<f64> = (1..=100).map(f64::from).collect();
        let adv: Vec<f64> = (0..200).map(|i| 90.0 + 0.07 * i as f64).collect();
        let tpr = tpr_at_fpr(&nat, &adv, 0.05).unwrap();
        // Threshold 95 admits naturals 96..=100 as false positives.
        let want = adv.iter().filter(|&&a| a > 95.0).count() as f64 / 200.0;
        assert_eq!(tpr, want);
        let max_nat = 100.0;
        let strict = adv.iter().filter(|&&a| a > max_nat).count() as f64 / 200.0;
        assert_eq!(tpr_at_fpr(&nat, &adv, 0.0).unwrap(), strict);
    }

    #[test]
    fn roc_point_thresholds_reproduce_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nat: Vec<f64> = (0..40).map(|_| (rng.gen_range(0..10) as f64) / 3.0).collect();
        let adv: Vec<f64> = (0..30).map(|_| (rng.gen_range(3..14) as f64) / 3.0).collect();
        let roc = roc_curve(&nat, &adv).unwrap();
        for p in &roc.points {
            let fp = nat.iter().filter(|&&s| s > p.threshold).count() as f64 / 40.0;
            let tp = adv.iter().filter(|&&s| s > p.threshold).count() as f64 / 30.0;
            assert_eq!((fp, tp), (p.fpr, p.tpr));
        }
        let csv = roc_csv(&roc);
        assert!(csv.starts_with("fpr,tpr,threshold\n0.0,0.0,"));
        assert_eq!(csv.lines().count(), roc.points.len() + 1);
    }

    #[test]
    fn histogram_counts_and_csv() {
        let h = Histogram::new("nat", &[0.0, 0.5, 0.99, 1.0, 3.5, -2.0, 9.0], 0.0, 4.0, 4).unwrap();
        assert_eq!(h.counts, vec![4, 1, 0, 2]);
        assert_eq!(h.edges, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(h.bin(2.5), 2);
        let csv = histograms_csv(&[h]);
        assert_eq!(csv.lines().nth(1).unwrap(), "nat,0.0,1.0,4");
        assert!(Histogram::new("x", &[1.0], 1.0, 1.0, 3).is_err());
    }

    #[test]
    fn rejects_empty() {
        assert!(roc_curve(&[], &[1.0]).is_err());
        assert!(tpr_at_fpr(&[1.0], &[], 0.1).is_err());
        assert!(roc_curve(&[f64::NAN], &[1.0]).is_err());
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![(0i32..5).prop_map(f64::from), -2.0f64..7.0], 1..80)
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_statistic(nat in scores(), adv in scores()) {
            let roc = roc_curve(&nat, &adv).unwrap();
            prop_assert!((auc(&roc) - mann_whitney(&nat, &adv)).abs() <= 1e-9);
        }

        #[test]
        fn roc_is_monotone_with_fixed_endpoints(nat in scores(), adv in scores()) {
            let roc = roc_curve(&nat, &adv).unwrap();
            let first = roc.points[0];
            let last = *roc.points.last().unwrap();
            prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn increasing_transform_preserves_roc(nat in scores(), adv in scores()) {
            let f = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (x * 0.5).exp() * 3.0 + 1.0).collect() };
            let a = roc_curve(&nat, &adv).unwrap();
            let b = roc_curve(&f(&nat), &f(&adv)).unwrap();
            let rates = |r: &RocCurve| -> Vec<(f64, f64)> { r.points.iter().map(|p| (p.fpr, p.tpr)).collect() };
            prop_assert_eq!(rates(&a), rates(&b));
            prop_assert_eq!(auc(&a), auc(&b));
        }

        #[test]
        fn tpr_non_decreasing_in_target(nat in scores(), adv in scores(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(tpr_at_fpr(&nat, &adv, lo).unwrap() <= tpr_at_fpr(&nat, &adv, hi).unwrap());
        }

        #[test]
        fn tpr_at_fpr_matches_roc_scan(nat in scores(), adv in scores(), t in 0.0f64..1.0) {
            let roc = roc_curve(&nat, &adv).unwrap();
            let best = roc.points.iter().filter(|p| p.fpr <= t).map(|p| p.tpr).fold(0.0, f64::max);
            prop_assert_eq!(tpr_at_fpr(&nat, &adv, t).unwrap(), best);
        }
    }
}
