//! Detectors over dispersion features: a threshold on one statistic and a
//! logistic regression over all selected neurons.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dispersion::{DispersionFeatures, StatKind};
use crate::error::{Error, Result};
use crate::numerics::check_finite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Natural,
    Adversarial,
}

/// Adversarial iff `score > threshold`; ties are natural.
pub fn classify(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::Adversarial
    } else {
        Decision::Natural
    }
}

/// Flags a scalar score as adversarial when it exceeds `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDetector {
    pub stat_kind: StatKind,
    pub threshold: f64,
    /// Always true: larger dispersion means adversarial.
    pub above_is_adversarial: bool,
}

impl ThresholdDetector {
    pub fn classify(&self, score: f64) -> Decision {
        classify(score, self.threshold)
    }
}

/// Largest `k` in `0..=n` with `k / n <= target`.
pub(crate) fn allowed_count(target: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut k = ((target * nf).floor().max(0.0) as usize).min(n);
    while k < n && ((k + 1) as f64) / nf <= target {
        k += 1;
    }
    while k > 0 && (k as f64) / nf > target {
        k -= 1;
    }
    k
}

/// Smallest threshold that flags at most `fpr_target` of the natural scores.
pub fn fit_threshold(nat: &[f64], adv: &[f64], fpr_target: f64, stat_kind: StatKind) -> Result<ThresholdDetector> {
    if nat.is_empty() || adv.is_empty() {
        return Err(Error::Empty("threshold fit needs natural and adversarial scores".into()));
    }
    check_finite(nat, "natural scores")?;
    check_finite(adv, "adversarial scores")?;
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::InvalidArgument(format!("fpr target {fpr_target} outside [0, 1]")));
    }
    let mut s = nat.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let allowed = allowed_count(fpr_target, n);
    let threshold = if allowed == n {
        let lo = s[0].min(adv.iter().copied().fold(f64::INFINITY, f64::min));
        lo.next_down()
    } else {
        s[n - allowed - 1]
    };
    Ok(ThresholdDetector {
        stat_kind,
        threshold,
        above_is_adversarial: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            iterations: 5000,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Per-feature affine map to zero mean and unit population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let m = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; m];
        for r in rows {
            for (acc, v) in mean.iter_mut().zip(r.iter()) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= n;
        }
        let mut var = vec![0.0; m];
        for r in rows {
            for ((acc, v), mu) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .iter()
            .map(|&ss| {
                let s = (ss / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, mu), s)| (v - mu) / s)
            .collect()
    }
}

/// Logistic regression on standardized dispersion features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticDetector {
    pub stat_kind: StatKind,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardization: Standardization,
    pub selection_hash: String,
    pub config: LogisticConfig,
    /// Regularized training loss at the returned parameters.
    pub training_loss: f64,
    /// Iterations actually run and how many times the step was halved.
    pub iterations_run: usize,
    pub step_halvings: usize,
    pub max_consecutive_halvings: usize,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Mean logistic loss plus `lambda * |w|^2` over standardized rows, and its
/// gradient in `(w, b)`.
pub(crate) fn loss_and_grad(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, lambda: f64) -> (f64, Vec<f64>, f64) {
    let n = z.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (row, &yi) in z.iter().zip(y) {
        let t: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        // -[y log s(t) + (1 - y) log(1 - s(t))] = softplus(t) - y t
        loss += softplus(t) - yi * t;
        let r = sigmoid(t) - yi;
        for (g, v) in gw.iter_mut().zip(row) {
            *g += r * v;
        }
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + 2.0 * lambda * wi;
    }
    loss += lambda * w.iter().map(|v| v * v).sum::<f64>();
    (loss, gw, gb)
}

// Below this the loss change per step is under f64 resolution.
const GRAD_TOL: f64 = 1e-7;

/// Full-batch gradient descent from zero on the regularized mean logistic
/// loss, adversarial rows labelled 1. A step that raises the loss is undone
/// and the learning rate halved.
pub fn fit_logistic(
    nat: &[Vec<f64>],
    adv: &[Vec<f64>],
    config: &LogisticConfig,
    stat_kind: StatKind,
    selection_hash: &str,
) -> Result<LogisticDetector> {
    if nat.is_empty() || adv.is_empty() {
        return Err(Error::Empty("logistic fit needs at least one row per class".into()));
    }
    let m = nat[0].len();
    if m == 0 {
        return Err(Error::Empty("zero-dimensional features".into()));
    }
    for r in nat.iter().chain(adv) {
        if r.len() != m {
            return Err(Error::Shape(format!("feature row of length {} vs {m}", r.len())));
        }
        check_finite(r, "detector features")?;
    }
    if !(config.lambda >= 0.0) || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("lambda must be >= 0 and learning rate > 0".into()));
    }
    let raw: Vec<&[f64]> = nat.iter().chain(adv).map(|r| r.as_slice()).collect();
    let standardization = Standardization::fit(&raw);
    let z: Vec<Vec<f64>> = raw.iter().map(|r| standardization.apply(r)).collect();
    let y: Vec<f64> = std::iter::repeat(0.0)
        .take(nat.len())
        .chain(std::iter::repeat(1.0).take(adv.len()))
        .collect();

    let mut w = vec![0.0; m];
    let mut b = 0.0;
    let mut lr = config.learning_rate;
    let (mut loss, mut gw, mut gb) = loss_and_grad(&z, &y, &w, b, config.lambda);
    let mut halvings = 0;
    let (mut streak, mut max_streak) = (0, 0);
    let mut run = 0;
    while run < config.iterations {
        let gn = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if gn <= GRAD_TOL {
            break;
        }
        run += 1;
        let nw: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - lr * g).collect();
        let nb = b - lr * gb;
        let (nl, ngw, ngb) = loss_and_grad(&z, &y, &nw, nb, config.lambda);
        if !nl.is_finite() {
            return Err(Error::NonFinite(format!("logistic loss at iteration {run}")));
        }
        if nl > loss {
            lr *= 0.5;
            halvings += 1;
            streak += 1;
            max_streak = max_streak.max(streak);
            continue;
        }
        streak = 0;
        w = nw;
        b = nb;
        loss = nl;
        gw = ngw;
        gb = ngb;
    }
    Ok(LogisticDetector {
        stat_kind,
        weights: w,
        bias: b,
        standardization,
        selection_hash: selection_hash.to_string(),
        config: *config,
        training_loss: loss,
        iterations_run: run,
        step_halvings: halvings,
        max_consecutive_halvings: max_streak,
    })
}

impl LogisticDetector {
    /// `sigmoid(w . standardize(f) + b)` for a raw feature vector.
    pub fn score_values(&self, f: &[f64]) -> Result<f64> {
        if f.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "{} features, detector expects {}",
                f.len(),
                self.weights.len()
            )));
        }
        check_finite(f, "detector features")?;
        let z = self.standardization.apply(f);
        let t: f64 = z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias;
        Ok(sigmoid(t))
    }

    pub fn score(&self, f: &DispersionFeatures) -> Result<f64> {
        if f.selection_hash != self.selection_hash {
            return Err(Error::HashMismatch {
                what: "layer selection".into(),
                expected: self.selection_hash.clone(),
                found: f.selection_hash.clone(),
            });
        }
        if f.stat_kind != self.stat_kind {
            return Err(Error::InvalidArgument(format!(
                "features use {}, detector was fit on {}",
                f.stat_kind.name(),
                self.stat_kind.name()
            )));
        }
        self.score_values(&f.values)
    }

    pub fn classify(&self, f: &DispersionFeatures, threshold: f64) -> Result<Decision> {
        Ok(classify(self.score(f)?, threshold))
    }
}

/// Either detector, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    Threshold(ThresholdDetector),
    Logistic(LogisticDetector),
}

impl Detector {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("detector serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            kind: "detector",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}
