//! Adversarial example generation.
//!
//! All attacks are untargeted against the label passed in (normally the
//! model's prediction on the clean image), except JSMA which drives the
//! input towards a target class. Pixels live in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::numerics::Tensor;

mod boundary;
mod cw;
mod deepfool;
mod gradient;
mod jsma;
mod set;

pub use boundary::{boundary_attack, BoundaryTrace};
pub use cw::cw_l2;
pub use deepfool::deepfool;
pub use gradient::{fgsm, linf_pgd};
pub use jsma::{jsma, pair_saliency};
pub use set::{generate_attack_set, AttackSet, AttackSetSummary, PairedExample};
pub(crate) use set::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    LinfPgd,
    CwL2,
    DeepFool,
    Jsma,
    Boundary,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Fgsm,
        AttackKind::LinfPgd,
        AttackKind::CwL2,
        AttackKind::DeepFool,
        AttackKind::Jsma,
        AttackKind::Boundary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::LinfPgd => "linf_pgd",
            AttackKind::CwL2 => "cw_l2",
            AttackKind::DeepFool => "deep_fool",
            AttackKind::Jsma => "jsma",
            AttackKind::Boundary => "boundary",
        }
    }
}

/// Per-image randomisation of one parameter, drawn uniformly from a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "over", rename_all = "snake_case")]
pub enum Mixing {
    /// Draws the C&W confidence `c` per image.
    Confidence { values: Vec<f64> },
    /// Draws the L-infinity budget per image; the PGD step stays `epsilon / 10`.
    Epsilon { values: Vec<f64> },
}

impl Mixing {
    /// `c` in {1, 3, ..., 29}.
    pub fn confidence_grid() -> Self {
        Mixing::Confidence {
            values: (0..15).map(|k| (2 * k + 1) as f64).collect(),
        }
    }

    /// `epsilon` in {1, ..., 8} / 255.
    pub fn epsilon_grid() -> Self {
        Mixing::Epsilon {
            values: (1..=8).map(|k| k as f64 / 255.0).collect(),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Mixing::Confidence { values } | Mixing::Epsilon { values } => values,
        }
    }
}

/// Hyperparameters for every attack kind; fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackParams {
    pub kind: AttackKind,
    /// L-infinity budget (FGSM, PGD).
    pub epsilon: f64,
    /// PGD step; `None` means `epsilon / 10`.
    pub step_size: Option<f64>,
    /// PGD iterations, C&W inner steps, DeepFool max steps, Boundary iterations.
    pub steps: usize,
    /// Required logit margin for C&W.
    pub confidence: f64,
    /// Initial C&W trade-off constant and its binary-search bounds.
    pub tradeoff: f64,
    pub tradeoff_min: f64,
    pub tradeoff_max: f64,
    pub binary_steps: usize,
    pub learning_rate: f64,
    /// DeepFool overshoot.
    pub overshoot: f64,
    /// JSMA per-feature change and maximum modified fraction.
    pub theta: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Target class for JSMA; `None` picks the second most likely class.
    pub target: Option<usize>,
    pub mixing: Option<Mixing>,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self::defaults(AttackKind::Fgsm)
    }
}

impl AttackParams {
    pub fn defaults(kind: AttackKind) -> Self {
        let steps = match kind {
            AttackKind::Fgsm => 1,
            AttackKind::LinfPgd => 40,
            AttackKind::CwL2 => 500,
            AttackKind::DeepFool => 50,
            AttackKind::Jsma => 0,
            AttackKind::Boundary => 2000,
        };
        Self {
            kind,
            epsilon: 8.0 / 255.0,
            step_size: None,
            steps,
            confidence: 0.0,
            tradeoff: 1e-2,
            tradeoff_min: 1e-5,
            tradeoff_max: 1e2,
            binary_steps: 6,
            learning_rate: 0.01,
            overshoot: 0.02,
            theta: 1.0,
            gamma: 0.1,
            seed: 0,
            target: None,
            mixing: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be finite and >= 0", self.epsilon));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("step size {a} must be positive"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(self.confidence >= 0.0 && self.confidence.is_finite()) {
            return bad(format!("confidence {} must be >= 0", self.confidence));
        }
        if !(self.tradeoff_min > 0.0 && self.tradeoff_min <= self.tradeoff && self.tradeoff <= self.tradeoff_max) {
            return bad(format!(
                "tradeoff {} outside [{}, {}]",
                self.tradeoff, self.tradeoff_min, self.tradeoff_max
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.overshoot >= 0.0 && self.overshoot.is_finite()) {
            return bad(format!("overshoot {} must be >= 0", self.overshoot));
        }
        if !self.theta.is_finite() || self.theta == 0.0 {
            return bad(format!("theta {} must be finite and non-zero", self.theta));
        }
        if let Some(m) = &self.mixing {
            if m.values().is_empty() {
                return bad("mixing grid is empty".into());
            }
            if m.values().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("mixing grid values must be finite and >= 0".into());
            }
        }
        Ok(())
    }

    pub fn pgd_step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }
}

/// Result of one attack on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    pub success: bool,
    /// Iterations actually run (attack specific).
    pub iterations: usize,
}

/// `-ln(1 - p)` for the predicted-class probability `p`, with `p` capped at
/// `1 - 1e-12`.
pub fn confidence_level(model: &Model, x: &Tensor) -> Result<f64> {
    let acts = model.forward(x)?;
    Ok(confidence_from_prob(acts.confidence()))
}

pub fn confidence_from_prob(p: f64) -> f64 {
    -(1.0 - p.min(1.0 - 1e-12)).ln()
}

/// Runs the attack selected by `params.kind` against `label`.
pub fn run_attack(model: &Model, x: &Tensor, label: usize, params: &AttackParams) -> Result<AttackOutcome> {
    params.validate()?;
    match params.kind {
        AttackKind::Fgsm => fgsm(model, x, label, params.epsilon),
        AttackKind::LinfPgd => linf_pgd(model, x, label, params.epsilon, params.pgd_step(), params.steps),
        AttackKind::CwL2 => cw_l2(model, x, label, params),
        AttackKind::DeepFool => deepfool(model, x, label, params.overshoot, params.steps),
        AttackKind::Jsma => jsma(model, x, label, params.target, params.theta, params.gamma),
        AttackKind::Boundary => Ok(boundary_attack(model, x, label, params.seed, params.steps)?.0),
    }
}

fn check_box(x: &Tensor) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("pixel {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_label(model: &Model, label: usize) -> Result<()> {
    if label >= model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside [0, {})",
            model.num_classes()
        )));
    }
    Ok(())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests;
