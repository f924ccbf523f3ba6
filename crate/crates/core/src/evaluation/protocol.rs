//! Which attack sets, detectors and evaluation legs each protocol needs, and
//! the report they produce.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackParams, AttackSetSummary};
use crate::config::{AttributionConfig, DetectorConfig, ExperimentConfig, Protocol};
use crate::detector::{classify, Decision, LogisticDetector, ThresholdDetector};
use crate::dispersion::FeatureTable;
use crate::error::{Error, Result};

use super::metrics::{median, DetectionMetrics, Histogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Detector-training pool.
    Train,
    /// Disjoint evaluation pool.
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetSpec {
    pub name: String,
    pub split: Split,
    pub params: AttackParams,
    pub n: usize,
}

impl SetSpec {
    /// File stem, e.g. `fgsm_train`.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.name, self.split.name())
    }
}

/// One detector (named after its training set) scored on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LegSpec {
    pub protocol: Protocol,
    pub detector: String,
    pub test_set: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Plan {
    pub sets: Vec<SetSpec>,
    /// Training-set names; one detector pair is fit per entry.
    pub detectors: Vec<String>,
    pub legs: Vec<LegSpec>,
}

impl Plan {
    fn add_set(&mut self, name: &str, split: Split, params: &AttackParams, n: usize) {
        if !self.sets.iter().any(|s| s.name == name && s.split == split) {
            self.sets.push(SetSpec {
                name: name.to_string(),
                split,
                params: params.clone(),
                n,
            });
        }
    }

    fn add_detector(&mut self, name: &str) {
        if !self.detectors.iter().any(|d| d == name) {
            self.detectors.push(name.to_string());
        }
    }

    pub fn set(&self, name: &str, split: Split) -> Option<&SetSpec> {
        self.sets.iter().find(|s| s.name == name && s.split == split)
    }
}

/// Known attacks: one detector per attack, tested on the same attack.
/// Mixed: one detector on the mixed set, tested on the low, high and mixed
/// sets. Transfer: the source attack's detector tested on every target.
pub fn plan(config: &ExperimentConfig) -> Plan {
    let mut plan = Plan::default();
    let (n_train, n_test) = (config.protocol.n_train, config.protocol.n_test);
    let mut run = config.protocol.run.clone();
    run.sort_unstable();
    run.dedup();
    for protocol in run {
        match protocol {
            Protocol::Known => {
                for a in config.attacks.iter().filter(|a| a.known) {
                    plan.add_set(&a.name, Split::Train, &a.params, n_train);
                    plan.add_set(&a.name, Split::Eval, &a.params, n_test);
                    plan.add_detector(&a.name);
                    plan.legs.push(LegSpec {
                        protocol,
                        detector: a.name.clone(),
                        test_set: a.name.clone(),
                    });
                }
            }
            Protocol::Mixed => {
                let Some(m) = &config.mixed else { continue };
                let sets = m.set_names();
                let n_mixed = m.n_test.unwrap_or(n_test);
                let (mix_name, mix_params) = &sets[0];
                plan.add_set(mix_name, Split::Train, mix_params, n_train);
                plan.add_detector(mix_name);
                for (name, params) in &sets {
                    plan.add_set(name, Split::Eval, params, n_mixed);
                    plan.legs.push(LegSpec {
                        protocol,
                        detector: mix_name.clone(),
                        test_set: name.clone(),
                    });
                }
            }
            Protocol::Transfer => {
                let Some(t) = &config.transfer else { continue };
                let find = |n: &str| config.attacks.iter().find(|a| a.name == n).expect("validated");
                let src = find(&t.source);
                plan.add_set(&src.name, Split::Train, &src.params, n_train);
                plan.add_detector(&src.name);
                for target in &t.targets {
                    let a = find(target);
                    plan.add_set(&a.name, Split::Eval, &a.params, n_test);
                    plan.legs.push(LegSpec {
                        protocol,
                        detector: src.name.clone(),
                        test_set: a.name.clone(),
                    });
                }
            }
        }
    }
    plan
}

/// The single-statistic detector at its fitted threshold on a test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegReport {
    pub protocol: Protocol,
    pub detector: String,
    pub test_set: String,
    pub n_nat: usize,
    pub n_adv: usize,
    /// Logistic regression over all selected neurons.
    pub ml_loo: DetectionMetrics,
    /// Output-layer dispersion alone, swept as a score.
    pub single_layer: DetectionMetrics,
    pub single_layer_operating_point: OperatingPoint,
}

/// Scores the natural and adversarial rows of `test`.
pub fn evaluate_leg(
    leg: &LegSpec,
    logistic: &LogisticDetector,
    threshold: &ThresholdDetector,
    test: &FeatureTable,
) -> Result<LegReport> {
    if test.selection_hash != logistic.selection_hash {
        return Err(Error::HashMismatch {
            what: format!("layer selection of {}", leg.test_set),
            expected: logistic.selection_hash.clone(),
            found: test.selection_hash.clone(),
        });
    }
    if test.stat_kind != logistic.stat_kind || test.stat_kind != threshold.stat_kind {
        return Err(Error::InvalidArgument(format!(
            "{} uses {}, detector {} was fit on {}",
            leg.test_set,
            test.stat_kind.name(),
            leg.detector,
            logistic.stat_kind.name()
        )));
    }
    let nat = test.matrix(false);
    let adv = test.matrix(true);
    if nat.is_empty() || adv.is_empty() {
        return Err(Error::Empty(format!("test set {} has no pairs", leg.test_set)));
    }
    let score = |rows: &[Vec<f64>]| rows.iter().map(|r| logistic.score_values(r)).collect::<Result<Vec<_>>>();
    let (ns, as_) = (score(&nat)?, score(&adv)?);
    let first = |rows: &[Vec<f64>]| rows.iter().map(|r| r[0]).collect::<Vec<_>>();
    let (n1, a1) = (first(&nat), first(&adv));
    let rate = |v: &[f64]| {
        v.iter().filter(|&&s| classify(s, threshold.threshold) == Decision::Adversarial).count() as f64 / v.len() as f64
    };
    Ok(LegReport {
        protocol: leg.protocol,
        detector: leg.detector.clone(),
        test_set: leg.test_set.clone(),
        n_nat: nat.len(),
        n_adv: adv.len(),
        ml_loo: DetectionMetrics::compute(&ns, &as_)?,
        single_layer: DetectionMetrics::compute(&n1, &a1)?,
        single_layer_operating_point: OperatingPoint {
            threshold: threshold.threshold,
            tpr: rate(&a1),
            fpr: rate(&n1),
        },
    })
}

/// Upper end of the confidence-level histograms: `-ln(1e-12)`, the value at
/// the probability clamp.
pub const CONFIDENCE_CEILING: f64 = 27.631021115928547;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub bins: usize,
    pub range: [f64; 2],
    /// Median confidence level and its bin, per population.
    pub medians: BTreeMap<String, f64>,
    pub median_bins: BTreeMap<String, usize>,
}

/// Histograms of confidence levels per population on a common grid.
pub fn confidence_histograms(
    populations: &[(String, Vec<f64>)],
    bins: usize,
) -> Result<(Vec<Histogram>, ConfidenceSummary)> {
    let mut hists = Vec::new();
    let mut medians = BTreeMap::new();
    let mut median_bins = BTreeMap::new();
    for (name, values) in populations {
        let h = Histogram::new(name, values, 0.0, CONFIDENCE_CEILING, bins)?;
        if !values.is_empty() {
            let m = median(values)?;
            median_bins.insert(name.clone(), h.bin(m));
            medians.insert(name.clone(), m);
        }
        hists.push(h);
    }
    Ok((
        hists,
        ConfidenceSummary {
            bins,
            range: [0.0, CONFIDENCE_CEILING],
            medians,
            median_bins,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub name: String,
    pub split: Split,
    pub params: AttackParams,
    pub summary: AttackSetSummary,
    /// Mean distortion over successful examples.
    pub mean_l2: f64,
    pub mean_linf: f64,
}

/// Everything needed to regenerate and compare a run. Wall-clock times are
/// written to a separate file so reports compare bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub config_hash: String,
    pub dataset: String,
    pub dataset_hash: String,
    pub model_hash: String,
    pub model_test_accuracy: f64,
    pub selection_hash: String,
    pub num_features: usize,
    pub seed: u64,
    pub attribution: AttributionConfig,
    pub detector: DetectorConfig,
    pub sets: Vec<SetReport>,
    pub legs: Vec<LegReport>,
    pub confidence: Option<ConfidenceSummary>,
}

impl ExperimentReport {
    pub const FORMAT: &'static str = "mlloo-report-v1";

    pub fn leg(&self, protocol: Protocol, test_set: &str) -> Option<&LegReport> {
        self.legs.iter().find(|l| l.protocol == protocol && l.test_set == test_set)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
