//! Attack sets over a dataset: paired clean/adversarial examples.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::numerics::Tensor;

use super::{confidence_from_prob, run_attack, AttackParams, Mixing};

/// A clean image, its attacked counterpart and how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    /// Index of the clean image in the source dataset.
    pub id: usize,
    pub original: Tensor,
    pub adversarial: Tensor,
    pub original_label: usize,
    pub adversarial_label: usize,
    /// Parameters actually used for this image (mixing draws resolved).
    pub attack: AttackParams,
    pub success: bool,
    /// Confidence level of the model on the adversarial image.
    pub confidence_level: f64,
    pub l2_dist: f64,
    pub linf_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSetSummary {
    pub requested: usize,
    pub attempted: usize,
    pub successes: usize,
    pub failures: usize,
    pub skipped_misclassified: usize,
    /// True when the range ran out before `requested` successes.
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSet {
    pub params: AttackParams,
    pub examples: Vec<PairedExample>,
    pub summary: AttackSetSummary,
}

impl AttackSet {
    pub fn successes(&self) -> impl Iterator<Item = &PairedExample> {
        self.examples.iter().filter(|e| e.success)
    }

    /// One row per attempted example: `id,attack,success,l2,linf,confidence_level`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("id,attack,success,l2,linf,confidence_level\n");
        for e in &self.examples {
            s.push_str(&format!(
                "{},{},{},{:?},{:?},{:?}\n",
                e.id,
                e.attack.kind.name(),
                u8::from(e.success),
                e.l2_dist,
                e.linf_dist,
                e.confidence_level
            ));
        }
        s
    }

    /// Magic, u32 LE header length, JSON header, then for every example the
    /// original and adversarial tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SetHeader {
            format: SET_FORMAT.into(),
            version: SET_VERSION,
            params: self.params.clone(),
            summary: self.summary.clone(),
            examples: self
                .examples
                .iter()
                .map(|e| ExampleHeader {
                    id: e.id,
                    original_label: e.original_label,
                    adversarial_label: e.adversarial_label,
                    attack: e.attack.clone(),
                    success: e.success,
                    confidence_level: e.confidence_level,
                    l2_dist: e.l2_dist,
                    linf_dist: e.linf_dist,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("attack set header serializes");
        let mut out = SET_MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.examples {
            out.extend_from_slice(&e.original.to_bytes());
            out.extend_from_slice(&e.adversarial.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            kind: "attack set",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 12 || &bytes[..8] != SET_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| fmt("truncated header".into()))?;
        let h: SetHeader = serde_json::from_slice(body).map_err(|e| fmt(e.to_string()))?;
        if h.format != SET_FORMAT || h.version != SET_VERSION {
            return Err(fmt(format!("unsupported format {} v{}", h.format, h.version)));
        }
        let mut rest = &bytes[12 + hlen..];
        let mut examples = Vec::with_capacity(h.examples.len());
        for e in h.examples {
            let original = Tensor::read_from(&mut rest).map_err(|err| fmt(err.to_string()))?;
            let adversarial = Tensor::read_from(&mut rest).map_err(|err| fmt(err.to_string()))?;
            if original.shape() != adversarial.shape() {
                return Err(fmt(format!("example {} has mismatched shapes", e.id)));
            }
            examples.push(PairedExample {
                id: e.id,
                original,
                adversarial,
                original_label: e.original_label,
                adversarial_label: e.adversarial_label,
                attack: e.attack,
                success: e.success,
                confidence_level: e.confidence_level,
                l2_dist: e.l2_dist,
                linf_dist: e.linf_dist,
            });
        }
        if !rest.is_empty() {
            return Err(fmt("trailing bytes".into()));
        }
        Ok(Self {
            params: h.params,
            examples,
            summary: h.summary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

const SET_MAGIC: &[u8; 8] = b"MLLOOATK";
const SET_FORMAT: &str = "mlloo-attack-set";
const SET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ExampleHeader {
    id: usize,
    original_label: usize,
    adversarial_label: usize,
    attack: AttackParams,
    success: bool,
    confidence_level: f64,
    l2_dist: f64,
    linf_dist: f64,
}

#[derive(Serialize, Deserialize)]
struct SetHeader {
    format: String,
    version: u32,
    params: AttackParams,
    summary: AttackSetSummary,
    examples: Vec<ExampleHeader>,
}

/// SplitMix64 finaliser; spreads `(seed, id)` into an independent stream seed.
pub(crate) fn derive_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parameters for image `id`: per-image seed and, if mixing, the drawn value.
pub(crate) fn resolve_params(params: &AttackParams, id: usize) -> AttackParams {
    let seed = derive_seed(params.seed, id as u64);
    let mut p = params.clone();
    p.seed = seed;
    if let Some(mix) = params.mixing.as_ref() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = mix.values();
        let v = values[rng.gen_range(0..values.len())];
        match mix {
            Mixing::Confidence { .. } => p.confidence = v,
            Mixing::Epsilon { .. } => {
                p.epsilon = v;
                p.step_size = None;
            }
        }
        p.mixing = None;
    }
    p
}

enum Attempt {
    Misclassified,
    Done(Box<PairedExample>),
}

fn attempt(model: &Model, data: &Dataset, id: usize, params: &AttackParams) -> Result<Attempt> {
    let x = data.image(id);
    let label = data.label(id);
    if model.predict(&x)? != label {
        return Ok(Attempt::Misclassified);
    }
    let p = resolve_params(params, id);
    let out = run_attack(model, &x, label, &p)?;
    let acts = model.forward(&out.adversarial)?;
    let success = out.success && acts.predicted_class != label;
    Ok(Attempt::Done(Box::new(PairedExample {
        id,
        l2_dist: x.l2_distance(&out.adversarial)?,
        linf_dist: x.linf_distance(&out.adversarial)?,
        original: x,
        adversarial_label: acts.predicted_class,
        confidence_level: confidence_from_prob(acts.confidence()),
        adversarial: out.adversarial,
        original_label: label,
        attack: p,
        success,
    })))
}

/// Attacks images of `data` with indices in `range`, in order, skipping
/// those the model misclassifies, until `n` attacks have succeeded.
///
/// Work is spread over the current rayon pool in fixed-size chunks; results
/// are consumed in index order, so the set does not depend on scheduling.
pub fn generate_attack_set(
    model: &Model,
    data: &Dataset,
    range: Range<usize>,
    params: &AttackParams,
    n: usize,
) -> Result<AttackSet> {
    params.validate()?;
    if range.end > data.len() || range.start > range.end {
        return Err(Error::InvalidArgument(format!(
            "range {range:?} outside dataset of {}",
            data.len()
        )));
    }
    let chunk = 4 * rayon::current_num_threads().max(1);
    let mut summary = AttackSetSummary {
        requested: n,
        attempted: 0,
        successes: 0,
        failures: 0,
        skipped_misclassified: 0,
        shortfall: false,
    };
    let mut examples = Vec::new();
    let mut next = range.start;
    'outer: while summary.successes < n && next < range.end {
        let end = (next + chunk).min(range.end);
        let results: Vec<Result<Attempt>> = (next..end)
            .into_par_iter()
            .map(|id| attempt(model, data, id, params))
            .collect();
        next = end;
        for r in results {
            match r? {
                Attempt::Misclassified => summary.skipped_misclassified += 1,
                Attempt::Done(ex) => {
                    summary.attempted += 1;
                    if ex.success {
                        summary.successes += 1;
                    } else {
                        summary.failures += 1;
                    }
                    examples.push(*ex);
                    if summary.successes == n {
                        break 'outer;
                    }
                }
            }
        }
    }
    if summary.successes < n {
        summary.shortfall = true;
        tracing::warn!(
            attack = params.kind.name(),
            requested = n,
            produced = summary.successes,
            "attack set shortfall"
        );
    }
    Ok(AttackSet {
        params: params.clone(),
        examples,
        summary,
    })
}
