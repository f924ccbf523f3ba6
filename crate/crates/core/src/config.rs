//! Experiment configuration: one TOML file, with `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackParams, Mixing};
use crate::attribution::MaskSpec;
use crate::detector::LogisticConfig;
use crate::dispersion::StatKind;
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::network::{ArchitectureConfig, TrainingConfig};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "MLLOO_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub format: DataFormat,
    /// IDX image/label files, or for CSV the `images` file alone.
    pub train_images: PathBuf,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    pub test_images: PathBuf,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    pub num_classes: usize,
    /// Image shape for CSV input.
    #[serde(default)]
    pub shape: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Use an existing model file instead of training.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Train on the first `train_limit` training examples only.
    #[serde(default)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub per_layer_cap: usize,
    /// Number of natural training-pool images used to rank neurons.
    pub calibration: usize,
    pub mask: MaskSpec,
    pub stat: StatKind,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            per_layer_cap: 64,
            calibration: 256,
            mask: MaskSpec::default(),
            stat: StatKind::Iqr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub logistic: LogisticConfig,
    /// Training FPR at which the single-statistic threshold is placed.
    pub threshold_fpr: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            logistic: LogisticConfig::default(),
            threshold_fpr: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Known,
    Mixed,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Index ranges of the test split used for detector training and for
    /// evaluation; they must not overlap.
    pub train_range: [usize; 2],
    pub eval_range: [usize; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub run: Vec<Protocol>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train_range: [0, 5000],
            eval_range: [5000, 10000],
            n_train: 200,
            n_test: 200,
            run: vec![Protocol::Known, Protocol::Mixed, Protocol::Transfer],
        }
    }
}

/// A named attack configuration. Unset fields take the defaults for `kind`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackEntry {
    pub name: String,
    /// Include in the known-attack protocol.
    pub known: bool,
    pub params: AttackParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixedConfig {
    pub name: String,
    pub base: AttackParams,
    pub mixing: Mixing,
    /// Confidence (or epsilon) of the low- and high-confidence sets.
    pub low: f64,
    pub high: f64,
    pub histogram_bins: usize,
    /// Evaluation set size for each of the LC/HC/MIX sets.
    pub n_test: Option<usize>,
}

impl MixedConfig {
    /// The mixed set and the fixed low/high sets, named `{name}_mix`,
    /// `{name}_lc` and `{name}_hc`, with their parameters.
    pub fn set_names(&self) -> Vec<(String, AttackParams)> {
        let fixed = |v: f64| {
            let mut p = self.base.clone();
            p.mixing = None;
            match self.mixing {
                Mixing::Confidence { .. } => p.confidence = v,
                Mixing::Epsilon { .. } => {
                    p.epsilon = v;
                    p.step_size = None;
                }
            }
            p
        };
        let mut mix = self.base.clone();
        mix.mixing = Some(self.mixing.clone());
        vec![
            (format!("{}_mix", self.name), mix),
            (format!("{}_lc", self.name), fixed(self.low)),
            (format!("{}_hc", self.name), fixed(self.high)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub source: String,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub attribution: AttributionConfig,
    pub detector: DetectorConfig,
    pub protocol: ProtocolConfig,
    pub attacks: Vec<AttackEntry>,
    pub mixed: Option<MixedConfig>,
    pub transfer: Option<TransferConfig>,
}

/// Attack parameters from a table of overrides on the defaults for its kind.
fn attack_params(table: &toml::Table, ctx: &str) -> Result<AttackParams> {
    let kind: AttackKind = table
        .get("kind")
        .ok_or_else(|| Error::Config(format!("{ctx}: missing `kind`")))?
        .clone()
        .try_into()
        .map_err(|e| Error::Config(format!("{ctx}: {e}")))?;
    let base = toml::Value::try_from(AttackParams::defaults(kind)).expect("defaults serialize");
    let mut merged = match base {
        toml::Value::Table(t) => t,
        _ => unreachable!(),
    };
    for (k, v) in table {
        if !merged.contains_key(k) && !matches!(k.as_str(), "target" | "step_size" | "mixing") {
            return Err(Error::Config(format!("{ctx}: unknown attack field `{k}`")));
        }
        merged.insert(k.clone(), v.clone());
    }
    let p: AttackParams = toml::Value::Table(merged)
        .try_into()
        .map_err(|e| Error::Config(format!("{ctx}: {e}")))?;
    p.validate().map_err(|e| Error::Config(format!("{ctx}: {e}")))?;
    Ok(p)
}

fn take<T: for<'de> Deserialize<'de> + Default>(root: &mut toml::Table, key: &str) -> Result<T> {
    match root.remove(key) {
        None => Ok(T::default()),
        Some(v) => v.try_into().map_err(|e| Error::Config(format!("[{key}]: {e}"))),
    }
}

fn take_required<T: for<'de> Deserialize<'de>>(root: &mut toml::Table, key: &str) -> Result<T> {
    root.remove(key)
        .ok_or_else(|| Error::Config(format!("missing `{key}`")))?
        .try_into()
        .map_err(|e| Error::Config(format!("[{key}]: {e}")))
}

fn as_table(v: toml::Value, ctx: &str) -> Result<toml::Table> {
    match v {
        toml::Value::Table(t) => Ok(t),
        _ => Err(Error::Config(format!("{ctx} must be a table"))),
    }
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as TOML, falling
/// back to a bare string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        if i + 1 == keys.len() {
            cur.insert(k.to_string(), value);
            return Ok(());
        }
        // Numeric segments index into arrays of tables, e.g. attacks.0.epsilon.
        let next = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            toml::Value::Array(a) => {
                let idx: usize = keys[i + 1]
                    .parse()
                    .map_err(|_| Error::Config(format!("`{k}` is a list; expected an index after it")))?;
                let rest = keys[i + 2..].join(".");
                let item = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("`{k}` has no element {idx}")))?;
                let t = match item {
                    toml::Value::Table(t) => t,
                    _ => return Err(Error::Config(format!("`{k}.{idx}` is not a table"))),
                };
                if rest.is_empty() {
                    return Err(Error::Config(format!("cannot replace `{k}.{idx}` wholesale")));
                }
                return apply_override(t, &format!("{rest}={raw}"));
            }
            _ => return Err(Error::Config(format!("`{k}` is not a table"))),
        };
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        Self::from_table(root)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    fn from_table(mut root: toml::Table) -> Result<Self> {
        let seed: u64 = take_required::<i64>(&mut root, "seed")?
            .try_into()
            .map_err(|_| Error::Config("seed must be non-negative".into()))?;
        let output_dir: PathBuf = take_required(&mut root, "output_dir")?;
        let workers: Option<usize> = take(&mut root, "workers")?;
        let dataset: DatasetConfig = take_required(&mut root, "dataset")?;
        let model: ModelConfig = match root.remove("model") {
            None => ModelConfig {
                path: None,
                architecture: ArchitectureConfig::default(),
                training: TrainingConfig::default(),
                train_limit: None,
            },
            Some(v) => v.try_into().map_err(|e| Error::Config(format!("[model]: {e}")))?,
        };
        let attribution: AttributionConfig = take(&mut root, "attribution")?;
        let detector: DetectorConfig = take(&mut root, "detector")?;
        let protocol: ProtocolConfig = take(&mut root, "protocol")?;

        let mut attacks = Vec::new();
        if let Some(v) = root.remove("attacks") {
            let list = match v {
                toml::Value::Array(a) => a,
                _ => return Err(Error::Config("`attacks` must be an array of tables".into())),
            };
            for (i, item) in list.into_iter().enumerate() {
                let ctx = format!("attacks[{i}]");
                let mut t = as_table(item, &ctx)?;
                let known = match t.remove("known") {
                    None => true,
                    Some(toml::Value::Boolean(b)) => b,
                    Some(_) => return Err(Error::Config(format!("{ctx}: `known` must be a boolean"))),
                };
                let name = match t.remove("name") {
                    None => None,
                    Some(toml::Value::String(s)) => Some(s),
                    Some(_) => return Err(Error::Config(format!("{ctx}: `name` must be a string"))),
                };
                let params = attack_params(&t, &ctx)?;
                attacks.push(AttackEntry {
                    name: name.unwrap_or_else(|| params.kind.name().to_string()),
                    known,
                    params,
                });
            }
        }

        let mixed = match root.remove("mixed") {
            None => None,
            Some(v) => {
                let mut t = as_table(v, "[mixed]")?;
                let base = attack_params(&as_table(t.remove("base").ok_or_else(|| Error::Config("[mixed]: missing `base`".into()))?, "[mixed.base]")?, "[mixed.base]")?;
                let mixing: Mixing = match t.remove("mixing") {
                    Some(v) => v.try_into().map_err(|e| Error::Config(format!("[mixed.mixing]: {e}")))?,
                    None => match base.kind {
                        AttackKind::CwL2 => Mixing::confidence_grid(),
                        _ => Mixing::epsilon_grid(),
                    },
                };
                let num = |t: &mut toml::Table, k: &str| -> Result<f64> {
                    match t.remove(k) {
                        Some(toml::Value::Float(f)) => Ok(f),
                        Some(toml::Value::Integer(i)) => Ok(i as f64),
                        _ => Err(Error::Config(format!("[mixed]: `{k}` must be a number"))),
                    }
                };
                let low = num(&mut t, "low")?;
                let high = num(&mut t, "high")?;
                let name = match t.remove("name") {
                    Some(toml::Value::String(s)) => s,
                    None => base.kind.name().to_string(),
                    Some(_) => return Err(Error::Config("[mixed]: `name` must be a string".into())),
                };
                let histogram_bins = match t.remove("histogram_bins") {
                    None => 10,
                    Some(toml::Value::Integer(i)) if i > 0 => i as usize,
                    Some(_) => return Err(Error::Config("[mixed]: `histogram_bins` must be a positive integer".into())),
                };
                let n_test = match t.remove("n_test") {
                    None => None,
                    Some(toml::Value::Integer(i)) if i > 0 => Some(i as usize),
                    Some(_) => return Err(Error::Config("[mixed]: `n_test` must be a positive integer".into())),
                };
                if let Some(k) = t.keys().next() {
                    return Err(Error::Config(format!("[mixed]: unknown field `{k}`")));
                }
                Some(MixedConfig {
                    name,
                    base,
                    mixing,
                    low,
                    high,
                    histogram_bins,
                    n_test,
                })
            }
        };
        let transfer: Option<TransferConfig> = match root.remove("transfer") {
            None => None,
            Some(v) => Some(v.try_into().map_err(|e| Error::Config(format!("[transfer]: {e}")))?),
        };
        if let Some(k) = root.keys().next() {
            return Err(Error::Config(format!("unknown top-level field `{k}`")));
        }
        let cfg = Self {
            seed,
            output_dir,
            workers,
            dataset,
            model,
            attribution,
            detector,
            protocol,
            attacks,
            mixed,
            transfer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [a0, a1] = self.protocol.train_range;
        let [b0, b1] = self.protocol.eval_range;
        if a0 >= a1 || b0 >= b1 {
            return bad("protocol ranges must be non-empty".into());
        }
        if a0 < b1 && b0 < a1 {
            return bad("train_range and eval_range overlap".into());
        }
        if self.protocol.n_train == 0 || self.protocol.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if self.dataset.format == DataFormat::Idx
            && (self.dataset.train_labels.is_none() || self.dataset.test_labels.is_none())
        {
            return bad("IDX datasets need train_labels and test_labels".into());
        }
        if self.dataset.format == DataFormat::Csv && self.dataset.shape.is_none() {
            return bad("CSV datasets need `shape`".into());
        }
        self.attribution.mask.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.attribution.calibration == 0 {
            return bad("attribution.calibration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.detector.threshold_fpr) {
            return bad("detector.threshold_fpr outside [0, 1]".into());
        }
        let mut names: Vec<String> = self.attacks.iter().map(|a| a.name.clone()).collect();
        if let Some(m) = &self.mixed {
            names.extend(m.set_names().into_iter().map(|(n, _)| n));
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("attack set names must be unique".into());
        }
        for n in &names {
            if n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("attack name {n:?} must be alphanumeric, '_' or '-'"));
            }
        }
        if let Some(t) = &self.transfer {
            for n in std::iter::once(&t.source).chain(&t.targets) {
                if !self.attacks.iter().any(|a| &a.name == n) {
                    return bad(format!("transfer refers to unknown attack {n:?}"));
                }
            }
        }
        for p in &self.protocol.run {
            match p {
                Protocol::Mixed if self.mixed.is_none() => return bad("mixed protocol needs [mixed]".into()),
                Protocol::Transfer if self.transfer.is_none() => {
                    return bad("transfer protocol needs [transfer]".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Hash of everything that determines results; excludes the output
    /// directory and worker count.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().unwrap();
        obj.remove("output_dir");
        obj.remove("workers");
        sha256_hex(v.to_string().as_bytes())
    }

    /// Worker count: config, then the environment, then all cores.
    pub fn worker_count(&self) -> usize {
        self.workers
            .filter(|&w| w > 0)
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|s| s.parse().ok()).filter(|&w| w > 0))
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
output_dir = "runs/x"

[dataset]
name = "toy"
format = "csv"
train_images = "train.csv"
test_images = "test.csv"
num_classes = 3
shape = [6, 6, 1]

[protocol]
train_range = [0, 50]
eval_range = [50, 100]
n_train = 10
n_test = 10
run = ["known", "transfer"]

[[attacks]]
kind = "fgsm"
epsilon = 0.2

[[attacks]]
kind = "cw_l2"
steps = 20
known = false

[transfer]
source = "fgsm"
targets = ["cw_l2"]
"#;

    #[test]
    fn parses_with_kind_defaults() {
        let c = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.attacks[0].name, "fgsm");
        assert_eq!(c.attacks[0].params.epsilon, 0.2);
        assert_eq!(c.attacks[1].params.steps, 20);
        assert_eq!(c.attacks[1].params.binary_steps, AttackParams::defaults(AttackKind::CwL2).binary_steps);
        assert!(!c.attacks[1].known);
        assert_eq!(c.attribution.per_layer_cap, 64);
        assert_eq!(c.model.architecture, ArchitectureConfig::default());
    }

    #[test]
    fn overrides_apply_one_to_one() {
        let c = ExperimentConfig::from_toml(
            BASE,
            &[
                "seed=9".into(),
                "attacks.0.epsilon=0.1".into(),
                "attribution.stat=mad".into(),
                "detector.logistic.lambda=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.attacks[0].params.epsilon, 0.1);
        assert_eq!(c.attribution.stat, StatKind::Mad);
        assert_eq!(c.detector.logistic.lambda, 0.5);
        assert_ne!(c.content_hash(), ExperimentConfig::from_toml(BASE, &[]).unwrap().content_hash());
        let moved = ExperimentConfig::from_toml(BASE, &["output_dir=elsewhere".into(), "workers=2".into()]).unwrap();
        assert_eq!(moved.content_hash(), ExperimentConfig::from_toml(BASE, &[]).unwrap().content_hash());
    }

    #[test]
    fn rejects_bad_configs() {
        for o in [
            "protocol.eval_range=[10, 60]",
            "attacks.0.bogus=1",
            "transfer.source=\"nope\"",
            "unknown=1",
            "attacks.0.epsilon=-1",
            "dataset.shape=\"x\"",
        ] {
            assert!(ExperimentConfig::from_toml(BASE, &[o.to_string()]).is_err(), "{o}");
        }
        assert!(ExperimentConfig::from_toml("seed = 1", &[]).is_err());
        assert!(ExperimentConfig::from_toml(BASE, &["noequals".into()]).is_err());
    }

    #[test]
    fn mixed_section_defaults_to_confidence_grid() {
        let text = format!(
            "{BASE}\n[mixed]\nlow = 0\nhigh = 50\nbase = {{ kind = \"cw_l2\", steps = 10 }}\n"
        );
        let c = ExperimentConfig::from_toml(&text, &[]).unwrap();
        let m = c.mixed.unwrap();
        assert_eq!(m.name, "cw_l2");
        let sets = m.set_names();
        assert_eq!(sets[0].0, "cw_l2_mix");
        assert_eq!(sets[1].1.confidence, 0.0);
        assert_eq!(sets[2].1.confidence, 50.0);
        assert!(sets[1].1.mixing.is_none());
        assert_eq!(m.mixing, Mixing::confidence_grid());
        assert_eq!((m.low, m.high, m.histogram_bins), (0.0, 50.0, 10));
    }
}
