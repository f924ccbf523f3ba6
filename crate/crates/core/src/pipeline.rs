//! Pipeline stages. Every stage reads and writes files under the output
//! directory; each file has a `.meta.json` sidecar with its SHA-256, the key
//! it was derived from and the hashes of its inputs.
//!
//! ```text
//! manifest.json            test-split manifest
//! model.bin                classifier
//! selection.json           neurons recorded by attribution
//! attacks/<set>_<split>.atk
//! features/<set>_<split>.csv
//! detectors/<set>.json     logistic detector
//! detectors/<set>.threshold.json
//! report.json, timing.json, confidence_histograms.csv, roc/*.csv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attacks::{confidence_from_prob, derive_seed, generate_attack_set, AttackSet};
use crate::attribution::{ml_loo_attribution, select_layers, LayerSelection};
use crate::config::{DataFormat, ExperimentConfig, Protocol};
use crate::dataset::{Dataset, DatasetManifest, SplitRange};
use crate::detector::{fit_logistic, fit_threshold, Detector, LogisticDetector, ThresholdDetector};
use crate::dispersion::{feature_vector, FeatureRow, FeatureTable};
use crate::error::{Error, Result};
use crate::evaluation::{
    confidence_histograms, evaluate_leg, histograms_csv, plan, roc_csv, roc_curve, ExperimentReport, LegSpec,
    Plan, SetReport, SetSpec, Split,
};
use crate::io::{ingest_csv, ingest_idx, sha256_file, sha256_hex, write_atomic};
use crate::network::{train_classifier, Model};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub kind: String,
    pub sha256: String,
    /// Hash of everything the artifact was derived from; a cached artifact
    /// is reused only when this matches.
    pub key: String,
    pub upstream: BTreeMap<String, String>,
    #[serde(default)]
    pub info: serde_json::Value,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the artifact, then its sidecar; both atomically.
pub fn write_artifact(
    path: &Path,
    bytes: &[u8],
    kind: &str,
    key: &str,
    upstream: BTreeMap<String, String>,
    info: serde_json::Value,
) -> Result<ArtifactMeta> {
    let meta = ArtifactMeta {
        kind: kind.to_string(),
        sha256: sha256_hex(bytes),
        key: key.to_string(),
        upstream,
        info,
    };
    write_atomic(path, bytes)?;
    let mut m = serde_json::to_string_pretty(&meta)?;
    m.push('\n');
    write_atomic(&meta_path(path), m.as_bytes())?;
    Ok(meta)
}

/// Reads an artifact and checks it against its sidecar.
pub fn read_artifact(path: &Path, kind: &str) -> Result<(Vec<u8>, ArtifactMeta)> {
    let mp = meta_path(path);
    if !path.exists() || !mp.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: ArtifactMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "artifact metadata",
        path: mp.clone(),
        reason: e.to_string(),
    })?;
    if meta.kind != kind {
        return Err(Error::Format {
            kind: "artifact metadata",
            path: mp,
            reason: format!("expected a {kind}, found a {}", meta.kind),
        });
    }
    let sha = sha256_hex(&bytes);
    if sha != meta.sha256 {
        return Err(Error::HashMismatch {
            what: path.display().to_string(),
            expected: meta.sha256,
            found: sha,
        });
    }
    Ok((bytes, meta))
}

fn cached(path: &Path, kind: &str, key: &str) -> Option<(Vec<u8>, ArtifactMeta)> {
    match read_artifact(path, kind) {
        Ok((b, m)) if m.key == key => Some((b, m)),
        _ => None,
    }
}

fn key_of(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())
}

fn expect_upstream(meta: &ArtifactMeta, what: &str, name: &str, expected: &str) -> Result<()> {
    match meta.upstream.get(name) {
        Some(h) if h == expected => Ok(()),
        found => Err(Error::HashMismatch {
            what: format!("{name} of {what}"),
            expected: expected.to_string(),
            found: found.cloned().unwrap_or_else(|| "<none>".into()),
        }),
    }
}

/// Loaded inputs shared by the stages.
pub struct Workspace {
    pub config: ExperimentConfig,
    /// Base for relative paths in the config.
    pub root: PathBuf,
    pub out: PathBuf,
    pub config_hash: String,
    pub plan: Plan,
    timing: Vec<(String, f64)>,
    /// Seconds spent producing each artifact regenerated by this process.
    generated: Vec<(String, f64)>,
}

/// Test split, its manifest and hash.
pub struct TestData {
    pub data: Dataset,
    pub manifest: DatasetManifest,
}

impl Workspace {
    pub fn new(config: ExperimentConfig, root: &Path) -> Self {
        let out = root.join(&config.output_dir);
        Self {
            config_hash: config.content_hash(),
            plan: plan(&config),
            config,
            root: root.to_path_buf(),
            out,
            timing: Vec::new(),
            generated: Vec::new(),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let r = f(self)?;
        self.timing.push((stage.to_string(), t0.elapsed().as_secs_f64()));
        Ok(r)
    }

    fn load_split(&self, images: &Path, labels: Option<&PathBuf>) -> Result<(Dataset, DatasetManifest)> {
        let d = &self.config.dataset;
        match d.format {
            DataFormat::Idx => ingest_idx(
                &self.resolve(images),
                &self.resolve(labels.expect("validated")),
                d.num_classes,
            ),
            DataFormat::Csv => ingest_csv(&self.resolve(images), d.shape.expect("validated"), d.num_classes),
        }
    }

    /// Loads the test split and records its manifest.
    pub fn test_data(&self) -> Result<TestData> {
        let d = &self.config.dataset;
        let (data, mut manifest) = self.load_split(&d.test_images, d.test_labels.as_ref())?;
        let p = &self.config.protocol;
        for (name, [a, b]) in [("detector_train", p.train_range), ("detector_eval", p.eval_range)] {
            if b > data.len() {
                return Err(Error::Config(format!(
                    "{name} range [{a}, {b}) exceeds the {} test examples",
                    data.len()
                )));
            }
            manifest.splits.push(SplitRange {
                name: name.into(),
                start: a,
                end: b,
            });
        }
        manifest.name = d.name.clone();
        let path = self.path("manifest.json");
        if cached(&path, "manifest", &manifest.content_hash).is_none() {
            let mut bytes = serde_json::to_vec_pretty(&manifest)?;
            bytes.push(b'\n');
            write_artifact(&path, &bytes, "manifest", &manifest.content_hash, BTreeMap::new(), json!(null))?;
        }
        Ok(TestData { data, manifest })
    }

    fn training_key(&self) -> Result<String> {
        let d = &self.config.dataset;
        let mut files = vec![sha256_file(&self.resolve(&d.train_images))?];
        if let Some(l) = &d.train_labels {
            files.push(sha256_file(&self.resolve(l))?);
        }
        Ok(key_of(&json!({
            "train_files": files,
            "architecture": self.config.model.architecture,
            "training": self.config.model.training,
            "train_limit": self.config.model.train_limit,
            "num_classes": d.num_classes,
        })))
    }

    /// Trains the classifier, or reuses a cached one trained with the same
    /// data and settings. A configured model path is loaded instead.
    pub fn train(&mut self) -> Result<Model> {
        self.timed("train", |ws| {
            if let Some(p) = &ws.config.model.path {
                return Model::load(&ws.resolve(p));
            }
            let key = ws.training_key()?;
            let path = ws.path("model.bin");
            if let Some((bytes, _)) = cached(&path, "model", &key) {
                tracing::info!("reusing cached model");
                return Model::from_bytes(&bytes, &path);
            }
            let d = &ws.config.dataset;
            let (mut train, _) = ws.load_split(&d.train_images, d.train_labels.as_ref())?;
            if let Some(n) = ws.config.model.train_limit {
                train = train.slice(0, n.min(train.len()))?;
            }
            tracing::info!(examples = train.len(), "training classifier");
            let t0 = Instant::now();
            let (model, log) = train_classifier(&train, &ws.config.model.architecture, &ws.config.model.training)?;
            write_artifact(&path, &model.to_bytes(), "model", &key, BTreeMap::new(), json!({ "log": log }))?;
            ws.generated.push(("model.bin".into(), t0.elapsed().as_secs_f64()));
            Ok(model)
        })
    }

    /// The model the later stages run on; never trains.
    pub fn model(&self) -> Result<Model> {
        if let Some(p) = &self.config.model.path {
            return Model::load(&self.resolve(p));
        }
        let (bytes, _) = read_artifact(&self.path("model.bin"), "model")?;
        Model::from_bytes(&bytes, &self.path("model.bin"))
    }

    /// Ranks neurons on natural images from the detector-training pool and
    /// records test accuracy alongside.
    pub fn selection(&mut self, model: &Model, test: &TestData) -> Result<LayerSelection> {
        self.timed("selection", |ws| {
            let a = &ws.config.attribution;
            let start = ws.config.protocol.train_range[0];
            let end = (start + a.calibration).min(ws.config.protocol.train_range[1]);
            let key = key_of(&json!({
                "model": model.content_hash(),
                "dataset": test.manifest.content_hash,
                "cap": a.per_layer_cap,
                "calibration": [start, end],
                "seed": ws.config.seed,
            }));
            let path = ws.path("selection.json");
            if let Some((bytes, _)) = cached(&path, "selection", &key) {
                return serde_json::from_slice(&bytes).map_err(Error::from);
            }
            let calib: Vec<Tensor> = (start..end).map(|i| test.data.image(i)).collect();
            let sel = select_layers(model, &calib, a.per_layer_cap, ws.config.seed)?;
            let correct: usize = (0..test.data.len())
                .into_par_iter()
                .map(|i| Ok(usize::from(model.predict(&test.data.image(i))? == test.data.label(i))))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum();
            let accuracy = correct as f64 / test.data.len() as f64;
            tracing::info!(accuracy, neurons = sel.num_neurons(), "layer selection");
            let mut bytes = serde_json::to_vec_pretty(&sel)?;
            bytes.push(b'\n');
            let upstream = BTreeMap::from([
                ("model".to_string(), model.content_hash().to_string()),
                ("dataset".to_string(), test.manifest.content_hash.clone()),
            ]);
            let info = json!({
                "selection_hash": sel.hash(),
                "num_features": sel.num_neurons(),
                "model_test_accuracy": accuracy,
                "dataset": ws.config.dataset.name,
            });
            write_artifact(&path, &bytes, "selection", &key, upstream, info)?;
            Ok(sel)
        })
    }

    fn load_selection(&self) -> Result<(LayerSelection, ArtifactMeta)> {
        let path = self.path("selection.json");
        let (bytes, meta) = read_artifact(&path, "selection")?;
        let sel: LayerSelection = serde_json::from_slice(&bytes)?;
        Ok((sel, meta))
    }

    fn range(&self, split: Split) -> std::ops::Range<usize> {
        let [a, b] = match split {
            Split::Train => self.config.protocol.train_range,
            Split::Eval => self.config.protocol.eval_range,
        };
        a..b
    }

    fn set_path(&self, spec: &SetSpec) -> PathBuf {
        self.path(&format!("attacks/{}.atk", spec.stem()))
    }

    fn features_path(&self, spec: &SetSpec) -> PathBuf {
        self.path(&format!("features/{}.csv", spec.stem()))
    }

    /// Generates every attack set in the plan, reusing cached ones.
    pub fn attacks(&mut self, model: &Model, test: &TestData) -> Result<()> {
        self.timed("attacks", |ws| {
            for spec in ws.plan.sets.clone() {
                let mut params = spec.params.clone();
                params.seed = derive_seed(ws.config.seed, params.seed);
                let range = ws.range(spec.split);
                let key = key_of(&json!({
                    "model": model.content_hash(),
                    "dataset": test.manifest.content_hash,
                    "params": params,
                    "range": [range.start, range.end],
                    "n": spec.n,
                }));
                let path = ws.set_path(&spec);
                if cached(&path, "attack_set", &key).is_some() {
                    tracing::info!(set = spec.stem(), "reusing cached attack set");
                    continue;
                }
                let t0 = Instant::now();
                let set = generate_attack_set(model, &test.data, range, &params, spec.n)?;
                tracing::info!(
                    set = spec.stem(),
                    successes = set.summary.successes,
                    attempted = set.summary.attempted,
                    secs = t0.elapsed().as_secs_f64(),
                    "attack set"
                );
                let upstream = BTreeMap::from([
                    ("model".to_string(), model.content_hash().to_string()),
                    ("dataset".to_string(), test.manifest.content_hash.clone()),
                ]);
                write_atomic(&path.with_extension("csv"), set.summary_csv().as_bytes())?;
                write_artifact(&path, &set.to_bytes(), "attack_set", &key, upstream, json!(set.summary))?;
                ws.generated
                    .push((format!("attacks/{}.atk", spec.stem()), t0.elapsed().as_secs_f64()));
            }
            Ok(())
        })
    }

    /// Attribution features for the natural and adversarial image of every
    /// successful pair in every set.
    pub fn features(&mut self, model: &Model) -> Result<()> {
        self.timed("features", |ws| {
            let (sel, sel_meta) = ws.load_selection()?;
            expect_upstream(&sel_meta, "selection", "model", model.content_hash())?;
            let sel_hash = sel.hash();
            let a = ws.config.attribution.clone();
            let mut natural: HashMap<usize, Vec<f64>> = HashMap::new();
            for spec in ws.plan.sets.clone() {
                let set_path = ws.set_path(&spec);
                let (bytes, set_meta) = read_artifact(&set_path, "attack_set")?;
                expect_upstream(&set_meta, &spec.stem(), "model", model.content_hash())?;
                let key = key_of(&json!({
                    "set": set_meta.sha256,
                    "selection": sel_hash,
                    "mask": a.mask,
                    "stat": a.stat,
                }));
                let path = ws.features_path(&spec);
                if cached(&path, "features", &key).is_some() {
                    continue;
                }
                let t0 = Instant::now();
                let set = AttackSet::from_bytes(&bytes, &set_path)?;
                let pairs: Vec<_> = set.successes().collect();
                let feat = |x: &Tensor, id: usize| -> Result<Vec<f64>> {
                    let rec = ml_loo_attribution(model, x, &sel, &a.mask, id)?;
                    Ok(feature_vector(&rec, a.stat)?.values)
                };
                let missing: Vec<_> = pairs.iter().filter(|e| !natural.contains_key(&e.id)).collect();
                let nat_new: Vec<(usize, Vec<f64>)> = missing
                    .par_iter()
                    .map(|e| Ok((e.id, feat(&e.original, e.id)?)))
                    .collect::<Result<_>>()?;
                natural.extend(nat_new);
                let adv: Vec<Vec<f64>> = pairs
                    .par_iter()
                    .map(|e| feat(&e.adversarial, e.id))
                    .collect::<Result<_>>()?;
                let mut table = FeatureTable::new(a.stat, sel_hash.clone(), sel.num_neurons());
                let mut nat_conf = Vec::new();
                for (e, adv_values) in pairs.iter().zip(adv) {
                    let p = model.forward(&e.original)?.confidence();
                    nat_conf.push(confidence_from_prob(p));
                    table.push(FeatureRow {
                        id: e.id,
                        label: e.original_label,
                        is_adversarial: false,
                        attack: spec.name.clone(),
                        values: natural[&e.id].clone(),
                    })?;
                    table.push(FeatureRow {
                        id: e.id,
                        label: e.original_label,
                        is_adversarial: true,
                        attack: spec.name.clone(),
                        values: adv_values,
                    })?;
                }
                let n = pairs.len().max(1) as f64;
                let report = SetReport {
                    name: spec.name.clone(),
                    split: spec.split,
                    params: set.params.clone(),
                    summary: set.summary.clone(),
                    mean_l2: pairs.iter().map(|e| e.l2_dist).sum::<f64>() / n,
                    mean_linf: pairs.iter().map(|e| e.linf_dist).sum::<f64>() / n,
                };
                let upstream = BTreeMap::from([
                    ("model".to_string(), model.content_hash().to_string()),
                    ("attack_set".to_string(), set_meta.sha256.clone()),
                    ("selection".to_string(), sel_hash.clone()),
                ]);
                let info = json!({
                    "stat": a.stat,
                    "set": report,
                    "natural_confidence": nat_conf,
                    "adversarial_confidence": pairs.iter().map(|e| e.confidence_level).collect::<Vec<_>>(),
                });
                write_artifact(&path, table.to_csv().as_bytes(), "features", &key, upstream, info)?;
                ws.generated
                    .push((format!("features/{}.csv", spec.stem()), t0.elapsed().as_secs_f64()));
                tracing::info!(set = spec.stem(), pairs = pairs.len(), "features");
            }
            Ok(())
        })
    }

    fn load_features(&self, spec: &SetSpec, selection_hash: &str) -> Result<(FeatureTable, ArtifactMeta)> {
        let path = self.features_path(spec);
        let (bytes, meta) = read_artifact(&path, "features")?;
        expect_upstream(&meta, &spec.stem(), "selection", selection_hash)?;
        let stat = serde_json::from_value(meta.info["stat"].clone())?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Format {
            kind: "features csv",
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let table = FeatureTable::from_csv(&text, stat, selection_hash.to_string(), &path)?;
        Ok((table, meta))
    }

    fn detector_paths(&self, name: &str) -> (PathBuf, PathBuf) {
        (
            self.path(&format!("detectors/{name}.json")),
            self.path(&format!("detectors/{name}.threshold.json")),
        )
    }

    /// Fits the logistic and single-statistic detectors on each training set.
    pub fn fit(&mut self) -> Result<()> {
        self.timed("fit", |ws| {
            let (_, sel_meta) = ws.load_selection()?;
            let sel_hash = sel_meta.info["selection_hash"].as_str().unwrap_or_default().to_string();
            for name in ws.plan.detectors.clone() {
                let spec = ws.plan.set(&name, Split::Train).expect("planned").clone();
                let (table, meta) = ws.load_features(&spec, &sel_hash)?;
                let nat = table.matrix(false);
                let adv = table.matrix(true);
                let cfg = &ws.config.detector;
                let logistic = fit_logistic(&nat, &adv, &cfg.logistic, table.stat_kind, &sel_hash)?;
                let first = |rows: &[Vec<f64>]| rows.iter().map(|r| r[0]).collect::<Vec<_>>();
                let threshold = fit_threshold(&first(&nat), &first(&adv), cfg.threshold_fpr, table.stat_kind)?;
                let key = key_of(&json!({ "features": meta.sha256, "detector": cfg }));
                let mut upstream = BTreeMap::from([
                    ("features".to_string(), meta.sha256.clone()),
                    ("selection".to_string(), sel_hash.clone()),
                ]);
                if let Some(m) = meta.upstream.get("model") {
                    upstream.insert("model".into(), m.clone());
                }
                let (lp, tp) = ws.detector_paths(&name);
                let info = json!({ "train_set": spec.stem(), "pairs": nat.len() });
                write_artifact(
                    &lp,
                    Detector::Logistic(logistic).to_json().as_bytes(),
                    "detector",
                    &key,
                    upstream.clone(),
                    info.clone(),
                )?;
                write_artifact(
                    &tp,
                    Detector::Threshold(threshold).to_json().as_bytes(),
                    "detector",
                    &key,
                    upstream,
                    info,
                )?;
            }
            Ok(())
        })
    }

    fn load_detectors(&self, name: &str, sel_hash: &str) -> Result<(LogisticDetector, ThresholdDetector)> {
        let (lp, tp) = self.detector_paths(name);
        let (lb, lm) = read_artifact(&lp, "detector")?;
        let (tb, tm) = read_artifact(&tp, "detector")?;
        expect_upstream(&lm, name, "selection", sel_hash)?;
        expect_upstream(&tm, name, "selection", sel_hash)?;
        let text = |b: Vec<u8>, p: &Path| {
            String::from_utf8(b).map_err(|e| Error::Format {
                kind: "detector",
                path: p.to_path_buf(),
                reason: e.to_string(),
            })
        };
        let logistic = match Detector::from_json(&text(lb, &lp)?, &lp)? {
            Detector::Logistic(d) => d,
            _ => return Err(Error::Config(format!("{} is not a logistic detector", lp.display()))),
        };
        let threshold = match Detector::from_json(&text(tb, &tp)?, &tp)? {
            Detector::Threshold(d) => d,
            _ => return Err(Error::Config(format!("{} is not a threshold detector", tp.display()))),
        };
        // The detector must have been fit on the training features now on disk.
        let train = self.plan.set(name, Split::Train).expect("planned");
        if let Ok((_, fm)) = read_artifact(&self.features_path(train), "features") {
            expect_upstream(&lm, name, "features", &fm.sha256)?;
        }
        Ok((logistic, threshold))
    }

    /// Scores every planned leg and writes the report.
    pub fn eval(&mut self) -> Result<ExperimentReport> {
        self.timed("eval", |ws| {
            let (_, sel_meta) = ws.load_selection()?;
            let sel_hash = sel_meta.info["selection_hash"].as_str().unwrap_or_default().to_string();
            let model_hash = sel_meta.upstream.get("model").cloned().unwrap_or_default();
            let mut tables: BTreeMap<(String, Split), (FeatureTable, ArtifactMeta)> = BTreeMap::new();
            for spec in &ws.plan.sets {
                let (t, m) = ws.load_features(spec, &sel_hash)?;
                expect_upstream(&m, &spec.stem(), "model", &model_hash)?;
                tables.insert((spec.name.clone(), spec.split), (t, m));
            }
            let mut legs = Vec::new();
            for leg in &ws.plan.legs {
                let (logistic, threshold) = ws.load_detectors(&leg.detector, &sel_hash)?;
                let (test, _) = &tables[&(leg.test_set.clone(), Split::Eval)];
                legs.push(evaluate_leg(leg, &logistic, &threshold, test)?);
            }
            let mut sets = Vec::new();
            for spec in &ws.plan.sets {
                let (_, m) = &tables[&(spec.name.clone(), spec.split)];
                sets.push(serde_json::from_value(m.info["set"].clone())?);
            }
            let confidence = match (&ws.config.mixed, ws.config.protocol.run.contains(&Protocol::Mixed)) {
                (Some(mixed), true) => {
                    let names = mixed.set_names();
                    let (_, mix_meta) = &tables[&(names[0].0.clone(), Split::Eval)];
                    let floats = |v: &serde_json::Value| -> Result<Vec<f64>> { Ok(serde_json::from_value(v.clone())?) };
                    let mut pops = vec![("natural".to_string(), floats(&mix_meta.info["natural_confidence"])?)];
                    for (name, _) in &names {
                        let (_, m) = &tables[&(name.clone(), Split::Eval)];
                        pops.push((name.clone(), floats(&m.info["adversarial_confidence"])?));
                    }
                    let (hists, summary) = confidence_histograms(&pops, mixed.histogram_bins)?;
                    write_atomic(&ws.path("confidence_histograms.csv"), histograms_csv(&hists).as_bytes())?;
                    Some(summary)
                }
                _ => None,
            };
            let info = &sel_meta.info;
            let report = ExperimentReport {
                format: ExperimentReport::FORMAT.into(),
                config_hash: ws.config_hash.clone(),
                dataset: info["dataset"].as_str().unwrap_or_default().to_string(),
                dataset_hash: sel_meta.upstream.get("dataset").cloned().unwrap_or_default(),
                model_hash,
                model_test_accuracy: info["model_test_accuracy"].as_f64().unwrap_or(f64::NAN),
                selection_hash: sel_hash,
                num_features: info["num_features"].as_u64().unwrap_or(0) as usize,
                seed: ws.config.seed,
                attribution: ws.config.attribution.clone(),
                detector: ws.config.detector.clone(),
                sets,
                legs,
                confidence,
            };
            write_atomic(&ws.path("report.json"), report.to_json().as_bytes())?;
            Ok(report)
        })
    }

    /// ROC curves of both detectors for every leg.
    pub fn roc(&mut self) -> Result<Vec<PathBuf>> {
        self.timed("roc", |ws| {
            let (_, sel_meta) = ws.load_selection()?;
            let sel_hash = sel_meta.info["selection_hash"].as_str().unwrap_or_default().to_string();
            let mut written = Vec::new();
            for leg in ws.plan.legs.clone() {
                let LegSpec {
                    protocol,
                    detector,
                    test_set,
                } = &leg;
                let (logistic, _) = ws.load_detectors(detector, &sel_hash)?;
                let spec = ws.plan.set(test_set, Split::Eval).expect("planned").clone();
                let (table, _) = ws.load_features(&spec, &sel_hash)?;
                let score = |adv: bool| -> Result<Vec<f64>> {
                    table.matrix(adv).iter().map(|r| logistic.score_values(r)).collect()
                };
                let first = |adv: bool| -> Vec<f64> { table.matrix(adv).iter().map(|r| r[0]).collect() };
                let tag = serde_json::to_value(protocol)?.as_str().unwrap_or_default().to_string();
                for (kind, nat, adv) in [
                    ("ml_loo", score(false)?, score(true)?),
                    ("single_layer", first(false), first(true)),
                ] {
                    let p = ws.path(&format!("roc/{tag}_{detector}_on_{test_set}_{kind}.csv"));
                    write_atomic(&p, roc_csv(&roc_curve(&nat, &adv)?).as_bytes())?;
                    written.push(p);
                }
            }
            Ok(written)
        })
    }

    /// Writes `timing.json`: seconds per stage of this invocation, and
    /// seconds per artifact, kept from earlier runs for cached artifacts.
    pub fn write_timing(&self) -> Result<()> {
        let path = self.path("timing.json");
        let mut artifacts: BTreeMap<String, f64> = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
            .and_then(|v| serde_json::from_value(v["artifacts"].clone()).ok())
            .unwrap_or_default();
        artifacts.extend(self.generated.iter().cloned());
        let stages: BTreeMap<&str, f64> = self.timing.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let mut s = serde_json::to_string_pretty(&json!({ "stages": stages, "artifacts": artifacts }))?;
        s.push('\n');
        write_atomic(&path, s.as_bytes())
    }

    /// Every stage in order.
    pub fn repro(&mut self) -> Result<ExperimentReport> {
        let test = self.test_data()?;
        let model = self.train()?;
        self.selection(&model, &test)?;
        self.attacks(&model, &test)?;
        self.features(&model)?;
        self.fit()?;
        let report = self.eval()?;
        self.roc()?;
        self.write_timing()?;
        Ok(report)
    }
}

fn run_protocol(config: &ExperimentConfig, root: &Path, protocol: Protocol) -> Result<ExperimentReport> {
    let mut c = config.clone();
    c.protocol.run = vec![protocol];
    c.validate()?;
    Workspace::new(c, root).repro()
}

/// Known-attack protocol: a detector per attack, evaluated on held-out pairs
/// from the same attack.
pub fn run_known_attack_experiment(config: &ExperimentConfig, root: &Path) -> Result<ExperimentReport> {
    run_protocol(config, root, Protocol::Known)
}

/// Mixed-confidence protocol: fit on the mixed set, evaluate on the low,
/// high and mixed sets.
pub fn run_mixed_confidence_experiment(config: &ExperimentConfig, root: &Path) -> Result<ExperimentReport> {
    run_protocol(config, root, Protocol::Mixed)
}

/// Transfer protocol: fit on the source attack only, evaluate on the targets.
pub fn run_transfer_experiment(config: &ExperimentConfig, root: &Path) -> Result<ExperimentReport> {
    run_protocol(config, root, Protocol::Transfer)
}
