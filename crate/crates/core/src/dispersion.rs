//! Dispersion statistics of attribution vectors and the per-image feature
//! rows fed to detectors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionRecord;
use crate::error::{Error, Result};
use crate::numerics::check_finite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Iqr,
    Std,
    Mad,
}

impl StatKind {
    pub const ALL: [StatKind; 3] = [StatKind::Iqr, StatKind::Std, StatKind::Mad];

    pub fn name(self) -> &'static str {
        match self {
            StatKind::Iqr => "iqr",
            StatKind::Std => "std",
            StatKind::Mad => "mad",
        }
    }

    pub fn apply(self, values: &[f64]) -> Result<f64> {
        match self {
            StatKind::Iqr => iqr(values),
            StatKind::Std => std(values),
            StatKind::Mad => mad(values),
        }
    }
}

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("dispersion of an empty vector".into()));
    }
    check_finite(values, "dispersion input")?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Smallest `k` in `1..=d` with `k / d >= p`.
fn order_index(p: f64, d: usize) -> usize {
    let df = d as f64;
    let mut k = ((p * df).ceil() as usize).clamp(1, d);
    while k > 1 && (k - 1) as f64 / df >= p {
        k -= 1;
    }
    while k < d && (k as f64) / df < p {
        k += 1;
    }
    k
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    v[order_index(p, v.len()) - 1]
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {p} outside (0, 1]")));
    }
    Ok(())
}

/// Infimum of `{b : #{i : v_i < b} / d >= p}`: the order statistic
/// `v_(k)` with `k` the smallest index satisfying `k / d >= p`.
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(quantile_sorted(&sorted(values)?, p))
}

/// `Q(0.75) - Q(0.25)`.
pub fn iqr(values: &[f64]) -> Result<f64> {
    let v = sorted(values)?;
    Ok(quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25))
}

/// Population standard deviation.
pub fn std(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("dispersion of an empty vector".into()));
    }
    check_finite(values, "dispersion input")?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / n).sqrt())
}

/// Median of absolute deviations from the median; the median of an
/// even-length vector is its lower-middle element.
pub fn mad(values: &[f64]) -> Result<f64> {
    let v = sorted(values)?;
    let med = quantile_sorted(&v, 0.5);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&dev, 0.5))
}

/// One dispersion value per selected neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionFeatures {
    pub input_id: usize,
    pub stat_kind: StatKind,
    pub values: Vec<f64>,
    pub selection_hash: String,
}

pub fn feature_vector(rec: &AttributionRecord, stat_kind: StatKind) -> Result<DispersionFeatures> {
    let values = (0..rec.num_neurons())
        .map(|n| stat_kind.apply(rec.row(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DispersionFeatures {
        input_id: rec.input_id,
        stat_kind,
        values,
        selection_hash: rec.layer_selection.hash(),
    })
}

/// A row of the features CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: usize,
    pub label: usize,
    pub is_adversarial: bool,
    pub attack: String,
    pub values: Vec<f64>,
}

/// Features for a set of images, all from the same selection and statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub stat_kind: StatKind,
    pub selection_hash: String,
    pub num_features: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn new(stat_kind: StatKind, selection_hash: String, num_features: usize) -> Self {
        Self {
            stat_kind,
            selection_hash,
            num_features,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: FeatureRow) -> Result<()> {
        if row.values.len() != self.num_features {
            return Err(Error::Shape(format!(
                "row has {} features, table has {}",
                row.values.len(),
                self.num_features
            )));
        }
        if row.attack.contains([',', '\n', '"']) {
            return Err(Error::InvalidArgument(format!("attack name {:?} not CSV-safe", row.attack)));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Rows with the given adversarial flag, as feature vectors.
    pub fn matrix(&self, adversarial: bool) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .filter(|r| r.is_adversarial == adversarial)
            .map(|r| r.values.clone())
            .collect()
    }

    /// `id,label,is_adversarial,attack,feat_0,...`; floats in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label,is_adversarial,attack");
        for j in 0..self.num_features {
            let _ = write!(out, ",feat_{j}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", r.id, r.label, u8::from(r.is_adversarial), r.attack);
            for v in &r.values {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses rows written by [`FeatureTable::to_csv`]; the statistic and
    /// selection hash travel separately.
    pub fn from_csv(text: &str, stat_kind: StatKind, selection_hash: String, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Format {
            kind: "features csv",
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", line + 1),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(0, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..4] != ["id", "label", "is_adversarial", "attack"] {
            return Err(err(0, format!("unexpected header {header:?}")));
        }
        let m = cols.len() - 4;
        for (j, c) in cols[4..].iter().enumerate() {
            if *c != format!("feat_{j}") {
                return Err(err(0, format!("column {c:?} out of order")));
            }
        }
        let mut table = Self::new(stat_kind, selection_hash, m);
        for (ln, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != m + 4 {
                return Err(err(ln, format!("{} cells, expected {}", cells.len(), m + 4)));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(ln, format!("{s:?} is not an integer")));
            let is_adversarial = match cells[2] {
                "0" => false,
                "1" => true,
                s => return Err(err(ln, format!("is_adversarial {s:?} is not 0 or 1"))),
            };
            let values = cells[4..]
                .iter()
                .map(|s| match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(err(ln, format!("feature {s:?} is not a finite number"))),
                })
                .collect::<Result<Vec<_>>>()?;
            table.rows.push(FeatureRow {
                id: int(cells[0])?,
                label: int(cells[1])?,
                is_adversarial,
                attack: cells[3].to_string(),
                values,
            });
        }
        Ok(table)
    }
}
