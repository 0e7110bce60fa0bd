//! Accuracy, average precision, multi-dataset reports and the block
//! importance histogram.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, perturb, preprocess_eval, PerturbConfig, PerturbKind};
use crate::head::{HeadConfig, HeadParams};
use crate::pipeline::{encode_dataset, score};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::vit::Backbone;
use crate::{Error, Result};

/// Decision threshold on probabilities; a score of exactly 0.5 is a
/// positive (fake) prediction.
pub const THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Metric("empty input".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Param(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Fraction of samples where `score ≥ 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| u8::from(s >= THRESHOLD) == y)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Step-wise (non-interpolated) average precision: rank by score descending,
/// ties kept in original index order, and sum `ΔR_k · P_k` over the ranks of
/// the positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Metric("average precision needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // each positive raises recall by 1/P, so AP = (Σ precision at positives) / P
    let (mut tp, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// For each block `l`, the fraction of feature columns whose importance is
/// maximal at `l`. Ties go to the smallest block index.
pub fn importance_frequency<T: Scalar>(a: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(importance_counts(a)?
        .iter()
        .map(|&c| c as f64 / a.last_dim() as f64)
        .collect())
}

/// Integer version of [`importance_frequency`]; sums to `d′`.
pub fn importance_counts<T: Scalar>(a: &Tensor<T>) -> Result<Vec<usize>> {
    let [n, dp] = a.shape() else {
        return Err(Error::Shape(format!("importance must be n×d′, got {:?}", a.shape())));
    };
    let mut counts = vec![0usize; *n];
    for k in 0..*dp {
        let mut best = 0;
        for l in 1..*n {
            if a.row(l)[k] > a.row(best)[k] {
                best = l;
            }
        }
        counts[best] += 1;
    }
    Ok(counts)
}

/// Writes `block,frequency` rows with 1-based block numbers.
pub fn write_importance_csv(freq: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "frequency"])?;
    for (l, f) in freq.iter().enumerate() {
        w.write_record([(l + 1).to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub name: String,
    pub n: usize,
    pub acc: f64,
    pub ap: f64,
    /// Undecodable images skipped while loading.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFailure {
    pub name: String,
    pub error: String,
}

/// Per-dataset metrics plus their unweighted average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetMetrics>,
    pub failures: Vec<DatasetFailure>,
    pub avg_acc: Option<f64>,
    pub avg_ap: Option<f64>,
}

impl EvalReport {
    pub fn from_results(results: Vec<(String, Result<DatasetMetrics>)>) -> Self {
        let mut datasets = Vec::new();
        let mut failures = Vec::new();
        for (name, r) in results {
            match r {
                Ok(m) => datasets.push(m),
                Err(e) => {
                    log::warn!("dataset `{name}` failed: {e}");
                    failures.push(DatasetFailure {
                        name,
                        error: e.to_string(),
                    })
                }
            }
        }
        if !failures.is_empty() && !datasets.is_empty() {
            log::warn!("average covers {} of {} datasets", datasets.len(), datasets.len() + failures.len());
        }
        let mean = |f: fn(&DatasetMetrics) -> f64| {
            (!datasets.is_empty()).then(|| datasets.iter().map(f).sum::<f64>() / datasets.len() as f64)
        };
        let (avg_acc, avg_ap) = (mean(|m| m.acc), mean(|m| m.ap));
        Self {
            datasets,
            failures,
            avg_acc,
            avg_ap,
        }
    }

    /// True when every dataset was evaluated and no image was skipped.
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty() && self.datasets.iter().all(|d| d.skipped == 0)
    }

    /// `dataset,n,acc,ap` rows followed by an `AVG` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "n", "acc", "ap"])?;
        for d in &self.datasets {
            w.write_record([d.name.clone(), d.n.to_string(), d.acc.to_string(), d.ap.to_string()])?;
        }
        if let (Some(acc), Some(ap)) = (self.avg_acc, self.avg_ap) {
            let n: usize = self.datasets.iter().map(|d| d.n).sum();
            w.write_record(["AVG".to_string(), n.to_string(), acc.to_string(), ap.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `{stem}.csv` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        Ok(())
    }
}

/// Optional evaluation-time perturbation; each sample's draw is keyed by
/// `seed` and the sample id.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub config: PerturbConfig,
    pub seed: u64,
}

/// Metrics for one dataset directory.
pub fn evaluate_dir(
    params: &HeadParams,
    config: &HeadConfig,
    backbone: &Backbone,
    name: &str,
    dir: &Path,
    perturbation: Option<&Perturbation>,
) -> Result<DatasetMetrics> {
    let dataset = load_dataset(dir)?;
    let side = backbone.config.image_side;
    let encoded = encode_dataset(backbone, &dataset, |s| match perturbation {
        Some(p) => {
            let mut rng = Rng::new(p.seed).derive(&s.id);
            preprocess_eval(&perturb(s, p.kind, &p.config, side, &mut rng)?, side)
        }
        None => preprocess_eval(s, side),
    })?;
    let scores = score(params, config, &encoded.k)?;
    Ok(DatasetMetrics {
        name: name.to_string(),
        n: encoded.len(),
        acc: accuracy(&scores, &encoded.labels)?,
        ap: average_precision(&scores, &encoded.labels)?,
        skipped: encoded.skipped,
    })
}

/// Evaluates every `(name, dir)` pair; failures are recorded, not fatal.
pub fn evaluate(
    params: &HeadParams,
    config: &HeadConfig,
    backbone: &Backbone,
    dirs: &[(String, PathBuf)],
    perturbation: Option<&Perturbation>,
) -> EvalReport {
    EvalReport::from_results(
        dirs.iter()
            .map(|(name, dir)| (name.clone(), evaluate_dir(params, config, backbone, name, dir, perturbation)))
            .collect(),
    )
}
