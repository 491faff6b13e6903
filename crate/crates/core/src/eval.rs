//! Evaluation: Fréchet distance between Gaussian feature fits, multilabel
//! mean average precision, sparsity diagnostics and the downstream
//! classifier harness that produces one report row per augmentation method.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArchDims, Classifier, SparseLatent};
use crate::nn::{add_grads, scale_grads, Optimizer, OptimizerKind, Parameterized};
use crate::seed::{self, Tag};
use crate::store::{Dataset, LabelVector, PartitionSpec, Split};
use crate::tensor::LatentTensor;
use crate::trainer::classification_loss_grad;

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.cov.nrows() != n || self.cov.ncols() != n {
            return Err(Error::Shape(format!(
                "covariance {}x{} for mean of length {n}",
                self.cov.nrows(),
                self.cov.ncols()
            )));
        }
        if self
            .mean
            .iter()
            .chain(self.cov.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite Gaussian statistics".into()));
        }
        let asym = (&self.cov - self.cov.transpose()).amax();
        if asym > 1e-8 {
            return Err(Error::Numeric(format!("covariance asymmetric by {asym}")));
        }
        Ok(())
    }
}

pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "Gaussian statistics need at least 2 samples, got {n}"
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature vectors of differing length".into()));
    }
    let mut mean = DVector::zeros(dim);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let d = DVector::from_column_slice(f) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    // exact symmetry regardless of summation rounding
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussStats { mean, cov })
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the cross term taken
/// through the symmetric product `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &GaussStats, b: &GaussStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "Fréchet distance between dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = psd_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let fd = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Average precision of one ranking: precision at each positive, averaged.
/// Ties in score are broken by ascending record index. `None` when there are
/// no positives.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over `class_set` of per-class AP; classes without positives are
/// skipped.
pub fn mean_ap(scores: &[Vec<f64>], labels: &[Vec<u8>], class_set: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows vs {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    if class_set.is_empty() {
        return Err(Error::Invalid("empty class set".into()));
    }
    let k = scores.first().map(|r| r.len()).unwrap_or(0);
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("ragged score or label matrix".into()));
    }
    let mut aps = Vec::new();
    for &c in class_set {
        if c >= k {
            return Err(Error::Invalid(format!("class {c} out of range {k}")));
        }
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let rel: Vec<bool> = labels.iter().map(|r| r[c] == 1).collect();
        if let Some(ap) = average_precision(&col, &rel) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class in the set has a positive example".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Mean per-coordinate entropy in nats.
    pub mean_entropy: f64,
    /// Mean over coordinates of `exp(entropy)`.
    pub mean_effective_channels: f64,
}

pub fn sparsity_report(set: &[SparseLatent]) -> SparsityReport {
    let mut entropy = 0.0;
    let mut effective = 0.0;
    let mut n = 0usize;
    for s in set {
        let c = s.dims().c;
        for px in s.tensor().data().chunks_exact(c) {
            let h: f64 = px
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
                .max(0.0);
            entropy += h;
            effective += h.exp();
            n += 1;
        }
    }
    if n == 0 {
        return SparsityReport {
            mean_entropy: 0.0,
            mean_effective_channels: 0.0,
        };
    }
    SparsityReport {
        mean_entropy: entropy / n as f64,
        mean_effective_channels: effective / n as f64,
    }
}

/// Settings of the downstream evaluation classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hidden: 16,
            epochs: 15,
            learning_rate: 1e-2,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("eval.{key}: {msg}")));
        if self.hidden < 1 {
            return bad("hidden", "must be >= 1");
        }
        if self.epochs < 1 {
            return bad("epochs", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        Ok(())
    }
}

/// Trains a fresh multilabel classifier directly on base latents.
pub fn train_eval_classifier(
    items: &[(&LatentTensor, &LabelVector)],
    num_classes: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Classifier> {
    cfg.validate()?;
    let first = items
        .first()
        .ok_or_else(|| Error::Invalid("no training records".into()))?;
    let d = first.0.dims();
    let dims = ArchDims {
        h: d.h,
        w: d.w,
        in_channels: d.c,
        hidden: cfg.hidden,
        out_channels: num_classes,
    };
    let mut clf = Classifier::init(dims, &mut seed::sub_rng(seed, &[Tag::Str("eval-init")]));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seed::sub_rng(
            seed,
            &[Tag::Str("eval-order"), Tag::Int(epoch as u64)],
        ));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model = &clf;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let (z, y) = items[i];
                    let trace = model.forward_traced(z)?;
                    let (loss, dlogits) = classification_loss_grad(y, &trace.output.scores)?;
                    let mut g = model.zero_grads();
                    model.backward(&trace, &dlogits, &mut g);
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = clf.zero_grads();
            for (loss, g) in &results {
                total += loss;
                add_grads(&mut grads, g);
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(clf.params_mut(), &grads)?;
        }
        let mean = total / items.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!(
                "evaluation classifier diverged at epoch {epoch} (loss {mean})"
            )));
        }
        log::debug!("eval classifier epoch {epoch}: loss {mean:.5}");
    }
    Ok(clf)
}

/// Pooled last-convolution activations used as Fréchet features.
pub fn pooled_features(extractor: &Classifier, set: &[&LatentTensor]) -> Result<Vec<Vec<f64>>> {
    set.par_iter()
        .map(|z| Ok(extractor.forward(z)?.pooled()))
        .collect()
}

/// Per-tail-class Fréchet distance between real and synthetic features,
/// averaged over the classes that have at least two samples on both sides.
pub fn avg_tail_frechet(
    extractor: &Classifier,
    real: &[Vec<&LatentTensor>],
    synthetic: &[Vec<&LatentTensor>],
) -> Result<Option<f64>> {
    let mut dists = Vec::new();
    for (r, s) in real.iter().zip(synthetic) {
        if r.len() < 2 || s.len() < 2 {
            continue;
        }
        let a = gaussian_stats(&pooled_features(extractor, r)?)?;
        let b = gaussian_stats(&pooled_features(extractor, s)?)?;
        dists.push(frechet_distance(&a, &b)?);
    }
    Ok((!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub avg_tail_fd: Option<f64>,
    pub head_map: f64,
    pub tail_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,avg_tail_fd,head_map,tail_map\n");
        for r in &self.rows {
            let fd = r
                .avg_tail_fd
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{},{},{},{}", r.method, fd, r.head_map, r.tail_map);
        }
        out
    }

    /// Fixed-width rendering in the layout of the comparison table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>14} {:>10} {:>10}\n",
            "Model", "Avg Tail FD", "Head mAP", "Tail mAP"
        );
        for r in &self.rows {
            let fd = r
                .avg_tail_fd
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<12} {:>14} {:>10.3} {:>10.3}",
                r.method, fd, r.head_map, r.tail_map
            );
        }
        out
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: json_path.to_path_buf(),
            source: e,
        })?;
        fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))?;
        let csv_path = csv_path.as_ref();
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Result of one downstream evaluation.
#[derive(Debug, Clone)]
pub struct DownstreamResult {
    pub row: EvalRow,
    pub classifier: Classifier,
}

/// Trains a fresh classifier on the train split of `train` (synthetic
/// records included) and reports head/tail mAP on the test split of `test`.
///
/// The Fréchet column compares, per tail class, real test records against
/// synthetic train records in the feature space of `feature_extractor`, or
/// of the freshly trained classifier when none is given. It is `None` when
/// the train set has no synthetic records.
pub fn downstream_eval(
    method: &str,
    train: &Dataset,
    test: &Dataset,
    partition: &PartitionSpec,
    cfg: &EvalConfig,
    seed: u64,
    feature_extractor: Option<&Classifier>,
) -> Result<DownstreamResult> {
    let k = train.num_classes();
    partition.validate(k)?;
    let items: Vec<(&LatentTensor, &LabelVector)> = train
        .indices(Split::Train)
        .into_iter()
        .map(|i| (&train.tensors[i], &train.manifest.records[i].labels))
        .collect();
    let clf = train_eval_classifier(&items, k, cfg, seed)?;

    let test_idx = test.indices(Split::Test);
    let test_set: Vec<&LatentTensor> = test_idx.iter().map(|&i| &test.tensors[i]).collect();
    let scores: Vec<Vec<f64>> = test_set
        .par_iter()
        .map(|z| Ok(clf.forward(z)?.scores))
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<u8>> = test_idx
        .iter()
        .map(|&i| test.manifest.records[i].labels.0.clone())
        .collect();
    let head: Vec<usize> = partition.head.iter().copied().collect();
    let tail: Vec<usize> = partition.tail.iter().copied().collect();
    let head_map = mean_ap(&scores, &labels, &head)?;
    let tail_map = mean_ap(&scores, &labels, &tail)?;

    let mut real = Vec::new();
    let mut synth = Vec::new();
    for &t in &tail {
        real.push(
            test_idx
                .iter()
                .filter(|&&i| {
                    let r = &test.manifest.records[i];
                    !r.synthetic && r.labels.has(t)
                })
                .map(|&i| &test.tensors[i])
                .collect::<Vec<_>>(),
        );
        synth.push(
            train
                .indices(Split::Train)
                .into_iter()
                .filter(|&i| {
                    let r = &train.manifest.records[i];
                    r.synthetic && r.labels.has(t)
                })
                .map(|i| &train.tensors[i])
                .collect::<Vec<_>>(),
        );
    }
    let avg_tail_fd = avg_tail_frechet(feature_extractor.unwrap_or(&clf), &real, &synth)?;
    log::info!("{method}: head mAP {head_map:.4}, tail mAP {tail_map:.4}, tail FD {avg_tail_fd:?}");
    Ok(DownstreamResult {
        row: EvalRow {
            method: method.to_string(),
            avg_tail_fd,
            head_map,
            tail_map,
        },
        classifier: clf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::channelwise_softmax;
    use crate::tensor::Dims;
    use rand::Rng as _;

    #[test]
    fn two_point_stats() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
    }

    #[test]
    fn identical_samples_have_zero_covariance() {
        let s = gaussian_stats(&vec![vec![1.5, -2.0, 3.0]; 5]).unwrap();
        assert!(s.cov.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn stats_are_order_invariant() {
        let mut rng = seed::rng(3);
        let mut f: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a = gaussian_stats(&f).unwrap();
        f.reverse();
        let b = gaussian_stats(&f).unwrap();
        assert!((a.mean - b.mean).amax() < 1e-12);
        assert!((a.cov - b.cov).amax() < 1e-12);
    }

    #[test]
    fn frechet_closed_forms() {
        let n = 8;
        let mu = DVector::from_fn(n, |i, _| 0.3 * i as f64 - 1.0);
        let id = GaussStats {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        };
        let shifted = GaussStats {
            mean: mu.clone(),
            cov: DMatrix::identity(n, n),
        };
        assert!(frechet_distance(&id, &id).unwrap() <= 1e-6);
        let fd = frechet_distance(&id, &shifted).unwrap();
        assert!((fd - mu.norm_squared()).abs() <= 1e-6);

        let (s1, s2) = (0.7, 2.3);
        let a = GaussStats {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n) * (s1 * s1),
        };
        let b = GaussStats {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n) * (s2 * s2),
        };
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - n as f64 * (s1 - s2) * (s1 - s2)).abs() <= 1e-6);

        let wrong = GaussStats {
            mean: DVector::zeros(3),
            cov: DMatrix::identity(3, 3),
        };
        assert!(matches!(frechet_distance(&a, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_computed_ap() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn ties_break_by_record_index() {
        // equal scores: record 0 ranks before record 1
        let a = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
        let b = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(a, 1.0);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn map_skips_classes_without_positives() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let labels = vec![vec![1, 0], vec![0, 0]];
        assert_eq!(mean_ap(&scores, &labels, &[0, 1]).unwrap(), 1.0);
        assert!(matches!(
            mean_ap(&scores, &labels, &[1]),
            Err(Error::UndefinedMetric(_))
        ));
        let perfect = mean_ap(&scores, &[vec![1, 0], vec![0, 1]], &[0, 1]).unwrap();
        assert_eq!(perfect, 1.0);
    }

    #[test]
    fn sparsity_bounds() {
        let dims = Dims::new(2, 2, 16);
        let uniform = channelwise_softmax(&LatentTensor::zeros(dims)).unwrap();
        let mut logits = LatentTensor::zeros(dims);
        for i in 0..2 {
            for j in 0..2 {
                logits.pixel_mut(i, j)[3] = 1e4;
            }
        }
        let onehot = channelwise_softmax(&logits).unwrap();
        let r = sparsity_report(std::slice::from_ref(&onehot));
        assert!(r.mean_entropy.abs() < 1e-12);
        assert!((r.mean_effective_channels - 1.0).abs() < 1e-12);
        let r = sparsity_report(std::slice::from_ref(&uniform));
        assert!((r.mean_entropy - 16f64.ln()).abs() < 1e-12);
        assert!((r.mean_effective_channels - 16.0).abs() < 1e-9);
        let r = sparsity_report(&[onehot, uniform]);
        assert!((r.mean_entropy - 16f64.ln() / 2.0).abs() < 1e-12);
        assert!((r.mean_effective_channels - 8.5).abs() < 1e-9);
    }

    #[test]
    fn report_csv_layout() {
        let report = EvalReport {
            rows: vec![
                EvalRow {
                    method: "baseline".into(),
                    avg_tail_fd: None,
                    head_map: 0.5,
                    tail_map: 0.25,
                },
                EvalRow {
                    method: "ours@5".into(),
                    avg_tail_fd: Some(1.5),
                    head_map: 0.75,
                    tail_map: 0.125,
                },
            ],
            config: serde_json::Value::Null,
            seed: 1,
        };
        assert_eq!(
            report.to_csv(),
            "method,avg_tail_fd,head_map,tail_map\nbaseline,-,0.5,0.25\nours@5,1.5,0.75,0.125\n"
        );
        let json = serde_json::to_value(&report).unwrap();
        let row = json["rows"][0].as_object().unwrap();
        for key in ["method", "avg_tail_fd", "head_map", "tail_map"] {
            assert!(row.contains_key(key));
        }
    }
}
