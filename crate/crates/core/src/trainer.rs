//! Iterated learning: each generation trains a fresh student to imitate
//! one-hot samples drawn from the previous student, then jointly fits
//! student, decoder and classifier on the λ-weighted reconstruction and
//! classification objective.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::mean_ap;
use crate::models::{
    sample_onehot_with, ArchDims, BinarySparse, Classifier, Decoder, ModelParams, SparseLatent,
    Student,
};
use crate::nn::{add_grads, scale_grads, Grads, Optimizer, OptimizerKind, Parameterized};
use crate::seed::{self, Tag};
use crate::store::{Dataset, LabelVector, PartitionSpec, Split};
use crate::tensor::LatentTensor;

pub const BCE_EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

fn bce(p: f64, t: f64) -> f64 {
    let p = clamp_prob(p);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// `d bce / dp`, zero where the clamp is active.
fn bce_grad(p: f64, t: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}

/// Mean binary cross-entropy between student probabilities and sampled
/// one-hot targets over every `(i, j, k)`.
pub fn imitation_loss(student_probs: &SparseLatent, target: &BinarySparse) -> Result<f64> {
    imitation_loss_grad(student_probs.tensor(), target).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the probabilities.
pub fn imitation_loss_grad(probs: &LatentTensor, target: &BinarySparse) -> Result<(f64, Vec<f64>)> {
    if probs.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "imitation: probs {} vs target {}",
            probs.dims(),
            target.dims()
        )));
    }
    let c = probs.dims().c;
    let n = probs.data().len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.data().len()];
    for (p, (px, &choice)) in probs
        .data()
        .chunks_exact(c)
        .zip(target.choices())
        .enumerate()
    {
        for (k, &v) in px.iter().enumerate() {
            let t = if k == choice { 1.0 } else { 0.0 };
            loss += bce(v, t);
            grad[p * c + k] = bce_grad(v, t) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(z: &LatentTensor, zhat: &LatentTensor) -> Result<f64> {
    reconstruction_loss_grad(z, zhat).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `zhat`.
pub fn reconstruction_loss_grad(z: &LatentTensor, zhat: &LatentTensor) -> Result<(f64, Vec<f64>)> {
    if z.dims() != zhat.dims() {
        return Err(Error::Shape(format!(
            "reconstruction: {} vs {}",
            z.dims(),
            zhat.dims()
        )));
    }
    let n = z.data().len() as f64;
    let mut loss = 0.0;
    let grad = z
        .data()
        .iter()
        .zip(zhat.data())
        .map(|(a, b)| {
            let d = b - a;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean over classes of the per-label binary cross-entropy.
pub fn classification_loss(y: &LabelVector, scores: &[f64]) -> Result<f64> {
    classification_loss_grad(y, scores).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the pre-sigmoid logits.
pub fn classification_loss_grad(y: &LabelVector, scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y.len() != scores.len() {
        return Err(Error::Shape(format!(
            "classification: {} labels vs {} scores",
            y.len(),
            scores.len()
        )));
    }
    let k = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&t, &s) in y.0.iter().zip(scores) {
        let t = t as f64;
        loss += bce(s, t);
        // d bce/ds * s (1 - s) simplifies to s - t inside the clamp window
        let g = if (BCE_EPS..=1.0 - BCE_EPS).contains(&s) {
            s - t
        } else {
            0.0
        };
        grad.push(g / k);
    }
    Ok((loss / k, grad))
}

/// `λ L_R + (1 − λ) L_C`.
pub fn interaction_objective(lambda: f64, l_r: f64, l_c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * l_r + (1.0 - lambda) * l_c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ILConfig {
    pub generations: usize,
    pub imitation_epochs: usize,
    pub interaction_epochs: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// `C'`, channels of the sparse space.
    pub sparse_channels: usize,
    pub hidden: usize,
    /// Temperature used when sampling one-hot imitation targets.
    pub temperature: f64,
}

impl Default for ILConfig {
    fn default() -> Self {
        ILConfig {
            generations: 3,
            imitation_epochs: 5,
            interaction_epochs: 10,
            lambda: 0.5,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            sparse_channels: 16,
            hidden: 16,
            temperature: 1.0,
        }
    }
}

impl ILConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("il.{key}: {msg}")));
        if self.generations < 1 {
            return bad("generations", "must be >= 1");
        }
        if self.imitation_epochs < 1 {
            return bad("imitation_epochs", "must be >= 1");
        }
        if self.interaction_epochs < 1 {
            return bad("interaction_epochs", "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if self.sparse_channels < 2 {
            return bad("sparse_channels", "must be >= 2");
        }
        if self.hidden < 1 {
            return bad("hidden", "must be >= 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Imitation,
    Interaction,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Imitation => "imitation",
            Phase::Interaction => "interaction",
        }
    }
}

/// Epoch-mean losses. Imitation rows carry only `imitation`; interaction
/// rows carry reconstruction and classification. `combined` is the
/// optimized objective of that phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub generation: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub imitation: Option<f64>,
    pub reconstruction: Option<f64>,
    pub classification: Option<f64>,
    pub combined: f64,
}

pub fn losses_to_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("generation,epoch,phase,L_I,L_R,L_C,combined\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.generation,
            r.epoch,
            r.phase.as_str(),
            opt(r.imitation),
            opt(r.reconstruction),
            opt(r.classification),
            r.combined
        );
    }
    out
}

/// Networks being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: Student,
    pub decoder: Decoder,
    pub classifier: Classifier,
}

impl TrainState {
    pub fn init(cfg: &ILConfig, h: usize, w: usize, c: usize, k: usize, seed: u64) -> Self {
        let (student_dims, decoder_dims, classifier_dims) = arch_dims(cfg, h, w, c, k);
        TrainState {
            student: Student::init(
                student_dims,
                &mut seed::sub_rng(seed, &[Tag::Str("student"), Tag::Int(0)]),
            ),
            decoder: Decoder::init(
                decoder_dims,
                &mut seed::sub_rng(seed, &[Tag::Str("decoder")]),
            ),
            classifier: Classifier::init(
                classifier_dims,
                &mut seed::sub_rng(seed, &[Tag::Str("classifier")]),
            ),
        }
    }
}

pub fn arch_dims(
    cfg: &ILConfig,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) -> (ArchDims, ArchDims, ArchDims) {
    let cs = cfg.sparse_channels;
    let a = |i, o| ArchDims {
        h,
        w,
        in_channels: i,
        hidden: cfg.hidden,
        out_channels: o,
    };
    (a(c, cs), a(cs, c), a(cs, k))
}

/// Borrowed `(z, y)` training pairs.
#[derive(Debug, Clone)]
pub struct TrainSet<'a> {
    pub items: Vec<(&'a LatentTensor, &'a LabelVector)>,
}

impl<'a> TrainSet<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        let items = ds
            .indices(Split::Train)
            .into_iter()
            .map(|i| (&ds.tensors[i], &ds.manifest.records[i].labels))
            .collect();
        TrainSet { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn epoch_order(n: usize, seed: u64, generation: usize, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::sub_rng(
        seed,
        &[
            Tag::Str("order"),
            Tag::Int(generation as u64),
            Tag::Str(phase.as_str()),
            Tag::Int(epoch as u64),
        ],
    );
    order.shuffle(&mut rng);
    order
}

fn check_finite(v: f64, what: &str, generation: usize, epoch: usize, phase: Phase) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "non-finite {what} ({v}) in generation {generation}, {} epoch {epoch}",
            phase.as_str()
        )))
    }
}

/// Gradients of the interaction objective for one sample, returned as
/// `(L_R, L_C, student, decoder, classifier)`.
pub fn interaction_sample_grads(
    state: &TrainState,
    z: &LatentTensor,
    y: &LabelVector,
    lambda: f64,
) -> Result<(f64, f64, Grads, Grads, Grads)> {
    let st = state.student.forward_traced(z)?;
    let dt = state.decoder.forward_traced(st.probs.tensor())?;
    let ct = state.classifier.forward_traced(st.probs.tensor())?;
    let (l_r, mut d_rec) = reconstruction_loss_grad(z, &dt.output)?;
    let (l_c, mut d_cls) = classification_loss_grad(y, &ct.output.scores)?;
    d_rec.iter_mut().for_each(|g| *g *= lambda);
    d_cls.iter_mut().for_each(|g| *g *= 1.0 - lambda);

    let mut g_d = state.decoder.zero_grads();
    let mut g_c = state.classifier.zero_grads();
    let mut g_s = state.student.zero_grads();
    let mut dp = state.decoder.backward(&dt, &d_rec, &mut g_d);
    let dp_c = state.classifier.backward(&ct, &d_cls, &mut g_c);
    for (a, b) in dp.iter_mut().zip(&dp_c) {
        *a += b;
    }
    state.student.backward(&st, &dp, &mut g_s);
    Ok((l_r, l_c, g_s, g_d, g_c))
}

/// Imitation loss and student gradients for one sample.
pub fn imitation_sample_grads(
    student: &Student,
    z: &LatentTensor,
    target: &BinarySparse,
) -> Result<(f64, Grads)> {
    let st = student.forward_traced(z)?;
    let (loss, dp) = imitation_loss_grad(st.probs.tensor(), target)?;
    let mut g = student.zero_grads();
    student.backward(&st, &dp, &mut g);
    Ok((loss, g))
}

fn imitation_phase(
    student: &mut Student,
    teacher: &Student,
    data: &TrainSet<'_>,
    cfg: &ILConfig,
    generation: usize,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    // the teacher is frozen, so its probabilities are fixed for the phase
    let teacher_probs = data
        .items
        .par_iter()
        .map(|(z, _)| teacher.forward(z))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut records = Vec::with_capacity(cfg.imitation_epochs);
    for epoch in 0..cfg.imitation_epochs {
        let order = epoch_order(data.len(), seed, generation, Phase::Imitation, epoch);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    // targets are resampled for every batch
                    let mut rng = seed::sub_rng(
                        seed,
                        &[
                            Tag::Str("onehot"),
                            Tag::Int(generation as u64),
                            Tag::Int(epoch as u64),
                            Tag::Int(b as u64),
                            Tag::Int(slot as u64),
                        ],
                    );
                    let target = sample_onehot_with(&teacher_probs[idx], cfg.temperature, &mut rng);
                    imitation_sample_grads(student, data.items[idx].0, &target)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = student.zero_grads();
            for (loss, g) in &results {
                total += loss;
                add_grads(&mut grads, g);
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(student.params_mut(), &grads)?;
        }
        let mean = total / data.len() as f64;
        check_finite(mean, "imitation loss", generation, epoch, Phase::Imitation)?;
        log::debug!("gen {generation} imitation epoch {epoch}: L_I = {mean:.6}");
        records.push(LossRecord {
            generation,
            epoch,
            phase: Phase::Imitation,
            imitation: Some(mean),
            reconstruction: None,
            classification: None,
            combined: mean,
        });
    }
    Ok(records)
}

fn interaction_phase(
    state: &mut TrainState,
    data: &TrainSet<'_>,
    cfg: &ILConfig,
    generation: usize,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    let mut opt_s = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut opt_d = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut opt_c = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut records = Vec::with_capacity(cfg.interaction_epochs);
    for epoch in 0..cfg.interaction_epochs {
        let order = epoch_order(data.len(), seed, generation, Phase::Interaction, epoch);
        let (mut sum_r, mut sum_c) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &*state;
            let results = batch
                .par_iter()
                .map(|&idx| {
                    let (z, y) = data.items[idx];
                    interaction_sample_grads(snapshot, z, y, cfg.lambda)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g_s = state.student.zero_grads();
            let mut g_d = state.decoder.zero_grads();
            let mut g_c = state.classifier.zero_grads();
            for (l_r, l_c, s, d, c) in &results {
                sum_r += l_r;
                sum_c += l_c;
                add_grads(&mut g_s, s);
                add_grads(&mut g_d, d);
                add_grads(&mut g_c, c);
            }
            let inv = 1.0 / batch.len() as f64;
            scale_grads(&mut g_s, inv);
            scale_grads(&mut g_d, inv);
            scale_grads(&mut g_c, inv);
            opt_s.step(state.student.params_mut(), &g_s)?;
            opt_d.step(state.decoder.params_mut(), &g_d)?;
            opt_c.step(state.classifier.params_mut(), &g_c)?;
        }
        let n = data.len() as f64;
        let (l_r, l_c) = (sum_r / n, sum_c / n);
        let combined = interaction_objective(cfg.lambda, l_r, l_c)?;
        check_finite(
            combined,
            "interaction objective",
            generation,
            epoch,
            Phase::Interaction,
        )?;
        log::debug!("gen {generation} interaction epoch {epoch}: L_R = {l_r:.6}, L_C = {l_c:.6}");
        records.push(LossRecord {
            generation,
            epoch,
            phase: Phase::Interaction,
            imitation: None,
            reconstruction: Some(l_r),
            classification: Some(l_c),
            combined,
        });
    }
    Ok(records)
}

/// One generation. For `generation > 0` the incoming student becomes the
/// frozen teacher and a freshly initialized student imitates it before the
/// interaction phase; generation 0 has no teacher and skips imitation.
pub fn run_generation(
    state: TrainState,
    data: &TrainSet<'_>,
    cfg: &ILConfig,
    generation: usize,
    seed: u64,
) -> Result<(TrainState, Vec<LossRecord>)> {
    if data.is_empty() {
        return Err(Error::Training("empty train set".into()));
    }
    let TrainState {
        student,
        decoder,
        classifier,
    } = state;
    let mut records = Vec::new();
    let student = if generation == 0 {
        student
    } else {
        let teacher = student;
        let mut fresh = Student::init(
            teacher.arch_dims(),
            &mut seed::sub_rng(seed, &[Tag::Str("student"), Tag::Int(generation as u64)]),
        );
        records.extend(imitation_phase(
            &mut fresh, &teacher, data, cfg, generation, seed,
        )?);
        fresh
    };
    let mut state = TrainState {
        student,
        decoder,
        classifier,
    };
    records.extend(interaction_phase(&mut state, data, cfg, generation, seed)?);
    Ok((state, records))
}

/// Snapshot of the three networks at the end of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCheckpoint {
    pub generation: usize,
    pub student: ModelParams,
    pub decoder: ModelParams,
    pub classifier: ModelParams,
}

/// Output of iterated training.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSet {
    pub config: ILConfig,
    pub generations: Vec<GenerationCheckpoint>,
    pub losses: Vec<LossRecord>,
}

/// Typed networks restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub student: Student,
    pub decoder: Decoder,
    pub classifier: Classifier,
}

impl CheckpointSet {
    pub fn final_models(&self) -> Result<TrainedModels> {
        let last = self
            .generations
            .last()
            .ok_or_else(|| Error::Invalid("empty checkpoint set".into()))?;
        Ok(TrainedModels {
            student: Student::from_params(&last.student)?,
            decoder: Decoder::from_params(&last.decoder)?,
            classifier: Classifier::from_params(&last.classifier)?,
        })
    }

    pub fn losses_for(&self, generation: usize, phase: Phase) -> Vec<&LossRecord> {
        self.losses
            .iter()
            .filter(|r| r.generation == generation && r.phase == phase)
            .collect()
    }
}

/// Runs `cfg.generations` generations over the train split.
pub fn run_il(
    cfg: &ILConfig,
    dataset: &Dataset,
    partition: &PartitionSpec,
) -> Result<CheckpointSet> {
    cfg.validate()?;
    partition.validate(dataset.num_classes())?;
    let data = TrainSet::from_dataset(dataset);
    let d = dataset.dims();
    let mut state = TrainState::init(cfg, d.h, d.w, d.c, dataset.num_classes(), cfg.seed);
    let mut generations = Vec::with_capacity(cfg.generations);
    let mut losses = Vec::new();
    for g in 0..cfg.generations {
        let (next, records) = run_generation(state, &data, cfg, g, cfg.seed)?;
        state = next;
        if let Some(last) = records.last() {
            log::info!(
                "generation {g} done: L_R = {:?}, L_C = {:?}",
                last.reconstruction,
                last.classification
            );
        }
        losses.extend(records);
        generations.push(GenerationCheckpoint {
            generation: g,
            student: state.student.to_params(),
            decoder: state.decoder.to_params(),
            classifier: state.classifier.to_params(),
        });
    }
    if log::log_enabled!(log::Level::Info) {
        let eval = evaluate_on(&state, &data)?;
        let head: Vec<usize> = partition.head.iter().copied().collect();
        let tail: Vec<usize> = partition.tail.iter().copied().collect();
        log::info!(
            "train: MSE = {:.5}, head mAP = {:.4}, tail mAP = {:.4}",
            eval.reconstruction_mse,
            mean_ap(&eval.scores, &eval.labels, &head).unwrap_or(f64::NAN),
            mean_ap(&eval.scores, &eval.labels, &tail).unwrap_or(f64::NAN),
        );
    }
    Ok(CheckpointSet {
        config: cfg.clone(),
        generations,
        losses,
    })
}

/// Scores and reconstruction error of the current networks on a set.
#[derive(Debug, Clone)]
pub struct StateEval {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
    pub reconstruction_mse: f64,
}

pub fn evaluate_on(state: &TrainState, data: &TrainSet<'_>) -> Result<StateEval> {
    let rows = data
        .items
        .par_iter()
        .map(|(z, y)| {
            let p = state.student.forward(z)?;
            let zhat = state.decoder.forward(p.tensor())?;
            let s = state.classifier.forward(p.tensor())?;
            Ok((s.scores, y.0.clone(), reconstruction_loss(z, &zhat)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut mse = 0.0;
    for (s, y, m) in rows {
        scores.push(s);
        labels.push(y);
        mse += m;
    }
    Ok(StateEval {
        scores,
        labels,
        reconstruction_mse: mse / n,
    })
}

pub fn write_losses_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, losses_to_csv(records)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::channelwise_softmax;
    use crate::tensor::Dims;

    #[test]
    fn imitation_perfect_and_uniform() {
        let dims = Dims::new(2, 2, 4);
        let target = BinarySparse::new(dims, vec![0, 1, 2, 3]).unwrap();
        let perfect = SparseLatent::new(target.to_dense()).unwrap();
        assert!(imitation_loss(&perfect, &target).unwrap() <= 1e-5);

        let half = LatentTensor::new(dims, vec![0.5; 16]).unwrap();
        let (l, _) = imitation_loss_grad(&half, &target).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let uniform = channelwise_softmax(&LatentTensor::zeros(dims)).unwrap();
        let a = imitation_loss(&uniform, &target).unwrap();
        let other = BinarySparse::new(dims, vec![3, 3, 0, 1]).unwrap();
        let b = imitation_loss(&uniform, &other).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn imitation_shape_mismatch() {
        let t = BinarySparse::new(Dims::new(1, 1, 3), vec![0]).unwrap();
        let p = LatentTensor::zeros(Dims::new(1, 1, 4));
        assert!(matches!(imitation_loss_grad(&p, &t), Err(Error::Shape(_))));
    }

    #[test]
    fn reconstruction_cases() {
        let d = Dims::new(1, 1, 2);
        let z = LatentTensor::new(d, vec![0.0, 2.0]).unwrap();
        let zh = LatentTensor::new(d, vec![1.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&z, &z).unwrap(), 0.0);
        assert!((reconstruction_loss(&z, &zh).unwrap() - 2.5).abs() < 1e-15);
        let zeros = LatentTensor::zeros(Dims::new(2, 2, 2));
        let ones = LatentTensor::new(Dims::new(2, 2, 2), vec![1.0; 8]).unwrap();
        assert_eq!(reconstruction_loss(&zeros, &ones).unwrap(), 1.0);
        assert!(reconstruction_loss(&z, &zeros).is_err());
    }

    #[test]
    fn classification_cases() {
        let y = LabelVector(vec![1, 0, 1, 0]);
        assert!(classification_loss(&y, &[1.0, 0.0, 1.0, 0.0]).unwrap() <= 1e-5);
        let l = classification_loss(&y, &[0.5; 4]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let s = [0.9, 0.3, 0.2, 0.6];
        let base = classification_loss(&y, &s).unwrap();
        let perm = [2, 0, 3, 1];
        let yp = LabelVector(perm.iter().map(|&i| y.0[i]).collect());
        let sp: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        assert!((classification_loss(&yp, &sp).unwrap() - base).abs() < 1e-15);
        assert!(classification_loss(&y, &[0.5; 3]).is_err());
    }

    #[test]
    fn objective_cases() {
        assert_eq!(interaction_objective(1.0, 2.0, 4.0).unwrap(), 2.0);
        assert_eq!(interaction_objective(0.0, 2.0, 4.0).unwrap(), 4.0);
        assert_eq!(interaction_objective(0.5, 2.0, 4.0).unwrap(), 3.0);
        assert!(interaction_objective(1.5, 2.0, 4.0).is_err());
        assert!(interaction_objective(-0.1, 2.0, 4.0).is_err());
    }

    #[test]
    fn losses_non_negative() {
        let mut rng = seed::rng(12);
        for _ in 0..200 {
            let s: Vec<f64> = (0..5).map(|_| rand::Rng::random(&mut rng)).collect();
            let y = LabelVector(
                (0..5)
                    .map(|_| rand::Rng::random_range(&mut rng, 0..2u8))
                    .collect(),
            );
            assert!(classification_loss(&y, &s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn imitation_leaves_teacher_untouched() {
        let cfg = ILConfig {
            sparse_channels: 4,
            hidden: 4,
            imitation_epochs: 2,
            batch_size: 4,
            ..ILConfig::default()
        };
        let dims = Dims::new(4, 4, 2);
        let mut rng = seed::rng(5);
        let zs: Vec<LatentTensor> = (0..6)
            .map(|_| {
                LatentTensor::from_fn(dims, |_, _, _| rand::Rng::random_range(&mut rng, -1.0..1.0))
            })
            .collect();
        let ys: Vec<LabelVector> = (0..6)
            .map(|i| LabelVector::from_classes(2, [i % 2]))
            .collect();
        let data = TrainSet {
            items: zs.iter().zip(&ys).collect(),
        };
        let state = TrainState::init(&cfg, 4, 4, 2, 2, 1);
        let teacher = state.student.clone();
        let before = teacher.clone();
        let mut fresh = Student::init(teacher.arch_dims(), &mut seed::rng(9));
        let start = fresh.clone();
        imitation_phase(&mut fresh, &teacher, &data, &cfg, 1, 3).unwrap();
        assert_eq!(teacher, before);
        assert_ne!(fresh, start);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            LossRecord {
                generation: 1,
                epoch: 0,
                phase: Phase::Imitation,
                imitation: Some(0.25),
                reconstruction: None,
                classification: None,
                combined: 0.25,
            },
            LossRecord {
                generation: 1,
                epoch: 0,
                phase: Phase::Interaction,
                imitation: None,
                reconstruction: Some(0.5),
                classification: Some(1.5),
                combined: 1.0,
            },
        ];
        assert_eq!(
            losses_to_csv(&rows),
            "generation,epoch,phase,L_I,L_R,L_C,combined\n\
             1,0,imitation,0.25,,,0.25\n\
             1,0,interaction,,0.5,1.5,1\n"
        );
    }

    #[test]
    fn config_validation() {
        assert!(ILConfig::default().validate().is_ok());
        let bad = ILConfig {
            lambda: 1.2,
            ..ILConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("il.lambda"), "{err}");
        let bad = ILConfig {
            generations: 0,
            ..ILConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
