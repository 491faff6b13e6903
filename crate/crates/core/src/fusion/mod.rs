//! Tail-class synthesis: pair each tail vector with a confusable head
//! neighbour in sparse space, splice the two by their CAM masks, decode.

pub mod denoise;
pub mod smote;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use denoise::{denoise, DenoiseConfig, DenoiserKind, DenoiserRegistry};
pub use smote::{smote_augment, smote_oversample, SmoteSample};

use crate::cam::{class_cam, threshold_masks, BinaryMask, CamMode};
use crate::error::{Error, Result};
use crate::models::{Decoder, SparseLatent};
use crate::seed::{self, Tag};
use crate::store::{Dataset, LabelVector, PartitionSpec, Record, Split};
use crate::tensor::LatentTensor;
use crate::trainer::TrainedModels;

pub const METHOD: &str = "fusion";

/// Head class with the highest mean score over `scores`, one row per train
/// sample of tail class `t`. Ties go to the lowest class id.
pub fn select_confusion_head(
    scores: &[Vec<f64>],
    partition: &PartitionSpec,
    t: usize,
) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Invalid(format!("no samples of tail class {t}")));
    }
    let mut best: Option<(usize, f64)> = None;
    for &h in &partition.head {
        let mut sum = 0.0;
        for row in scores {
            sum += *row.get(h).ok_or_else(|| {
                Error::Shape(format!(
                    "score row of length {} has no class {h}",
                    row.len()
                ))
            })?;
        }
        let mean = sum / scores.len() as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((h, mean));
        }
    }
    best.map(|(h, _)| h)
        .ok_or_else(|| Error::Partition("no head classes".into()))
}

/// Index of one of the `k` Euclidean-nearest pool members, drawn uniformly.
/// Distance ties go to the lower index.
pub fn knn_neighbor(
    query: &LatentTensor,
    pool: &[&LatentTensor],
    k: usize,
    seed: u64,
) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Invalid("empty neighbour pool".into()));
    }
    if k < 1 {
        return Err(Error::Invalid("k-NN needs k >= 1".into()));
    }
    let mut d = Vec::with_capacity(pool.len());
    for (i, p) in pool.iter().enumerate() {
        p.check_dims(query.dims(), "k-NN pool")?;
        d.push((query.squared_distance(p), i));
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = k.min(pool.len());
    let pick = seed::rng(seed).random_range(0..k);
    Ok(d[pick].1)
}

/// Fair coin per spatial coordinate, row-major.
pub fn draw_random_mask(h: usize, w: usize, seed: u64) -> BinaryMask {
    let mut rng = seed::rng(seed);
    BinaryMask {
        h,
        w,
        data: (0..h * w).map(|_| rng.random_bool(0.5)).collect(),
    }
}

fn check_mask(m: &BinaryMask, h: usize, w: usize, name: &str) -> Result<()> {
    if m.h != h || m.w != w || m.data.len() != h * w {
        return Err(Error::Shape(format!(
            "{name} mask is {}x{}, expected {h}x{w}",
            m.h, m.w
        )));
    }
    Ok(())
}

/// Indicator weights `(tail-only, head-only, random)` of one coordinate:
/// `s(1-g)`, `g(1-s)` and `1-g-s+2gs`.
pub fn region_weights(specific: bool, generic: bool) -> (f64, f64, f64) {
    let s = if specific { 1.0 } else { 0.0 };
    let g = if generic { 1.0 } else { 0.0 };
    (s * (1.0 - g), g * (1.0 - s), 1.0 - g - s + 2.0 * g * s)
}

/// Mask-weighted splice with a given random mask. `1` in `random` selects
/// the tail vector.
pub fn fuse_with_mask(
    zt: &LatentTensor,
    zh: &LatentTensor,
    specific: &BinaryMask,
    generic: &BinaryMask,
    random: &BinaryMask,
) -> Result<LatentTensor> {
    let d = zt.dims();
    zh.check_dims(d, "head sparse vector")?;
    check_mask(specific, d.h, d.w, "specific")?;
    check_mask(generic, d.h, d.w, "generic")?;
    check_mask(random, d.h, d.w, "random")?;
    let mut out = Vec::with_capacity(d.len());
    for p in 0..d.spatial() {
        let (w_t, w_h, w_r) = region_weights(specific.data[p], generic.data[p]);
        let r = if random.data[p] { 1.0 } else { 0.0 };
        for k in 0..d.c {
            let t = zt.data()[p * d.c + k];
            let h = zh.data()[p * d.c + k];
            let zr = t * r + h * (1.0 - r);
            out.push(h * w_h + t * w_t + zr * w_r);
        }
    }
    LatentTensor::new(d, out)
}

/// Draws the random mask from `seed` and splices; returns the fused vector
/// and the mask used.
pub fn fuse_sparse(
    zt: &LatentTensor,
    zh: &LatentTensor,
    specific: &BinaryMask,
    generic: &BinaryMask,
    seed: u64,
) -> Result<(LatentTensor, BinaryMask)> {
    let d = zt.dims();
    let random = draw_random_mask(d.h, d.w, seed);
    let fused = fuse_with_mask(zt, zh, specific, generic, &random)?;
    Ok((fused, random))
}

pub fn decode_fused(zs: &LatentTensor, decoder: &Decoder) -> Result<LatentTensor> {
    decoder.forward(zs)
}

/// Fusion stage parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub tau_h: f64,
    pub tau_l: f64,
    pub k: usize,
    /// Train positives per tail class after augmentation.
    pub target_per_tail: usize,
    pub cam_mode: CamMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            tau_h: 0.4,
            tau_l: 0.4,
            k: 5,
            target_per_tail: 200,
            cam_mode: CamMode::ClassGated,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_h", self.tau_h), ("tau_l", self.tau_l)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!(
                    "fusion.{name}: {t} must lie in (0, 1)"
                )));
            }
        }
        if self.k < 1 {
            return Err(Error::Config("fusion.k: must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRecord {
    pub id: String,
    pub tail_id: String,
    pub head_id: String,
    pub tail_class: usize,
    pub head_class: usize,
    pub specific: BinaryMask,
    pub generic: BinaryMask,
    pub random: BinaryMask,
    pub seed: u64,
    pub fused_sparse: LatentTensor,
    pub fused: LatentTensor,
    pub denoise_steps: usize,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub dataset: Dataset,
    pub fusions: Vec<FusionRecord>,
}

/// Restricts a label vector to the classes in `keep`.
fn labels_in(y: &LabelVector, keep: &std::collections::BTreeSet<usize>) -> Vec<usize> {
    y.classes().filter(|c| keep.contains(c)).collect()
}

/// Adds fused records to every tail class until its train positive count
/// reaches `cfg.target_per_tail`. Tail records are used round-robin; the
/// replica index keeps repeated pairs on distinct seeds.
pub fn augment_tailset(
    dataset: &Dataset,
    partition: &PartitionSpec,
    models: &TrainedModels,
    cfg: &AugmentConfig,
    dcfg: &DenoiseConfig,
    registry: &DenoiserRegistry,
    seed: u64,
) -> Result<Augmented> {
    cfg.validate()?;
    dcfg.validate()?;
    partition.validate(dataset.num_classes())?;
    let d = dataset.dims();
    let steps = dcfg.effective_steps();

    let train = dataset.indices(Split::Train);
    let mut sparse: Vec<Option<LatentTensor>> = vec![None; dataset.tensors.len()];
    let encoded = train
        .par_iter()
        .map(|&i| {
            models
                .student
                .forward(&dataset.tensors[i])
                .map(SparseLatent::into_tensor)
        })
        .collect::<Result<Vec<_>>>()?;
    for (&i, z) in train.iter().zip(encoded) {
        sparse[i] = Some(z);
    }
    let sp = |i: usize| sparse[i].as_ref().expect("train record encoded");

    let mut out = dataset.clone();
    let mut fusions = Vec::new();
    for &t in &partition.tail {
        let have = out.manifest.train_positive_counts()[t];
        let need = cfg.target_per_tail.saturating_sub(have);
        if need == 0 {
            continue;
        }
        let tails: Vec<usize> = dataset
            .train_indices_with(t)
            .into_iter()
            .filter(|&i| !dataset.manifest.records[i].synthetic)
            .collect();
        let scores = tails
            .par_iter()
            .map(|&i| models.classifier.forward(sp(i)).map(|s| s.scores))
            .collect::<Result<Vec<_>>>()?;
        let h = select_confusion_head(&scores, partition, t)?;
        let heads: Vec<usize> = dataset
            .train_indices_with(h)
            .into_iter()
            .filter(|&i| !dataset.manifest.records[i].synthetic)
            .collect();
        let pool: Vec<&LatentTensor> = heads.iter().map(|&i| sp(i)).collect();
        log::info!("tail class {t}: confusion head {h}, {need} new records");

        let made = (0..need)
            .into_par_iter()
            .map(|n| {
                let ti = tails[n % tails.len()];
                let replica = (n / tails.len()) as u64;
                let tail = &dataset.manifest.records[ti];
                let knn_seed = seed::derive_seed(
                    seed,
                    &[Tag::Str("knn"), Tag::Str(&tail.id), Tag::Int(replica)],
                );
                let hi = heads[knn_neighbor(sp(ti), &pool, cfg.k, knn_seed)?];
                let head = &dataset.manifest.records[hi];
                let fuse_seed = seed::derive_seed(
                    seed,
                    &[Tag::Str(&tail.id), Tag::Str(&head.id), Tag::Int(replica)],
                );
                let tcam = class_cam(&models.classifier, sp(ti), t, cfg.cam_mode)?;
                let hcam = class_cam(&models.classifier, sp(hi), h, cfg.cam_mode)?;
                let specific = threshold_masks(&tcam, cfg.tau_h, cfg.tau_l)?.specific;
                let generic = threshold_masks(&hcam, cfg.tau_h, cfg.tau_l)?.generic;
                let (fused_sparse, random) =
                    fuse_sparse(sp(ti), sp(hi), &specific, &generic, fuse_seed)?;
                let decoded = decode_fused(&fused_sparse, &models.decoder)?;
                let fused = denoise(&decoded, dcfg, registry)?.round_to_f32();
                fused.check_dims(d, "fused record")?;
                if !fused.is_finite() {
                    return Err(Error::Numeric(format!(
                        "fused record from {} is not finite",
                        tail.id
                    )));
                }
                let mut classes = labels_in(&tail.labels, &partition.tail);
                classes.extend(labels_in(&head.labels, &partition.head));
                Ok(FusionRecord {
                    id: format!("aug_{t:02}_{n:04}"),
                    tail_id: tail.id.clone(),
                    head_id: head.id.clone(),
                    tail_class: t,
                    head_class: h,
                    specific,
                    generic,
                    random,
                    seed: fuse_seed,
                    fused_sparse,
                    fused,
                    denoise_steps: steps,
                })
                .map(|f| (f, classes))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut records = Vec::with_capacity(need);
        let mut tensors = Vec::with_capacity(need);
        for (f, classes) in made {
            let labels = LabelVector::from_classes(dataset.num_classes(), classes);
            let mut r = Record::real(f.id.clone(), labels, Split::Train);
            r.synthetic = true;
            r.method = Some(METHOD.into());
            r.tail_id = Some(f.tail_id.clone());
            r.head_id = Some(f.head_id.clone());
            r.seed = Some(f.seed);
            r.denoise_steps = Some(steps);
            records.push(r);
            tensors.push(f.fused.clone());
            fusions.push(f);
        }
        out = out.extend(records, tensors)?;
    }
    Ok(Augmented {
        dataset: out,
        fusions,
    })
}
