//! SMOTE baseline: interpolate between a random pool member and one of its
//! k nearest same-class neighbours.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::{self, Tag};
use crate::store::{Dataset, LabelVector, PartitionSpec, Record, Split};
use crate::tensor::LatentTensor;

pub const METHOD: &str = "smote";

#[derive(Debug, Clone, PartialEq)]
pub struct SmoteSample {
    pub tensor: LatentTensor,
    /// Pool index of the base point `x`.
    pub base: usize,
    /// Pool index of the neighbour `x_nn`.
    pub neighbor: usize,
    pub u: f64,
}

/// Indices of the `k` nearest pool members to `pool[i]`, excluding `i`,
/// ordered by distance then index.
fn nearest_others(pool: &[&LatentTensor], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, p)| (pool[i].squared_distance(p), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, j)| j).collect()
}

pub fn smote_oversample(
    pool: &[&LatentTensor],
    n_new: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<SmoteSample>> {
    if pool.len() < 2 {
        return Err(Error::Invalid(format!(
            "SMOTE needs a pool of at least 2, got {}",
            pool.len()
        )));
    }
    if k < 1 {
        return Err(Error::Invalid("SMOTE needs k >= 1".into()));
    }
    let dims = pool[0].dims();
    for p in pool {
        p.check_dims(dims, "SMOTE pool")?;
    }
    let mut rng = seed::rng(seed);
    let mut neighbours: Vec<Option<Vec<usize>>> = vec![None; pool.len()];
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let base = rng.random_range(0..pool.len());
        let nn = neighbours[base].get_or_insert_with(|| nearest_others(pool, base, k));
        let neighbor = nn[rng.random_range(0..nn.len())];
        let u: f64 = rng.random();
        let x = pool[base].data();
        let y = pool[neighbor].data();
        let data = x.iter().zip(y).map(|(a, b)| a + u * (b - a)).collect();
        out.push(SmoteSample {
            tensor: LatentTensor::new(dims, data)?,
            base,
            neighbor,
            u,
        });
    }
    Ok(out)
}

/// Oversamples every tail class from its real train records until its train
/// positive count reaches `target`. New labels are the intersection of the
/// two parents' labels.
pub fn smote_augment(
    dataset: &Dataset,
    partition: &PartitionSpec,
    target: usize,
    k: usize,
    seed: u64,
) -> Result<Dataset> {
    partition.validate(dataset.num_classes())?;
    let mut out = dataset.clone();
    for &t in &partition.tail {
        let have = out.manifest.train_positive_counts()[t];
        let need = target.saturating_sub(have);
        if need == 0 {
            continue;
        }
        let members: Vec<usize> = dataset
            .train_indices_with(t)
            .into_iter()
            .filter(|&i| !dataset.manifest.records[i].synthetic)
            .collect();
        let pool: Vec<&LatentTensor> = members.iter().map(|&i| &dataset.tensors[i]).collect();
        let class_seed = seed::derive_seed(seed, &[Tag::Str(METHOD), Tag::Int(t as u64)]);
        let samples = smote_oversample(&pool, need, k, class_seed)?;
        let mut records = Vec::with_capacity(need);
        let mut tensors = Vec::with_capacity(need);
        for (n, s) in samples.into_iter().enumerate() {
            let a = &dataset.manifest.records[members[s.base]];
            let b = &dataset.manifest.records[members[s.neighbor]];
            let labels = LabelVector(
                a.labels
                    .0
                    .iter()
                    .zip(&b.labels.0)
                    .map(|(x, y)| x & y)
                    .collect(),
            );
            let mut r = Record::real(format!("{METHOD}_{t:02}_{n:04}"), labels, Split::Train);
            r.synthetic = true;
            r.method = Some(METHOD.into());
            r.tail_id = Some(a.id.clone());
            r.head_id = Some(b.id.clone());
            r.seed = Some(class_seed);
            records.push(r);
            tensors.push(s.tensor.round_to_f32());
        }
        out = out.extend(records, tensors)?;
    }
    Ok(out)
}
