//! Dataset model, manifest persistence, the synthetic long-tailed generator
//! and head/tail partitioning.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Tag};
use crate::tensor::{read_latent, write_latent, Dims, LatentTensor};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Multilabel indicator over `K` classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(pub Vec<u8>);

impl LabelVector {
    pub fn from_classes(k: usize, classes: impl IntoIterator<Item = usize>) -> Self {
        let mut y = vec![0u8; k];
        for c in classes {
            y[c] = 1;
        }
        LabelVector(y)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has(&self, c: usize) -> bool {
        self.0.get(c).copied() == Some(1)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(c, _)| c)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

/// One manifest entry. Synthetic records carry their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub tensor: String,
    pub labels: LabelVector,
    pub split: Split,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoise_steps: Option<usize>,
}

impl Record {
    pub fn real(id: String, labels: LabelVector, split: Split) -> Self {
        Record {
            tensor: tensor_ref(&id),
            id,
            labels,
            split,
            synthetic: false,
            method: None,
            tail_id: None,
            head_id: None,
            seed: None,
            denoise_steps: None,
        }
    }
}

pub(crate) fn tensor_ref(id: &str) -> String {
    format!("tensors/{id}.lta")
}

/// The JSON manifest: `{"dims", "class_names", "records"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dims: [usize; 3],
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Positive count per class over the train split.
    pub fn train_positive_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            for c in r.labels.classes() {
                counts[c] += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k == 0 {
            return Err(Error::Manifest("no classes declared".into()));
        }
        let dims = self.dims();
        if dims.is_empty() {
            return Err(Error::Manifest(format!("empty dims {dims}")));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate record id {:?}", r.id)));
            }
            if r.labels.len() != k {
                return Err(Error::Manifest(format!(
                    "record {:?} has {} labels, expected {k}",
                    r.id,
                    r.labels.len()
                )));
            }
            if r.labels.0.iter().any(|&v| v > 1) {
                return Err(Error::Manifest(format!(
                    "record {:?} has a non-binary label",
                    r.id
                )));
            }
            if r.split == Split::Train && r.labels.classes().next().is_none() {
                return Err(Error::Manifest(format!(
                    "train record {:?} has no positive label",
                    r.id
                )));
            }
        }
        let counts = self.train_positive_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Manifest(format!(
                "class {c} ({:?}) has no train records",
                self.class_names[c]
            )));
        }
        Ok(())
    }
}

/// A manifest together with its loaded tensors, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tensors: Vec<LatentTensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, tensors: Vec<LatentTensor>) -> Result<Self> {
        if manifest.records.len() != tensors.len() {
            return Err(Error::Manifest(format!(
                "{} records but {} tensors",
                manifest.records.len(),
                tensors.len()
            )));
        }
        let dims = manifest.dims();
        for (r, t) in manifest.records.iter().zip(&tensors) {
            t.check_dims(dims, &format!("record {:?}", r.id))?;
            if !t.is_finite() {
                return Err(Error::Manifest(format!(
                    "record {:?} has non-finite entries",
                    r.id
                )));
            }
        }
        manifest.validate()?;
        Ok(Dataset { manifest, tensors })
    }

    pub fn dims(&self) -> Dims {
        self.manifest.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Appends records and re-validates the whole manifest.
    pub fn extend(&self, records: Vec<Record>, tensors: Vec<LatentTensor>) -> Result<Dataset> {
        let mut manifest = self.manifest.clone();
        manifest.records.extend(records);
        let mut all = self.tensors.clone();
        all.extend(tensors);
        Dataset::new(manifest, all)
    }

    /// Train-split indices of records labeled with class `c`.
    pub fn train_indices_with(&self, c: usize) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train && r.labels.has(c))
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes `dir/manifest.json` and one LTA1 file per record under
    /// `dir/tensors/`. Tensor refs are rewritten to be relative to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        for (r, t) in manifest.records.iter_mut().zip(&self.tensors) {
            r.tensor = tensor_ref(&r.id);
            write_latent(t, dir.join(&r.tensor))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a manifest file (or a directory containing `manifest.json`) and
    /// every tensor it references. Relative refs resolve against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        manifest.validate()?;
        let root = path.parent().unwrap_or(Path::new("."));
        let tensors = manifest
            .records
            .iter()
            .map(|r| read_latent(root.join(&r.tensor)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(manifest, tensors)
    }
}

/// Configuration of the synthetic long-tailed generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub head_classes: usize,
    pub tail_classes: usize,
    /// Train records whose primary class is a given head class.
    pub head_count: usize,
    /// Train records whose primary class is a given tail class.
    pub tail_count: usize,
    /// Test records per class (primary).
    pub test_count: usize,
    pub dims: [usize; 3],
    pub noise_std: f64,
    /// Probability of adding each non-primary class to a record.
    pub cooccurrence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            head_classes: 3,
            tail_classes: 3,
            head_count: 200,
            tail_count: 20,
            test_count: 50,
            dims: [8, 8, 4],
            noise_std: 0.1,
            cooccurrence: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.head_classes + self.tail_classes
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn train_counts(&self) -> Vec<usize> {
        let mut v = vec![self.head_count; self.head_classes];
        v.extend(std::iter::repeat_n(self.tail_count, self.tail_classes));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("synth.{key}: {msg}")));
        if self.head_classes < 1 {
            return bad("head_classes", "must be >= 1");
        }
        if self.tail_classes < 1 {
            return bad("tail_classes", "must be >= 1");
        }
        if self.head_count < 1 {
            return bad("head_count", "must be >= 1");
        }
        if self.tail_count < 1 {
            return bad("tail_count", "must be >= 1");
        }
        if self.dims[0] < 4 || self.dims[1] < 4 {
            return bad("dims", "H and W must be >= 4");
        }
        if self.dims[2] < 1 {
            return bad("dims", "C must be >= 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.cooccurrence) {
            return bad("cooccurrence", "must lie in [0, 1]");
        }
        SynthLayout::regions_for(self.num_classes(), self.dims()).map(|_| ())
    }
}

/// Axis-aligned rectangle `[top, top+height) x [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |i| (self.left..self.left + self.width).map(move |j| (i, j)))
    }
}

/// The planted structure behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLayout {
    pub regions: Vec<Region>,
    /// Per-class channel signature, copied into every cell of its region.
    pub prototypes: Vec<Vec<f64>>,
}

impl SynthLayout {
    /// Tiles `k` equal rectangles in row-major order over a
    /// `ceil(k / q) x q` grid with `q = ceil(sqrt(k))`.
    pub fn regions_for(k: usize, dims: Dims) -> Result<Vec<Region>> {
        let cols = (k as f64).sqrt().ceil() as usize;
        let rows = k.div_ceil(cols);
        let height = dims.h / rows;
        let width = dims.w / cols;
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "synth.dims: {k} class regions do not fit in {}x{}",
                dims.h, dims.w
            )));
        }
        Ok((0..k)
            .map(|c| Region {
                top: (c / cols) * height,
                left: (c % cols) * width,
                height,
                width,
            })
            .collect())
    }

    /// Noise-free latent for a label set.
    pub fn clean_latent(&self, dims: Dims, labels: &LabelVector) -> LatentTensor {
        let mut z = LatentTensor::zeros(dims);
        for c in labels.classes() {
            for (i, j) in self.regions[c].cells() {
                z.pixel_mut(i, j).copy_from_slice(&self.prototypes[c]);
            }
        }
        z
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub layout: SynthLayout,
}

/// Generates a long-tailed multilabel dataset as a pure function of
/// `(cfg, seed)`.
pub fn synth_longtail(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let dims = cfg.dims();
    let k = cfg.num_classes();
    let regions = SynthLayout::regions_for(k, dims)?;

    let mut proto_rng = seed::sub_rng(seed, &[Tag::Str("synth"), Tag::Str("prototypes")]);
    let prototypes = (0..k)
        .map(|_| {
            (0..dims.c)
                .map(|_| {
                    let mag = proto_rng.random_range(0.5..1.5);
                    if proto_rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()
        })
        .collect();
    let layout = SynthLayout {
        regions,
        prototypes,
    };

    let class_names = (0..k)
        .map(|c| {
            if c < cfg.head_classes {
                format!("head_{c}")
            } else {
                format!("tail_{}", c - cfg.head_classes)
            }
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::Config(format!("synth.noise_std: {e}")))?;
    let mut records = Vec::new();
    let mut tensors = Vec::new();
    let plan = [
        (Split::Train, cfg.train_counts()),
        (Split::Test, vec![cfg.test_count; k]),
    ];
    for (split, counts) in plan {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut rng = seed::sub_rng(seed, &[Tag::Str("synth"), Tag::Str(tag)]);
        for (primary, &count) in counts.iter().enumerate() {
            for n in 0..count {
                let mut classes = vec![primary];
                for other in (0..k).filter(|&o| o != primary) {
                    if cfg.cooccurrence > 0.0 && rng.random_bool(cfg.cooccurrence) {
                        classes.push(other);
                    }
                }
                let labels = LabelVector::from_classes(k, classes);
                let mut z = layout.clean_latent(dims, &labels);
                if cfg.noise_std > 0.0 {
                    for v in z.data_mut() {
                        *v += noise.sample(&mut rng);
                    }
                }
                let id = format!("{tag}_{primary:02}_{n:04}");
                records.push(Record::real(id, labels, split));
                tensors.push(z.round_to_f32());
            }
        }
    }

    let manifest = DatasetManifest {
        dims: cfg.dims,
        class_names,
        records,
    };
    Ok(SynthDataset {
        dataset: Dataset::new(manifest, tensors)?,
        layout,
    })
}

/// Disjoint cover of the class ids by head and tail sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub head: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
}

impl PartitionSpec {
    pub fn is_head(&self, c: usize) -> bool {
        self.head.contains(&c)
    }

    pub fn is_tail(&self, c: usize) -> bool {
        self.tail.contains(&c)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.head.is_empty() {
            return Err(Error::Partition("head set is empty".into()));
        }
        if self.tail.is_empty() {
            return Err(Error::Partition("tail set is empty".into()));
        }
        if let Some(c) = self.head.intersection(&self.tail).next() {
            return Err(Error::Partition(format!("class {c} is both head and tail")));
        }
        for c in 0..k {
            if !self.head.contains(&c) && !self.tail.contains(&c) {
                return Err(Error::Partition(format!("class {c} is not covered")));
            }
        }
        if let Some(c) = self.head.iter().chain(&self.tail).find(|&&c| c >= k) {
            return Err(Error::Partition(format!(
                "class {c} out of range (K = {k})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    Explicit {
        head: Vec<usize>,
        tail: Vec<usize>,
    },
    /// Head classes have strictly more train positives than the threshold.
    Threshold(usize),
}

pub fn partition_head_tail(m: &DatasetManifest, rule: &PartitionRule) -> Result<PartitionSpec> {
    let spec = match rule {
        PartitionRule::Explicit { head, tail } => PartitionSpec {
            head: head.iter().copied().collect(),
            tail: tail.iter().copied().collect(),
        },
        PartitionRule::Threshold(theta) => {
            let counts = m.train_positive_counts();
            let (head, tail): (Vec<usize>, Vec<usize>) =
                (0..counts.len()).partition(|&c| counts[c] > *theta);
            PartitionSpec {
                head: head.into_iter().collect(),
                tail: tail.into_iter().collect(),
            }
        }
    };
    spec.validate(m.num_classes())?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_with_counts(counts: &[usize]) -> DatasetManifest {
        let k = counts.len();
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(Record::real(
                    format!("r{c}_{i}"),
                    LabelVector::from_classes(k, [c]),
                    Split::Train,
                ));
            }
        }
        DatasetManifest {
            dims: [4, 4, 1],
            class_names: (0..k).map(|c| format!("c{c}")).collect(),
            records,
        }
    }

    #[test]
    fn default_counts_are_as_configured() {
        let cfg = SynthConfig::default();
        let ds = synth_longtail(&cfg, 11).unwrap().dataset;
        assert_eq!(ds.indices(Split::Train).len(), 660);
        assert_eq!(
            ds.manifest.train_positive_counts(),
            vec![200, 200, 200, 20, 20, 20]
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            head_count: 30,
            tail_count: 5,
            test_count: 5,
            cooccurrence: 0.2,
            ..SynthConfig::default()
        };
        let a = synth_longtail(&cfg, 5).unwrap();
        let b = synth_longtail(&cfg, 5).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = synth_longtail(&cfg, 6).unwrap();
        assert_ne!(a.dataset.tensors, c.dataset.tensors);
    }

    #[test]
    fn region_energy_separates_labeled_records() {
        let cfg = SynthConfig::default();
        let synth = synth_longtail(&cfg, 2).unwrap();
        let ds = &synth.dataset;
        let k = cfg.num_classes();
        let mut sampled = ds.indices(Split::Train);
        rand::seq::SliceRandom::shuffle(sampled.as_mut_slice(), &mut seed::rng(99));
        sampled.truncate(500);
        for c in 0..k {
            let region = synth.layout.regions[c];
            let energy = |z: &LatentTensor| {
                let mut s = 0.0;
                let mut n = 0usize;
                for (i, j) in region.cells() {
                    for v in z.pixel(i, j) {
                        s += v * v;
                        n += 1;
                    }
                }
                s / n as f64
            };
            let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0, 0.0, 0);
            for &i in &sampled {
                let e = energy(&ds.tensors[i]);
                if ds.manifest.records[i].labels.has(c) {
                    on += e;
                    n_on += 1;
                } else {
                    off += e;
                    n_off += 1;
                }
            }
            assert!(n_on > 0 && n_off > 0, "class {c} not sampled");
            let (on, off) = (on / n_on as f64, off / n_off as f64);
            assert!(on > off + 3.0 * cfg.noise_std, "class {c}: {on} vs {off}");
        }
    }

    #[test]
    fn regions_are_disjoint_and_fit() {
        let dims = Dims::new(8, 8, 4);
        for k in 1..=16 {
            let regions = SynthLayout::regions_for(k, dims).unwrap();
            let mut owner = vec![None; 64];
            for (c, r) in regions.iter().enumerate() {
                for (i, j) in r.cells() {
                    assert!(i < 8 && j < 8);
                    assert!(owner[i * 8 + j].is_none());
                    owner[i * 8 + j] = Some(c);
                }
            }
        }
        assert!(SynthLayout::regions_for(20, Dims::new(4, 4, 1)).is_err());
        let cfg = SynthConfig {
            head_classes: 10,
            tail_classes: 10,
            dims: [4, 4, 2],
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn threshold_partition() {
        let m = manifest_with_counts(&[200, 200, 200, 20, 20, 20]);
        let p = partition_head_tail(&m, &PartitionRule::Threshold(100)).unwrap();
        assert_eq!(p.head, BTreeSet::from([0, 1, 2]));
        assert_eq!(p.tail, BTreeSet::from([3, 4, 5]));
    }

    #[test]
    fn explicit_partition_passes_through() {
        let m = manifest_with_counts(&[5; 10]);
        let rule = PartitionRule::Explicit {
            head: vec![0, 1, 2, 3, 4],
            tail: vec![5, 6, 7, 8, 9],
        };
        let p = partition_head_tail(&m, &rule).unwrap();
        assert_eq!(p.head, (0..5).collect());
        assert_eq!(p.tail, (5..10).collect());
    }

    #[test]
    fn degenerate_partitions_rejected() {
        let m = manifest_with_counts(&[200, 200, 20]);
        assert!(matches!(
            partition_head_tail(&m, &PartitionRule::Threshold(1000)),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            partition_head_tail(&m, &PartitionRule::Threshold(0)),
            Err(Error::Partition(_))
        ));
        let overlap = PartitionRule::Explicit {
            head: vec![0, 1],
            tail: vec![1, 2],
        };
        assert!(partition_head_tail(&m, &overlap).is_err());
        let gap = PartitionRule::Explicit {
            head: vec![0],
            tail: vec![2],
        };
        assert!(partition_head_tail(&m, &gap).is_err());
    }

    #[test]
    fn class_without_records_rejected() {
        let m = manifest_with_counts(&[3, 0, 2]);
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn save_and_load_roundtrip() {
        let cfg = SynthConfig {
            head_count: 6,
            tail_count: 2,
            test_count: 2,
            ..SynthConfig::default()
        };
        let ds = synth_longtail(&cfg, 1).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        let again = Dataset::load(dir.path()).unwrap();
        assert_eq!(again, ds);
    }
}
