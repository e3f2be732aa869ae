//! Procedural "flower" images, stratified splits, on-disk layout and batch
//! iteration.
//!
//! Class `k` is a centered flower with `3 + k` petal lobes and a
//! class-specific hue. Petal length, width, rotation, hue jitter and
//! background noise are drawn per image.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, stream_rng, AugmentConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::netcore::ParamTensor;
use crate::tensor::Tensor;

/// Train / validation / test proportions of the 16465 / 3712 / 7382 split.
pub const REFERENCE_SPLIT: (f64, f64, f64) = (
    16465.0 / 27559.0,
    3712.0 / 27559.0,
    7382.0 / 27559.0,
);

pub const DATASET_FILE: &str = "dataset.dfl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    /// Standard deviation of the per-image hue offset, in units of the
    /// spacing between class hues.
    pub hue_jitter: f64,
    /// Upper bound of the per-image background noise amplitude.
    pub max_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 200,
            image_side: 32,
            hue_jitter: 0.15,
            max_noise: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("synthetic data needs at least 2 classes"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::validation("samples_per_class must be positive"));
        }
        if self.image_side < 8 {
            return Err(Error::validation("image_side must be at least 8"));
        }
        if !(self.hue_jitter >= 0.0 && self.max_noise >= 0.0) {
            return Err(Error::validation("hue_jitter and max_noise must be >= 0"));
        }
        Ok(())
    }

    pub fn petal_count(class: usize) -> usize {
        3 + class
    }
}

/// All images of a dataset as one `[N, H, W, 3]` tensor plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images at the given offsets, stacked in order.
    pub fn gather(&self, offsets: &[usize]) -> Result<Tensor> {
        let w = self.images.row_len();
        let mut data = Vec::with_capacity(offsets.len() * w);
        for &o in offsets {
            if o >= self.len() {
                return Err(Error::validation(format!("sample offset {o} out of range")));
            }
            data.extend_from_slice(self.images.row(o));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = offsets.len();
        Tensor::new(shape, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Row of the sample in the dataset tensor.
    pub offset: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub split: Option<SplitTag>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(num_classes: usize, split: Option<SplitTag>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            num_classes,
            split,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.label >= self.num_classes {
                return Err(Error::validation(format!(
                    "sample {} has label {} outside [0, {})",
                    e.id, e.label, self.num_classes
                )));
            }
            if !seen.insert(e.id) {
                return Err(Error::validation(format!("duplicate sample id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.offset).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }
}

/// A manifest split three ways, as stored in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifests {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

impl SplitManifests {
    pub fn get(&self, tag: SplitTag) -> &DatasetManifest {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    num_classes: usize,
    splits: BTreeMap<SplitTag, Vec<ManifestEntry>>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one flower image `[side, side, 3]` of class `class`.
pub fn render_flower(spec: &SyntheticSpec, class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let side = spec.image_side;
    let petals = SyntheticSpec::petal_count(class) as f64;
    let spacing = 1.0 / spec.num_classes as f64;
    let hue = class as f64 * spacing + spec.hue_jitter * spacing * rng.sample::<f64, _>(StandardNormal);
    let saturation = rng.gen_range(0.55..0.95);
    let value = rng.gen_range(0.7..1.0);
    let petal = hsv_to_rgb(hue, saturation, value);
    let disc = hsv_to_rgb(rng.gen_range(0.1..0.16), 0.9, rng.gen_range(0.4..0.7));
    let background = hsv_to_rgb(rng.gen_range(0.25..0.4), 0.5, rng.gen_range(0.15..0.35));
    let length = rng.gen_range(0.6..0.9);
    let sharpness = rng.gen_range(0.6..1.6);
    let rotation = rng.gen_range(0.0..std::f64::consts::TAU);
    let disc_radius = rng.gen_range(0.12..0.2);
    let noise = rng.gen_range(0.0..=spec.max_noise);
    let jitter_x = rng.gen_range(-0.05..0.05);
    let jitter_y = rng.gen_range(-0.05..0.05);

    let half = (side as f64 - 1.0) / 2.0;
    let mut img = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 - half) / half - jitter_x;
            let v = (y as f64 - half) / half - jitter_y;
            let r = (u * u + v * v).sqrt();
            let phi = v.atan2(u);
            let lobe = (petals * (phi - rotation) / 2.0).cos().abs().powf(sharpness);
            let edge = length * lobe;
            let in_petal = 1.0 - smoothstep(edge - 0.06, edge + 0.02, r);
            let in_disc = 1.0 - smoothstep(disc_radius - 0.04, disc_radius + 0.02, r);
            for ch in 0..3 {
                let base = background[ch] * (1.0 - in_petal) + petal[ch] * in_petal;
                let colored = base * (1.0 - in_disc) + disc[ch] * in_disc;
                let noisy = colored + noise * (rng.gen::<f64>() - 0.5);
                img.push(f64::from(noisy.clamp(0.0, 1.0) as f32));
            }
        }
    }
    img
}

/// Deterministic synthetic dataset. Sample `i` has label `i mod C` and is
/// rendered from its own random stream, so generation order is irrelevant.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, DatasetManifest)> {
    spec.validate()?;
    let n = spec.num_classes * spec.samples_per_class;
    let side = spec.image_side;
    let pixels: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| render_flower(spec, i % spec.num_classes, &mut stream_rng(seed, i as u64)))
        .collect();
    let images = Tensor::new(vec![n, side, side, 3], pixels.concat())?;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    let entries = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| ManifestEntry {
            id: i,
            offset: i,
            label,
        })
        .collect();
    let manifest = DatasetManifest::new(spec.num_classes, None, entries)?;
    Ok((
        Dataset {
            images,
            labels,
            num_classes: spec.num_classes,
        },
        manifest,
    ))
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier
/// bucket.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified three-way split.
pub fn split(manifest: &DatasetManifest, fractions: (f64, f64, f64), seed: u64) -> Result<SplitManifests> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(Error::validation(format!(
            "split fractions must all be positive, got {fr:?}"
        )));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("split fractions must sum to 1, got {fr:?}")));
    }
    let mut by_class: Vec<Vec<ManifestEntry>> = vec![Vec::new(); manifest.num_classes];
    for e in &manifest.entries {
        by_class[e.label].push(*e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<ManifestEntry>; 3] = Default::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < fr.len() {
            return Err(Error::validation(format!(
                "class {class} has {} samples, fewer than the {} splits",
                members.len(),
                fr.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &fr);
        let mut rest = members.as_slice();
        for (part, count) in parts.iter_mut().zip(counts) {
            let (head, tail) = rest.split_at(count);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    for (part, tag) in parts.iter_mut().zip(SplitTag::ALL) {
        if part.is_empty() {
            return Err(Error::validation(format!("{} split would be empty", tag.as_str())));
        }
        part.sort_by_key(|e| e.id);
    }
    let [train, val, test] = parts;
    let make = |entries, tag| DatasetManifest::new(manifest.num_classes, Some(tag), entries);
    Ok(SplitManifests {
        train: make(train, SplitTag::Train)?,
        val: make(val, SplitTag::Val)?,
        test: make(test, SplitTag::Test)?,
    })
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let labels = Tensor::new(
        vec![dataset.labels.len()],
        dataset.labels.iter().map(|&l| l as f64).collect(),
    )?;
    checkpoint::encode(&[
        ParamTensor {
            name: "images".into(),
            value: dataset.images.clone(),
        },
        ParamTensor {
            name: "labels".into(),
            value: labels,
        },
    ])
}

pub fn encode_manifest(splits: &SplitManifests) -> Result<Vec<u8>> {
    let file = ManifestFile {
        num_classes: splits.train.num_classes,
        splits: SplitTag::ALL
            .iter()
            .map(|&t| (t, splits.get(t).entries.clone()))
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file).map_err(|e| Error::validation(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `dataset.dfl` and `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset, splits: &SplitManifests) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::write_atomic(&dir.join(DATASET_FILE), &encode_dataset(dataset)?)?;
    checkpoint::write_atomic(&dir.join(MANIFEST_FILE), &encode_manifest(splits)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, SplitManifests)> {
    let tensors = checkpoint::load(&dir.join(DATASET_FILE))?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.value.clone())
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("dataset file lacks tensor {name:?}"),
            })
    };
    let images = find("images")?;
    let labels_t = find("labels")?;
    if images.rank() != 4 || labels_t.rank() != 1 || labels_t.len() != images.batch() {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "dataset tensors have shapes {:?} and {:?}",
                images.shape(),
                labels_t.shape()
            ),
        });
    }
    let text = fs::read(dir.join(MANIFEST_FILE))?;
    let file: ManifestFile = serde_json::from_slice(&text).map_err(|e| Error::Format {
        offset: 0,
        message: format!("manifest: {e}"),
    })?;
    let labels: Vec<usize> = labels_t.data().iter().map(|&l| l as usize).collect();
    let mut manifests = Vec::new();
    for tag in SplitTag::ALL {
        let entries = file.splits.get(&tag).cloned().unwrap_or_default();
        for e in &entries {
            if e.offset >= labels.len() || labels[e.offset] != e.label {
                return Err(Error::validation(format!(
                    "manifest entry {} disagrees with dataset file",
                    e.id
                )));
            }
        }
        manifests.push(DatasetManifest::new(file.num_classes, Some(tag), entries)?);
    }
    let test = manifests.pop().expect("three splits");
    let val = manifests.pop().expect("three splits");
    let train = manifests.pop().expect("three splits");
    Ok((
        Dataset {
            images,
            labels,
            num_classes: file.num_classes,
        },
        SplitManifests { train, val, test },
    ))
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Augmentation applied while batching: config plus the seed whose
/// sub-streams (one per sample id) drive the draws.
#[derive(Debug, Clone, Copy)]
pub struct BatchAugment {
    pub config: AugmentConfig,
    pub seed: u64,
}

/// One epoch over a manifest.
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    order: Vec<ManifestEntry>,
    batch_size: usize,
    pos: usize,
    augment: Option<BatchAugment>,
}

impl<'a> BatchStream<'a> {
    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Sample order for the epoch.
    pub fn ids(&self) -> Vec<usize> {
        self.order.iter().map(|e| e.id).collect()
    }

    fn make_batch(&self, chunk: &[ManifestEntry]) -> Result<Batch> {
        let offsets: Vec<usize> = chunk.iter().map(|e| e.offset).collect();
        let mut images = self.dataset.gather(&offsets)?;
        let ids: Vec<usize> = chunk.iter().map(|e| e.id).collect();
        if let Some(aug) = &self.augment {
            let streams: Vec<u64> = ids.iter().map(|&id| id as u64).collect();
            images = augment_batch(&images, &aug.config, aug.seed, &streams)?;
        }
        Ok(Batch {
            ids,
            images,
            labels: chunk.iter().map(|e| e.label).collect(),
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.make_batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Batches over `manifest`, shuffled by `shuffle_seed` when given.
pub fn batches<'a>(
    dataset: &'a Dataset,
    manifest: &DatasetManifest,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augment: Option<BatchAugment>,
) -> Result<BatchStream<'a>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be >= 1"));
    }
    if manifest.is_empty() {
        return Err(Error::validation("cannot batch an empty manifest"));
    }
    if let Some(bad) = manifest.entries.iter().find(|e| e.offset >= dataset.len()) {
        return Err(Error::validation(format!(
            "manifest entry {} points past the dataset",
            bad.id
        )));
    }
    let mut order = manifest.entries.clone();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchStream {
        dataset,
        order,
        batch_size,
        pos: 0,
        augment,
    })
}
