//! Training loops: focal loss + Adam + learning-rate schedule, snapshotting
//! on validation macro-F1, synchronous replica gradient averaging, and
//! head-only fine-tuning of the meta-classifier.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{batches, BatchAugment, Dataset, DatasetManifest, SplitManifests};
use crate::error::{Error, Result};
use crate::fusion::{block_average_head, fuse, strategy_weights, ConcatSource, FusionStrategy, MetaClassifier};
use crate::losses::{focal_loss_backward, one_hot, FocalLossParams};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::netcore::{backward, forward, Gradients, Network, NetworkConfig, Parameters};
use crate::optim::{AdamState, LrSchedule, StepUnit};
use crate::tensor::Tensor;

/// Samples per unit of intra-shard parallel work. Gradients of the chunks
/// are summed in chunk order, so results do not depend on thread count.
const CHUNK: usize = 16;
/// Batch size used for inference passes.
const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub replicas: usize,
    pub gamma: f64,
    pub schedule: LrSchedule,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub augment_seed: u64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Overrides the schedule with a constant rate when set.
    pub fixed_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 128,
            replicas: 1,
            gamma: 2.0,
            schedule: LrSchedule::default(),
            init_seed: 0,
            shuffle_seed: 1,
            augment_seed: 2,
            augment: Some(AugmentConfig::default()),
            fixed_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size == 0 || self.replicas == 0 {
            return Err(Error::validation("batch_size and replicas must be >= 1"));
        }
        if !self.batch_size.is_multiple_of(self.replicas) {
            return Err(Error::validation(format!(
                "batch_size {} is not divisible by {} replicas",
                self.batch_size, self.replicas
            )));
        }
        FocalLossParams::new(self.gamma)?;
        self.schedule.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        if let Some(lr) = self.fixed_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::validation(format!("fixed_lr must be finite and >= 0, got {lr}")));
            }
        }
        Ok(())
    }

    fn lr_for(&self, epoch: usize, global_step: u64) -> Result<f64> {
        if let Some(lr) = self.fixed_lr {
            return Ok(lr);
        }
        let step = match self.schedule.step_unit {
            StepUnit::Epoch => epoch as u64,
            StepUnit::Batch => global_step,
        };
        self.schedule.lr_at(i64::try_from(step).unwrap_or(i64::MAX))
    }
}

fn mix(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
    pub snapshot: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,loss,val_macro_f1,lr,snapshot` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_macro_f1,lr,snapshot\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{}",
                r.epoch, r.train_loss, r.val_macro_f1, r.lr, r.snapshot as u8
            );
        }
        out
    }

    pub fn best_val_macro_f1(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_macro_f1).reduce(f64::max)
    }
}

/// Anything that maps an image batch to class probabilities.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn predict_proba(&self, images: &Tensor) -> Result<Tensor>;
}

impl Classifier for Network {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        Network::predict_proba(self, images)
    }
}

impl Classifier for MetaClassifier {
    fn num_classes(&self) -> usize {
        MetaClassifier::num_classes(self)
    }

    fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        self.meta_forward(images)
    }
}

/// Several networks combined by a fixed fusion strategy.
#[derive(Debug, Clone)]
pub struct FusedEnsemble {
    pub members: Vec<Network>,
    pub strategy: FusionStrategy,
    /// Needed for [`FusionStrategy::Accuracy`].
    pub val_accuracies: Option<Vec<f64>>,
}

impl Classifier for FusedEnsemble {
    fn num_classes(&self) -> usize {
        self.members[0].config.num_classes
    }

    fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        let probs = self
            .members
            .iter()
            .map(|m| m.predict_proba(images))
            .collect::<Result<Vec<_>>>()?;
        let weights = strategy_weights(self.strategy, &probs, self.val_accuracies.as_deref())?;
        fuse(&probs, &weights)
    }
}

/// Class probabilities for every sample of `manifest`, in manifest order.
pub fn predict_manifest(model: &impl Classifier, dataset: &Dataset, manifest: &DatasetManifest) -> Result<Tensor> {
    if manifest.is_empty() {
        return Err(Error::validation("cannot evaluate an empty manifest"));
    }
    let offsets = manifest.offsets();
    let parts = offsets
        .par_chunks(EVAL_BATCH)
        .map(|chunk| model.predict_proba(&dataset.gather(chunk)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&parts)
}

/// Deterministic evaluation without augmentation.
pub fn evaluate(model: &impl Classifier, dataset: &Dataset, manifest: &DatasetManifest) -> Result<MetricsReport> {
    let probs = predict_manifest(model, dataset, manifest)?;
    report_from_probs(&probs, &manifest.labels(), model.num_classes())
}

pub fn report_from_probs(probs: &Tensor, labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    let cm = ConfusionMatrix::from_labels(num_classes, &probs.argmax_rows(), labels)?;
    MetricsReport::from_confusion(&cm)
}

/// Mean focal loss over `images` and its parameter gradient.
pub fn loss_and_gradients(
    config: &NetworkConfig,
    params: &Parameters,
    images: &Tensor,
    labels: &[usize],
    loss: &FocalLossParams,
) -> Result<(f64, Gradients)> {
    let n = images.batch();
    if n == 0 || labels.len() != n {
        return Err(Error::dim("training batch labels", n, labels.len()));
    }
    let targets = one_hot(labels, config.num_classes)?;
    let traces = (0..n)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| forward(config, params, &images.slice_batch(start, (start + CHUNK).min(n))))
        .collect::<Result<Vec<_>>>()?;
    let logits = Tensor::concat_batch(&traces.iter().map(|t| t.logits.clone()).collect::<Vec<_>>())?;
    let (value, dlogits) = focal_loss_backward(&logits, &targets, loss)?;
    let partials = traces
        .par_iter()
        .enumerate()
        .map(|(i, trace)| {
            let start = i * CHUNK;
            backward(config, params, trace, &dlogits.slice_batch(start, start + trace.batch()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one chunk");
    for g in iter {
        total.add_assign(&g)?;
    }
    Ok((value, total))
}

/// Contiguous shard bounds; sizes differ by at most one.
fn shard_bounds(n: usize, shards: usize) -> Vec<(usize, usize)> {
    let base = n / shards;
    let extra = n % shards;
    let mut start = 0;
    (0..shards)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let b = (start, start + len);
            start += len;
            b
        })
        .filter(|(s, e)| e > s)
        .collect()
}

/// Gradient of the batch-mean loss computed as `replicas` independent shard
/// gradients combined in ascending replica order. Equal shards are summed
/// by a left fold and divided by the replica count; unequal shards (only a
/// short final batch) are weighted by their size.
pub fn sharded_gradients(
    config: &NetworkConfig,
    params: &Parameters,
    images: &Tensor,
    labels: &[usize],
    replicas: usize,
    loss: &FocalLossParams,
) -> Result<(f64, Gradients)> {
    let n = images.batch();
    let bounds = shard_bounds(n, replicas.max(1));
    let results = bounds
        .par_iter()
        .map(|&(s, e)| loss_and_gradients(config, params, &images.slice_batch(s, e), &labels[s..e], loss))
        .collect::<Result<Vec<_>>>()?;
    if results.len() == 1 {
        return Ok(results.into_iter().next().expect("one shard"));
    }
    let equal = bounds.iter().all(|(s, e)| e - s == bounds[0].1 - bounds[0].0);
    let mut total_loss = 0.0;
    let mut acc: Option<Gradients> = None;
    for ((value, mut grad), (s, e)) in results.into_iter().zip(&bounds) {
        let weight = if equal { 1.0 } else { (e - s) as f64 };
        if !equal {
            grad.scale(weight);
        }
        total_loss += value * weight;
        match acc.as_mut() {
            None => acc = Some(grad),
            Some(a) => a.add_assign(&grad)?,
        }
    }
    let mut grad = acc.expect("several shards");
    let denom = if equal { bounds.len() as f64 } else { n as f64 };
    grad.scale(1.0 / denom);
    Ok((total_loss / denom, grad))
}

/// One synchronous data-parallel update: the batch is split into `replicas`
/// contiguous equal shards, shard gradients are averaged in ascending
/// replica order and a single Adam step is applied. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn replica_step(
    config: &NetworkConfig,
    params: &mut Parameters,
    images: &Tensor,
    labels: &[usize],
    replicas: usize,
    loss: &FocalLossParams,
    lr: f64,
    adam: &mut AdamState,
) -> Result<f64> {
    let n = images.batch();
    if replicas == 0 || !n.is_multiple_of(replicas) {
        return Err(Error::validation(format!(
            "batch of {n} cannot be split evenly across {replicas} replicas"
        )));
    }
    let (value, grads) = sharded_gradients(config, params, images, labels, replicas, loss)?;
    adam.step(params, &grads, lr)?;
    Ok(value)
}

/// Trains a freshly initialized network (parameters from `init_seed`).
pub fn train(
    config: &TrainConfig,
    net_config: &NetworkConfig,
    dataset: &Dataset,
    splits: &SplitManifests,
) -> Result<(Network, TrainHistory)> {
    let init = Network::init(net_config.clone(), config.init_seed)?;
    train_from(config, init, dataset, &splits.train, &splits.val)
}

/// Trains starting from `init`. Returns the parameters of the epoch with the
/// strictly highest validation macro-F1 and the full history.
pub fn train_from(
    config: &TrainConfig,
    init: Network,
    dataset: &Dataset,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
) -> Result<(Network, TrainHistory)> {
    config.validate()?;
    if train_manifest.is_empty() || val_manifest.is_empty() {
        return Err(Error::validation("training needs non-empty train and val splits"));
    }
    let (h, w, c) = dataset.image_shape();
    if (h, w, c) != init.config.input_shape {
        return Err(Error::dim("dataset images", init.config.input_shape, (h, w, c)));
    }
    let loss = FocalLossParams::new(config.gamma)?;
    let mut net = init;
    let mut best = net.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut adam = AdamState::new(&net.params);
    let mut history = TrainHistory::default();
    let mut global_step = 0u64;
    for epoch in 0..config.epochs {
        let epoch_lr = config.lr_for(epoch, global_step)?;
        let augment = config.augment.map(|cfg| BatchAugment {
            config: cfg,
            seed: mix(config.augment_seed, epoch),
        });
        let stream = batches(
            dataset,
            train_manifest,
            config.batch_size,
            Some(mix(config.shuffle_seed, epoch)),
            augment,
        )?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in stream.enumerate() {
            let batch = batch?;
            let lr = config.lr_for(epoch, global_step)?;
            let (value, grads) = sharded_gradients(
                &net.config,
                &net.params,
                &batch.images,
                &batch.labels,
                config.replicas,
                &loss,
            )?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            adam.step(&mut net.params, &grads, lr)?;
            loss_sum += value * batch.labels.len() as f64;
            seen += batch.labels.len();
            global_step += 1;
        }
        let val = evaluate(&net, dataset, val_manifest)?;
        let snapshot = val.macro_f1 > best_f1;
        if snapshot {
            best_f1 = val.macro_f1;
            best = net.clone();
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_macro_f1: val.macro_f1,
            lr: epoch_lr,
            snapshot,
        });
    }
    Ok((best, history))
}

/// Options specific to the meta head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub concat_source: ConcatSource,
    /// Start the head as block averaging (uniform voting) instead of a
    /// random He initialization. Only valid for probability concatenation.
    pub average_init: bool,
    /// Scale applied to the block-averaging kernel at initialization.
    pub average_init_scale: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            concat_source: ConcatSource::Probabilities,
            average_init: true,
            average_init_scale: 10.0,
        }
    }
}

/// Dataset whose "images" are `[N, 1, 1, width]` concatenated base outputs,
/// aligned with the offsets of the original dataset.
fn head_dataset(meta: &MetaClassifier, dataset: &Dataset) -> Result<Dataset> {
    let n = dataset.len();
    let offsets: Vec<usize> = (0..n).collect();
    let parts = offsets
        .chunks(EVAL_BATCH)
        .map(|chunk| meta.concat_inputs(&dataset.gather(chunk)?))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::concat_batch(&parts)?;
    let width = x.row_len();
    Ok(Dataset {
        images: x.reshape(vec![n, 1, 1, width])?,
        labels: dataset.labels.clone(),
        num_classes: dataset.num_classes,
    })
}

/// Builds a meta-classifier over frozen `bases` and trains only its dense
/// head with the same loss, optimizer, schedule and snapshot policy as base
/// training. Base outputs are computed once from unaugmented images.
pub fn fine_tune_meta(
    bases: Vec<Network>,
    dataset: &Dataset,
    splits: &SplitManifests,
    config: &TrainConfig,
    meta_config: &MetaConfig,
) -> Result<(MetaClassifier, TrainHistory)> {
    if bases.len() < 2 {
        return Err(Error::validation(format!(
            "meta-classifier needs at least 2 bases, got {}",
            bases.len()
        )));
    }
    let mut meta = MetaClassifier::new(bases, meta_config.concat_source, config.init_seed)?;
    if meta_config.average_init {
        if meta_config.concat_source != ConcatSource::Probabilities {
            return Err(Error::Config("average_init requires probability concatenation".into()));
        }
        let mut head = block_average_head(meta.bases().len(), meta.num_classes());
        head.entries_mut()[0].value.data_mut().iter_mut().for_each(|v| *v *= meta_config.average_init_scale);
        meta = meta.with_head(head)?;
    }
    let before = meta.snapshot();
    let features = head_dataset(&meta, dataset)?;
    let head_config = TrainConfig {
        augment: None,
        ..config.clone()
    };
    let (head, history) = train_from(&head_config, meta.head().clone(), &features, &splits.train, &splits.val)?;
    let meta = meta.with_head(head.params)?;
    if !crate::fusion::verify_frozen(&before, &meta.snapshot())? {
        return Err(Error::State("base parameters changed during head fine-tuning".into()));
    }
    Ok((meta, history))
}
