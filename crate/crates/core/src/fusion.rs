//! Probability fusion and the stacked meta-classifier.
//!
//! [`fuse`] forms row-wise convex combinations of K probability matrices.
//! Weights are uniform (average voting), proportional to validation
//! accuracy, or chosen per sample from each model's normalized entropy or
//! top-class confidence.
//!
//! [`MetaClassifier`] runs K frozen base networks, concatenates their
//! outputs in base order and feeds them through one trainable dense layer
//! followed by softmax.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{build_network, softmax, LayerSpec, Network, NetworkConfig, Parameters};
use crate::tensor::Tensor;

const DISTRIBUTION_TOL: f64 = 1e-6;
const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Average,
    Accuracy,
    Entropy,
    Confidence,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Average,
        FusionStrategy::Accuracy,
        FusionStrategy::Entropy,
        FusionStrategy::Confidence,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionStrategy::Average => "average",
            FusionStrategy::Accuracy => "accuracy",
            FusionStrategy::Entropy => "entropy",
            FusionStrategy::Confidence => "confidence",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicStrategy {
    Entropy,
    Confidence,
}

/// Per-model fusion weights, either shared by all samples or per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionWeights {
    Static(Vec<f64>),
    /// `[N, K]`, one weight row per sample.
    PerSample(Tensor),
}

fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::validation(format!("fusion scores must be finite and >= 0: {scores:?}")));
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Err(Error::validation("fusion scores are all zero"));
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

impl FusionWeights {
    pub fn uniform(k: usize) -> Self {
        FusionWeights::Static(vec![1.0 / k as f64; k])
    }

    /// Normalizes non-negative scores into static weights.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        Ok(FusionWeights::Static(normalize_scores(scores)?))
    }

    pub fn num_models(&self) -> usize {
        match self {
            FusionWeights::Static(w) => w.len(),
            FusionWeights::PerSample(t) => t.shape().get(1).copied().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |w: &[f64], what: &str| -> Result<()> {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::validation(format!("{what} has negative or non-finite weights")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::validation(format!("{what} sums to {sum}, not 1")));
            }
            Ok(())
        };
        match self {
            FusionWeights::Static(w) => check(w, "static weights"),
            FusionWeights::PerSample(t) => {
                if t.rank() != 2 {
                    return Err(Error::dim("per-sample weights rank", 2, t.rank()));
                }
                t.rows()
                    .enumerate()
                    .try_for_each(|(i, r)| check(r, &format!("weight row {i}")))
            }
        }
    }
}

fn check_distributions(probs: &[Tensor]) -> Result<(usize, usize)> {
    let Some(first) = probs.first() else {
        return Err(Error::validation("fusion needs at least one probability matrix"));
    };
    if first.rank() != 2 {
        return Err(Error::dim("probability matrix rank", 2, first.rank()));
    }
    for (k, p) in probs.iter().enumerate() {
        if p.shape() != first.shape() {
            return Err(Error::dim(format!("probability matrix {k}"), first.shape(), p.shape()));
        }
        for (i, row) in p.rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| v.is_nan() || *v < 0.0) || (sum - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(Error::validation(format!(
                    "row {i} of probability matrix {k} is not a distribution"
                )));
            }
        }
    }
    Ok((first.shape()[0], first.shape()[1]))
}

/// Row-wise `Σ_k w_k · p_k`.
pub fn fuse(probs: &[Tensor], weights: &FusionWeights) -> Result<Tensor> {
    let (n, c) = check_distributions(probs)?;
    weights.validate()?;
    if weights.num_models() != probs.len() {
        return Err(Error::dim("fusion weights", probs.len(), weights.num_models()));
    }
    if let FusionWeights::PerSample(t) = weights {
        if t.batch() != n {
            return Err(Error::dim("per-sample weight rows", n, t.batch()));
        }
    }
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let w: &[f64] = match weights {
            FusionWeights::Static(w) => w,
            FusionWeights::PerSample(t) => t.row(i),
        };
        let row = out.row_mut(i);
        for (p, &wk) in probs.iter().zip(w) {
            for (o, v) in row.iter_mut().zip(p.row(i)) {
                *o += wk * v;
            }
        }
    }
    Ok(out)
}

/// Weights proportional to per-model validation accuracy.
pub fn static_weights(val_accuracies: &[f64]) -> Result<FusionWeights> {
    if val_accuracies.is_empty() {
        return Err(Error::validation("no accuracies given"));
    }
    if let Some(a) = val_accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::validation(format!("accuracy {a} outside [0, 1]")));
    }
    FusionWeights::from_scores(val_accuracies)
        .map_err(|_| Error::validation("all accuracies are zero"))
}

fn entropy_score(row: &[f64]) -> f64 {
    let c = row.len();
    if c < 2 {
        return 1.0;
    }
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (1.0 - h / (c as f64).ln()).max(0.0)
}

fn confidence_score(row: &[f64]) -> f64 {
    row.iter().copied().fold(0.0, f64::max)
}

/// Per-sample weights from each model's normalized entropy
/// (`1 - H/ln C`) or top-class probability. Samples where every score is
/// zero fall back to uniform weights.
pub fn dynamic_weights(probs: &[Tensor], strategy: DynamicStrategy) -> Result<FusionWeights> {
    let (n, _) = check_distributions(probs)?;
    let k = probs.len();
    let mut w = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let scores: Vec<f64> = probs
            .iter()
            .map(|p| match strategy {
                DynamicStrategy::Entropy => entropy_score(p.row(i)),
                DynamicStrategy::Confidence => confidence_score(p.row(i)),
            })
            .collect();
        let row = normalize_scores(&scores).unwrap_or_else(|_| vec![1.0 / k as f64; k]);
        w.row_mut(i).copy_from_slice(&row);
    }
    Ok(FusionWeights::PerSample(w))
}

/// Weights for a named strategy. `val_accuracies` is required only by
/// [`FusionStrategy::Accuracy`].
pub fn strategy_weights(
    strategy: FusionStrategy,
    probs: &[Tensor],
    val_accuracies: Option<&[f64]>,
) -> Result<FusionWeights> {
    match strategy {
        FusionStrategy::Average => Ok(FusionWeights::uniform(probs.len())),
        FusionStrategy::Accuracy => {
            let acc = val_accuracies
                .ok_or_else(|| Error::validation("accuracy weighting needs validation accuracies"))?;
            static_weights(acc)
        }
        FusionStrategy::Entropy => dynamic_weights(probs, DynamicStrategy::Entropy),
        FusionStrategy::Confidence => dynamic_weights(probs, DynamicStrategy::Confidence),
    }
}

/// What each base contributes to the concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatSource {
    #[default]
    Probabilities,
    Features,
}

/// A trained base network whose parameters can only be read.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBase(Network);

impl FrozenBase {
    pub fn network(&self) -> &Network {
        &self.0
    }
}

/// Snapshot of all meta-classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSnapshot {
    pub bases: Vec<Parameters>,
    pub head: Parameters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaClassifier {
    bases: Vec<FrozenBase>,
    head: Network,
    concat_source: ConcatSource,
}

impl MetaClassifier {
    /// Builds the classifier with a He-initialized head.
    pub fn new(bases: Vec<Network>, concat_source: ConcatSource, head_seed: u64) -> Result<Self> {
        let head_config = Self::head_config(&bases, concat_source)?;
        let head = Network::init(head_config, head_seed)?;
        Ok(Self {
            bases: bases.into_iter().map(FrozenBase).collect(),
            head,
            concat_source,
        })
    }

    /// The head: flatten then dense from the concatenation width to C.
    pub fn head_config(bases: &[Network], concat_source: ConcatSource) -> Result<NetworkConfig> {
        let Some(first) = bases.first() else {
            return Err(Error::Config("meta-classifier needs at least one base".into()));
        };
        let classes = first.config.num_classes;
        let mut width = 0;
        for (k, b) in bases.iter().enumerate() {
            if b.config.input_shape != first.config.input_shape {
                return Err(Error::Config(format!(
                    "base {k} input shape {:?} differs from base 0 {:?}",
                    b.config.input_shape, first.config.input_shape
                )));
            }
            if b.config.num_classes != classes {
                return Err(Error::Config(format!(
                    "base {k} predicts {} classes, base 0 predicts {classes}",
                    b.config.num_classes
                )));
            }
            width += match concat_source {
                ConcatSource::Probabilities => classes,
                ConcatSource::Features => b.config.feature_dim()?,
            };
        }
        Ok(NetworkConfig {
            input_shape: (1, 1, width),
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: classes }],
            num_classes: classes,
        })
    }

    /// Replaces the head parameters; the width must match the concatenation.
    pub fn with_head(mut self, head: Parameters) -> Result<Self> {
        let expected = build_network(&self.head.config, 0)?;
        if !expected.same_structure(&head) {
            return Err(Error::Config(format!(
                "head parameters do not fit a {}-wide concatenation",
                self.head_width()
            )));
        }
        self.head.params = head;
        Ok(self)
    }

    pub fn bases(&self) -> &[FrozenBase] {
        &self.bases
    }

    pub fn head(&self) -> &Network {
        &self.head
    }

    pub fn concat_source(&self) -> ConcatSource {
        self.concat_source
    }

    pub fn num_classes(&self) -> usize {
        self.head.config.num_classes
    }

    pub fn head_width(&self) -> usize {
        self.head.config.input_shape.2
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.bases[0].0.config.input_shape
    }

    /// Each base's output for the batch, in base order.
    pub fn base_outputs(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let source = self.concat_source;
        self.bases
            .par_iter()
            .map(|b| {
                let trace = b.0.forward(batch)?;
                match source {
                    ConcatSource::Probabilities => softmax(&trace.logits),
                    ConcatSource::Features => Ok(trace.features),
                }
            })
            .collect()
    }

    /// `[N, head_width]` concatenation of base outputs.
    pub fn concat_inputs(&self, batch: &Tensor) -> Result<Tensor> {
        let outputs = self.base_outputs(batch)?;
        concat_columns(&outputs)
    }

    /// Class distribution for an image batch.
    pub fn meta_forward(&self, batch: &Tensor) -> Result<Tensor> {
        let x = self.concat_inputs(batch)?;
        let n = x.batch();
        let width = x.row_len();
        let x = x.reshape(vec![n, 1, 1, width])?;
        self.head.predict_proba(&x)
    }

    pub fn snapshot(&self) -> MetaSnapshot {
        MetaSnapshot {
            bases: self.bases.iter().map(|b| b.0.params.clone()).collect(),
            head: self.head.params.clone(),
        }
    }
}

/// Joins `[N, w_k]` matrices side by side.
pub fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::validation("nothing to concatenate"));
    };
    let n = first.batch();
    for (k, p) in parts.iter().enumerate() {
        if p.rank() != 2 || p.batch() != n {
            return Err(Error::dim(format!("concat part {k}"), ["N", "w"], p.shape()));
        }
    }
    let width: usize = parts.iter().map(Tensor::row_len).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![n, width], data)
}

/// Head parameters whose logit for class c is the mean probability of c
/// across the K bases. Requires probability concatenation.
pub fn block_average_head(num_bases: usize, num_classes: usize) -> Parameters {
    let width = num_bases * num_classes;
    let mut kernel = Tensor::zeros(&[width, num_classes]);
    for k in 0..num_bases {
        for c in 0..num_classes {
            kernel.data_mut()[(k * num_classes + c) * num_classes + c] = 1.0 / num_bases as f64;
        }
    }
    Parameters::from_entries(vec![
        crate::netcore::ParamTensor {
            name: "layer1.kernel".into(),
            value: kernel,
        },
        crate::netcore::ParamTensor {
            name: "layer1.bias".into(),
            value: Tensor::zeros(&[num_classes]),
        },
    ])
}

/// True iff every base tensor is bit-identical between the snapshots. Head
/// parameters are not compared.
pub fn verify_frozen(before: &MetaSnapshot, after: &MetaSnapshot) -> Result<bool> {
    if before.bases.len() != after.bases.len() {
        return Err(Error::validation(format!(
            "snapshots hold {} and {} bases",
            before.bases.len(),
            after.bases.len()
        )));
    }
    for (k, (a, b)) in before.bases.iter().zip(&after.bases).enumerate() {
        if !a.same_structure(b) {
            return Err(Error::validation(format!("base {k} structure differs between snapshots")));
        }
    }
    Ok(before.bases.iter().zip(&after.bases).all(|(a, b)| a.bit_eq(b)))
}
