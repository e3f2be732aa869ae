//! A small feed-forward convolutional network engine with exact analytic
//! gradients.
//!
//! Networks are a declarative stack of [`LayerSpec`]s over NHWC image
//! batches. [`build_network`] initializes [`Parameters`] deterministically
//! from a seed, [`Network::forward`] produces a [`ForwardTrace`] that caches
//! every intermediate activation, and [`Network::backward`] pulls a logit
//! gradient back through the cached trace.

mod gradcheck;
pub(crate) mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use layers::ConvGeometry;

pub use gradcheck::{check_parameters, gradient_check, relative_error, CheckReport, ParamCheck, RELATIVE_FLOOR, STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    GlobalAvgPool,
    Dense {
        units: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn size(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(n) => n,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { h, w, c } => vec![h, w, c],
            ActShape::Flat(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl NetworkConfig {
    /// The default base architecture: 3×3 stride-2 conv + relu blocks, a
    /// flatten, a dense feature layer with relu and a dense logit layer.
    pub fn small_convnet(
        input_shape: (usize, usize, usize),
        conv_filters: &[usize],
        feature_dim: usize,
        num_classes: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for &filters in conv_filters {
            layers.push(LayerSpec::Conv2d {
                filters,
                kernel: 3,
                stride: 2,
                padding: Padding::Same,
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { units: feature_dim });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense { units: num_classes });
        Self {
            input_shape,
            layers,
            num_classes,
        }
    }

    /// [`small_convnet`](Self::small_convnet) with 16 and 32 filters and a
    /// 64-wide feature layer.
    pub fn default_base(input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        Self::small_convnet(input_shape, &[16, 32], 64, num_classes)
    }

    /// Output shape of every layer, or a configuration error naming the
    /// first offending layer.
    pub fn layer_shapes(&self) -> Result<Vec<ActShape>> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!(
                "input shape {:?} must be positive",
                self.input_shape
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut shape = ActShape::Spatial { h, w, c };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |why: String| Error::Config(format!("layer {i} ({}): {why}", layer.name()));
            shape = match (layer, shape) {
                (
                    LayerSpec::Conv2d {
                        filters,
                        kernel,
                        stride,
                        padding,
                    },
                    ActShape::Spatial { h, w, .. },
                ) => {
                    if *filters == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad("filters, kernel and stride must be positive".into()));
                    }
                    let (oh, _) = ConvGeometry::axis(h, *kernel, *stride, *padding)
                        .ok_or_else(|| bad(format!("kernel {kernel} larger than input height {h}")))?;
                    let (ow, _) = ConvGeometry::axis(w, *kernel, *stride, *padding)
                        .ok_or_else(|| bad(format!("kernel {kernel} larger than input width {w}")))?;
                    ActShape::Spatial {
                        h: oh,
                        w: ow,
                        c: *filters,
                    }
                }
                (LayerSpec::Conv2d { .. }, s) => {
                    return Err(bad(format!("expects spatial input, got {:?}", s.dims())))
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::GlobalAvgPool, ActShape::Spatial { c, .. }) => ActShape::Flat(c),
                (LayerSpec::GlobalAvgPool, s) => {
                    return Err(bad(format!("expects spatial input, got {:?}", s.dims())))
                }
                (LayerSpec::Flatten, s) => ActShape::Flat(s.size()),
                (LayerSpec::Dense { units }, ActShape::Flat(_)) => {
                    if *units == 0 {
                        return Err(bad("units must be positive".into()));
                    }
                    ActShape::Flat(*units)
                }
                (LayerSpec::Dense { .. }, s) => {
                    return Err(bad(format!(
                        "expects flat input, got {:?}; insert flatten or global_avg_pool",
                        s.dims()
                    )))
                }
            };
            out.push(shape);
        }
        match (self.layers.last(), out.last()) {
            (Some(LayerSpec::Dense { units }), Some(_)) if *units == self.num_classes => Ok(out),
            (Some(last), _) => Err(Error::Config(format!(
                "layer {} ({}): final layer must be dense with {} units",
                self.layers.len() - 1,
                last.name(),
                self.num_classes
            ))),
            (None, _) => Err(Error::Config("network has no layers".into())),
        }
    }

    /// Width of the penultimate activation, the input of the logit layer.
    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(match shapes.len() {
            1 => self.input_shape.0 * self.input_shape.1 * self.input_shape.2,
            n => shapes[n - 2].size(),
        })
    }

    fn input_act(&self) -> ActShape {
        let (h, w, c) = self.input_shape;
        ActShape::Spatial { h, w, c }
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
}

/// Learnable tensors ordered by layer index (kernel before bias).
///
/// Gradients share the same representation; see [`Gradients`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    entries: Vec<ParamTensor>,
}

pub type Gradients = Parameters;

impl Parameters {
    pub fn from_entries(entries: Vec<ParamTensor>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamTensor] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<ParamTensor> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamTensor {
                    name: e.name.clone(),
                    value: Tensor::zeros(e.value.shape()),
                })
                .collect(),
        }
    }

    pub fn same_structure(&self, other: &Parameters) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn bit_eq(&self, other: &Parameters) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Parameters) -> Result<()> {
        self.check_structure(other, "gradient accumulation")?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for e in &mut self.entries {
            for x in e.value.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Largest absolute element-wise difference over all tensors.
    pub fn max_abs_diff(&self, other: &Parameters) -> Result<f64> {
        self.check_structure(other, "parameter comparison")?;
        let mut worst: f64 = 0.0;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            worst = worst.max(a.value.max_abs_diff(&b.value)?);
        }
        Ok(worst)
    }

    pub(crate) fn check_structure(&self, other: &Parameters, context: &str) -> Result<()> {
        if self.same_structure(other) {
            return Ok(());
        }
        let describe = |p: &Parameters| {
            p.entries
                .iter()
                .map(|e| format!("{}{:?}", e.name, e.value.shape()))
                .collect::<Vec<_>>()
        };
        Err(Error::dim(context, describe(self), describe(other)))
    }
}

fn kernel_name(layer: usize) -> String {
    format!("layer{layer}.kernel")
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Initializes parameters: He-uniform kernels, zero biases. The draw order
/// follows layer order, so `(config, seed)` fixes every bit.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Parameters> {
    let shapes = config.layer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut input = config.input_act();
    for (i, layer) in config.layers.iter().enumerate() {
        let (kshape, fan_in, units) = match (layer, input) {
            (LayerSpec::Conv2d { filters, kernel, .. }, ActShape::Spatial { c, .. }) => {
                (vec![*kernel, *kernel, c, *filters], kernel * kernel * c, *filters)
            }
            (LayerSpec::Dense { units }, ActShape::Flat(n)) => (vec![n, *units], n, *units),
            _ => {
                input = shapes[i];
                continue;
            }
        };
        let limit = (6.0 / fan_in as f64).sqrt();
        let len: usize = kshape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
        entries.push(ParamTensor {
            name: kernel_name(i),
            value: Tensor::new(kshape, data)?,
        });
        entries.push(ParamTensor {
            name: bias_name(i),
            value: Tensor::zeros(&[units]),
        });
        input = shapes[i];
    }
    Ok(Parameters { entries })
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[N, C]`.
    pub logits: Tensor,
    /// `[N, feature_dim]`, the input of the logit layer.
    pub features: Tensor,
    /// `activations[i]` is the input of layer `i`; the last entry is the
    /// network output.
    pub activations: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.logits.batch()
    }
}

/// A network configuration together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Parameters,
}

impl Network {
    pub fn new(config: NetworkConfig, params: Parameters) -> Result<Self> {
        let expected = build_network_structure(&config)?;
        params.check_structure(&expected, "network parameters")?;
        Ok(Self { config, params })
    }

    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = build_network(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardTrace> {
        forward(&self.config, &self.params, batch)
    }

    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Tensor) -> Result<Gradients> {
        backward(&self.config, &self.params, trace, dlogits)
    }

    /// Class probabilities for an image batch.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        softmax(&self.forward(batch)?.logits)
    }
}

fn build_network_structure(config: &NetworkConfig) -> Result<Parameters> {
    // Shapes only; values are irrelevant.
    let mut p = build_network(config, 0)?;
    for e in &mut p.entries {
        e.value = Tensor::zeros(e.value.shape());
    }
    Ok(p)
}

/// Cursor over a parameter set that hands out the kernel and bias of each
/// parametrized layer in order.
struct ParamCursor<'a> {
    entries: &'a [ParamTensor],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    fn take(&mut self, layer: usize) -> Result<(&'a Tensor, &'a Tensor)> {
        let pair = self.entries.get(self.pos..self.pos + 2).ok_or_else(|| {
            Error::State(format!("parameters exhausted before layer {layer}"))
        })?;
        if pair[0].name != kernel_name(layer) || pair[1].name != bias_name(layer) {
            return Err(Error::State(format!(
                "layer {layer} expects {}/{}, found {}/{}",
                kernel_name(layer),
                bias_name(layer),
                pair[0].name,
                pair[1].name
            )));
        }
        self.pos += 2;
        Ok((&pair[0].value, &pair[1].value))
    }
}

fn conv_geometry(spec: &LayerSpec, input: ActShape, output: ActShape) -> ConvGeometry {
    let (
        LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            ..
        },
        ActShape::Spatial {
            h: in_h,
            w: in_w,
            c: in_c,
        },
        ActShape::Spatial {
            h: out_h,
            w: out_w,
            c: out_c,
        },
    ) = (spec, input, output)
    else {
        unreachable!("conv geometry requested for a non-conv layer");
    };
    let (_, pad_top) = ConvGeometry::axis(in_h, *kernel, *stride, *padding).unwrap();
    let (_, pad_left) = ConvGeometry::axis(in_w, *kernel, *stride, *padding).unwrap();
    ConvGeometry {
        in_h,
        in_w,
        in_c,
        out_h,
        out_w,
        out_c,
        kernel: *kernel,
        stride: *stride,
        pad_top,
        pad_left,
    }
}

fn batched(n: usize, shape: ActShape) -> Vec<usize> {
    let mut dims = vec![n];
    dims.extend(shape.dims());
    dims
}

/// Runs the network on an `[N, H, W, C]` batch.
pub fn forward(config: &NetworkConfig, params: &Parameters, batch: &Tensor) -> Result<ForwardTrace> {
    let shapes = config.layer_shapes()?;
    let (h, w, c) = config.input_shape;
    if batch.rank() != 4 || batch.shape()[1..] != [h, w, c] {
        return Err(Error::dim(
            "network input",
            ["N", &h.to_string(), &w.to_string(), &c.to_string()],
            batch.shape(),
        ));
    }
    let n = batch.batch();
    let mut cursor = ParamCursor {
        entries: params.entries(),
        pos: 0,
    };
    let mut activations = Vec::with_capacity(config.layers.len() + 1);
    activations.push(batch.clone());
    let mut in_shape = config.input_act();
    for (i, layer) in config.layers.iter().enumerate() {
        let out_shape = shapes[i];
        let x = activations.last().expect("input pushed above").data();
        let out = match layer {
            LayerSpec::Conv2d { .. } => {
                let (k, b) = cursor.take(i)?;
                let g = conv_geometry(layer, in_shape, out_shape);
                layers::conv2d_forward(&g, n, x, k.data(), b.data())
            }
            LayerSpec::Dense { units } => {
                let (k, b) = cursor.take(i)?;
                layers::dense_forward(n, in_shape.size(), *units, x, k.data(), b.data())
            }
            LayerSpec::Relu => layers::relu_forward(x),
            LayerSpec::GlobalAvgPool => {
                let ActShape::Spatial { h, w, c } = in_shape else {
                    unreachable!("validated by layer_shapes")
                };
                layers::gap_forward(n, h * w, c, x)
            }
            LayerSpec::Flatten => x.to_vec(),
        };
        activations.push(Tensor::new(batched(n, out_shape), out)?);
        in_shape = out_shape;
    }
    if cursor.pos != params.len() {
        return Err(Error::State(format!(
            "{} unused parameter tensors",
            params.len() - cursor.pos
        )));
    }
    let logits = activations.last().expect("non-empty").clone();
    let penultimate = &activations[activations.len() - 2];
    let features = penultimate.clone().reshape(vec![n, penultimate.row_len()])?;
    Ok(ForwardTrace {
        logits,
        features,
        activations,
    })
}

/// Gradient of `sum(logits * dlogits)` with respect to every parameter.
pub fn backward(
    config: &NetworkConfig,
    params: &Parameters,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<Gradients> {
    if dlogits.shape() != trace.logits.shape() {
        return Err(Error::dim("dlogits", trace.logits.shape(), dlogits.shape()));
    }
    let shapes = config.layer_shapes()?;
    if trace.activations.len() != config.layers.len() + 1 {
        return Err(Error::State(format!(
            "trace holds {} activations, network has {} layers",
            trace.activations.len(),
            config.layers.len()
        )));
    }
    let n = trace.batch();
    let mut in_shapes = vec![config.input_act()];
    in_shapes.extend_from_slice(&shapes[..shapes.len() - 1]);

    // Parameter slots in forward order; filled back to front.
    let param_layers: Vec<usize> = config
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_params())
        .map(|(i, _)| i)
        .collect();
    if param_layers.len() * 2 != params.len() {
        return Err(Error::State(format!(
            "network expects {} parameter tensors, got {}",
            param_layers.len() * 2,
            params.len()
        )));
    }
    let mut grads: Vec<Option<ParamTensor>> = vec![None; params.len()];
    let mut slot = params.len();

    let mut upstream = dlogits.data().to_vec();
    for (i, layer) in config.layers.iter().enumerate().rev() {
        let x = trace.activations[i].data();
        let in_shape = in_shapes[i];
        upstream = match layer {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                slot -= 2;
                let kernel = &params.entries()[slot];
                let bias = &params.entries()[slot + 1];
                if kernel.name != kernel_name(i) || bias.name != bias_name(i) {
                    return Err(Error::State(format!(
                        "layer {i} expects {}, found {}",
                        kernel_name(i),
                        kernel.name
                    )));
                }
                let (dx, dk, db) = match layer {
                    LayerSpec::Conv2d { .. } => {
                        let g = conv_geometry(layer, in_shape, shapes[i]);
                        layers::conv2d_backward(&g, n, x, kernel.value.data(), &upstream)
                    }
                    LayerSpec::Dense { units } => layers::dense_backward(
                        n,
                        in_shape.size(),
                        *units,
                        x,
                        kernel.value.data(),
                        &upstream,
                    ),
                    _ => unreachable!(),
                };
                grads[slot] = Some(ParamTensor {
                    name: kernel.name.clone(),
                    value: Tensor::new(kernel.value.shape().to_vec(), dk)?,
                });
                grads[slot + 1] = Some(ParamTensor {
                    name: bias.name.clone(),
                    value: Tensor::new(bias.value.shape().to_vec(), db)?,
                });
                dx
            }
            LayerSpec::Relu => layers::relu_backward(x, &upstream),
            LayerSpec::GlobalAvgPool => {
                let ActShape::Spatial { h, w, c } = in_shape else {
                    unreachable!("validated by layer_shapes")
                };
                layers::gap_backward(n, h * w, c, &upstream)
            }
            LayerSpec::Flatten => upstream,
        };
    }
    Ok(Parameters {
        entries: grads.into_iter().map(|g| g.expect("every slot filled")).collect(),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::dim("softmax input rank", 2, logits.rank()));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax input contains NaN or infinity".into()));
    }
    let mut out = logits.clone();
    let c = logits.shape()[1];
    if c == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}
