//! Cascades of rectified-correlation layers: convolutional layers (a shared
//! anchor bank applied at every spatial position, rectified, then max
//! pooled) and fully connected layers (one bank, rectified).

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{extract_patches, gemm, max_pool, MatRef, Patches, Shape, Tensor};
use crate::recos::{AnchorBank, Rectifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        window: usize,
        stride: usize,
        /// 2×2 max pooling with stride 2 after rectification.
        pool: bool,
    },
    FullyConnected {
        units: usize,
    },
}

impl LayerKind {
    pub fn conv(filters: usize, window: usize) -> Self {
        LayerKind::Conv {
            filters,
            window,
            stride: 1,
            pool: true,
        }
    }

    pub fn fc(units: usize) -> Self {
        LayerKind::FullyConnected { units }
    }

    pub fn width(&self) -> usize {
        match *self {
            LayerKind::Conv { filters, .. } => filters,
            LayerKind::FullyConnected { units } => units,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub rectifier: Rectifier,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, rectifier: Rectifier) -> Self {
        LayerSpec { kind, rectifier }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub(crate) bank: AnchorBank,
    input_shape: Shape,
    /// Rectified map before pooling (equal to `output_shape` without pooling).
    response_shape: Shape,
    output_shape: Shape,
}

impl Layer {
    pub fn bank(&self) -> &AnchorBank {
        &self.bank
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn response_shape(&self) -> &Shape {
        &self.response_shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.output_shape
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.spec.kind, LayerKind::Conv { .. })
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// An ordered cascade of layers mapping an input image to a decision vector.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Shape,
    /// Changes whenever weights change; ties forward traces to a weight state.
    stamp: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.input_shape == other.input_shape
    }
}

impl Network {
    /// Chains `specs` starting from `input_shape`, with all-zero banks.
    pub fn new(input_shape: Shape, specs: &[LayerSpec]) -> Result<Self> {
        let names: Vec<String> = (1..=specs.len())
            .map(|i| if i == specs.len() { "Output".to_string() } else { format!("L{i}") })
            .collect();
        Network::with_names(input_shape, specs, names)
    }

    pub fn with_names(input_shape: Shape, specs: &[LayerSpec], names: Vec<String>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        if names.len() != specs.len() {
            return Err(Error::invalid("one name per layer is required"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.clone();
        for (spec, name) in specs.iter().zip(names) {
            if spec.kind.width() == 0 {
                return Err(Error::invalid(format!("layer {name} has zero width")));
            }
            let (bank, response_shape, output_shape) = match spec.kind {
                LayerKind::Conv {
                    filters,
                    window,
                    stride,
                    pool,
                } => {
                    let (c, h, w) = shape.chw().ok_or_else(|| {
                        Error::shape("Network::new", format!("C×H×W input to conv layer {name}"), &shape)
                    })?;
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(Error::invalid(format!(
                            "conv layer {name}: window {window} / stride {stride} do not fit input {shape}"
                        )));
                    }
                    let oh = (h - window) / stride + 1;
                    let ow = (w - window) / stride + 1;
                    let response = Shape::new([filters, oh, ow])?;
                    let out = if pool {
                        if oh % 2 != 0 || ow % 2 != 0 {
                            return Err(Error::invalid(format!(
                                "conv layer {name}: pooled map {oh}×{ow} has odd size"
                            )));
                        }
                        Shape::new([filters, oh / 2, ow / 2])?
                    } else {
                        response.clone()
                    };
                    (AnchorBank::zeros(filters, c * window * window), response, out)
                }
                LayerKind::FullyConnected { units } => {
                    let out = Shape::new([units])?;
                    (AnchorBank::zeros(units, shape.len()), out.clone(), out)
                }
            };
            layers.push(Layer {
                name,
                spec: *spec,
                bank,
                input_shape: shape.clone(),
                response_shape,
                output_shape: output_shape.clone(),
            });
            shape = output_shape;
        }
        Ok(Network {
            layers,
            input_shape,
            stamp: fresh_stamp(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().expect("non-empty").spec.kind.width()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Mutable access to a layer's bank. Invalidates earlier forward traces.
    pub fn bank_mut(&mut self, l: usize) -> &mut AnchorBank {
        self.stamp = fresh_stamp();
        &mut self.layers[l].bank
    }

    /// Replaces a layer's bank; dimensions must match.
    pub fn set_bank(&mut self, l: usize, bank: AnchorBank) -> Result<()> {
        let cur = &self.layers[l].bank;
        if (cur.anchors(), cur.dim()) != (bank.anchors(), bank.dim()) {
            return Err(Error::shape(
                "Network::set_bank",
                format!("{}×{}", cur.anchors(), cur.dim()),
                format!("{}×{}", bank.anchors(), bank.dim()),
            ));
        }
        *self.bank_mut(l) = bank;
        Ok(())
    }

    /// Same architecture (layer kinds, widths and shapes), weights ignored.
    pub fn same_architecture(&self, other: &Network) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.spec.kind == b.spec.kind && a.input_shape == b.input_shape)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.bank.weights().len() + l.bank.bias().len())
            .sum()
    }

    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Runs layers `0..upto` and returns their outputs `x_1..x_upto`.
    pub fn forward_prefix(&self, image: &Tensor, upto: usize) -> Result<Activations> {
        self.check_input(image)?;
        let upto = upto.min(self.layers.len());
        let mut acts = Activations {
            stamp: self.stamp,
            representations: Vec::with_capacity(upto + 1),
            caches: Vec::with_capacity(upto),
        };
        acts.representations.push(image.clone());
        for layer in &self.layers[..upto] {
            let x = acts.representations.last().expect("input present");
            let (out, cache) = layer_forward(layer, x)?;
            acts.representations.push(out);
            acts.caches.push(cache);
        }
        Ok(acts)
    }

    /// Full forward pass: decision vector plus every intermediate
    /// representation.
    pub fn forward(&self, image: &Tensor) -> Result<(DecisionVector, Activations)> {
        let acts = self.forward_prefix(image, self.layers.len())?;
        let d = DecisionVector(acts.representations.last().expect("output present").data().to_vec());
        Ok((d, acts))
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.forward(image)?.0.decode())
    }

    /// Predicted class for every image, evaluated in parallel.
    pub fn predict_all(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        images.par_iter().map(|img| self.predict(img)).collect()
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != &self.input_shape {
            return Err(Error::shape("Network::forward", &self.input_shape, image.shape()));
        }
        Ok(())
    }
}

/// LeNet-5: two 5×5 convolutional layers (6 and 16 maps, each max pooled)
/// followed by fully connected layers of 120, 84 and 10 units, on a 1×32×32
/// input. Banks start at zero; use an initializer before training.
pub fn build_lenet5(rectifier: Rectifier) -> Network {
    let specs = [
        LayerSpec::new(LayerKind::conv(6, 5), rectifier),
        LayerSpec::new(LayerKind::conv(16, 5), rectifier),
        LayerSpec::new(LayerKind::fc(120), rectifier),
        LayerSpec::new(LayerKind::fc(84), rectifier),
        LayerSpec::new(LayerKind::fc(10), rectifier),
    ];
    let names = ["S2", "S4", "C5", "F6", "Output"].map(String::from).to_vec();
    Network::with_names(Shape::new([1, 32, 32]).expect("static shape"), &specs, names)
        .expect("LeNet-5 shapes chain")
}

/// Per-layer state kept from a forward pass for backpropagation and
/// analysis.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    /// Receptive fields of the layer input (conv layers only).
    pub patches: Option<Patches>,
    /// Input mean per patch (conv) or of the whole input (one entry, FC).
    pub means: Vec<f32>,
    /// Pre-rectification responses, `K×S` for conv and `K` for FC.
    pub pre: Vec<f32>,
    /// Rectified responses before pooling, same layout as `pre`.
    pub rectified: Vec<f32>,
    pub argmax: Option<Vec<usize>>,
}

/// Representations `x_0..x_l` from a forward pass, plus cached state.
#[derive(Debug, Clone)]
pub struct Activations {
    stamp: u64,
    /// `x_0` (the input) through the last computed layer output; conv layer
    /// outputs are pooled.
    pub representations: Vec<Tensor>,
    pub(crate) caches: Vec<LayerCache>,
}

impl Activations {
    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn layers_computed(&self) -> usize {
        self.caches.len()
    }

    /// Raw responses of layer `l` before rectification (`K×S` for conv).
    pub fn pre_activations(&self, l: usize) -> &[f32] {
        &self.caches[l].pre
    }

    /// Rectified responses of layer `l` before pooling.
    pub fn rectified(&self, l: usize) -> &[f32] {
        &self.caches[l].rectified
    }
}

fn layer_forward(layer: &Layer, x: &Tensor) -> Result<(Tensor, LayerCache)> {
    let bank = &layer.bank;
    let rect = layer.spec.rectifier;
    match layer.spec.kind {
        LayerKind::Conv {
            window,
            stride,
            pool,
            ..
        } => {
            let patches = extract_patches(x, window, stride)?;
            let n = patches.patch_len();
            let s = patches.count();
            let k = bank.anchors();
            let means: Vec<f32> = patches.iter().map(|p| p.iter().sum::<f32>() / n as f32).collect();
            let mut pre = vec![0.0; k * s];
            gemm(
                MatRef::row_major(bank.weights(), k, n),
                MatRef::row_major(patches.as_matrix(), s, n).t(),
                0.0,
                &mut pre,
            );
            for (row, &a0) in pre.chunks_exact_mut(s).zip(bank.bias()) {
                if a0 != 0.0 {
                    for (v, &mu) in row.iter_mut().zip(&means) {
                        *v += a0 * mu;
                    }
                }
            }
            let rectified = rect.apply_slice(&pre);
            let response = Tensor::from_vec(layer.response_shape.clone(), rectified.clone())?;
            let (out, argmax) = if pool {
                let pooled = max_pool(&response)?;
                (pooled.output, Some(pooled.argmax))
            } else {
                (response, None)
            };
            Ok((
                out,
                LayerCache {
                    patches: Some(patches),
                    means,
                    pre,
                    rectified,
                    argmax,
                },
            ))
        }
        LayerKind::FullyConnected { .. } => {
            let input = x.data();
            let n = input.len();
            let k = bank.anchors();
            let mean = input.iter().sum::<f32>() / n as f32;
            let mut pre = bank.bias().iter().map(|&a0| a0 * mean).collect::<Vec<f32>>();
            gemm(
                MatRef::row_major(bank.weights(), k, n),
                MatRef::row_major(input, n, 1),
                1.0,
                &mut pre,
            );
            let rectified = rect.apply_slice(&pre);
            let out = Tensor::from_vec(layer.output_shape.clone(), rectified.clone())?;
            Ok((
                out,
                LayerCache {
                    patches: None,
                    means: vec![mean],
                    pre,
                    rectified,
                    argmax: None,
                },
            ))
        }
    }
}

/// Network output `d = (d_1..d_C)`; larger means more likely.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector(pub Vec<f32>);

impl DecisionVector {
    pub fn decode(&self) -> usize {
        decode(&self.0)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Index of the nearest one-hot vector, i.e. the argmax (lowest index wins
/// ties).
pub fn decode(d: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate().skip(1) {
        if v > d[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f32> {
    let mut t = vec![0.0; classes];
    t[class] = 1.0;
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// `−log softmax(d)_t`.
    #[default]
    CrossEntropy,
    /// `½‖d − t‖²`.
    MeanSquaredError,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::CrossEntropy => write!(f, "cross_entropy"),
            LossKind::MeanSquaredError => write!(f, "mse"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" | "mean_squared_error" => Ok(LossKind::MeanSquaredError),
            other => Err(Error::invalid(format!("unknown loss {other:?} (cross_entropy or mse)"))),
        }
    }
}

/// Loss against a one-hot target and its gradient with respect to `d`.
pub fn loss(d: &[f32], target: &[f32], kind: LossKind) -> Result<(f32, Vec<f32>)> {
    if d.len() != target.len() {
        return Err(Error::shape("loss", d.len(), target.len()));
    }
    let hot = target.iter().filter(|&&t| t == 1.0).count();
    if hot != 1 || target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!("loss target is not one-hot: {target:?}")));
    }
    match kind {
        LossKind::CrossEntropy => {
            let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = d.iter().map(|&v| f64::from(v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let t = target.iter().position(|&v| v == 1.0).expect("checked one-hot");
            let loss = (z.ln() - f64::from(d[t] - max)) as f32;
            let grad = exps
                .iter()
                .zip(target)
                .map(|(&e, &ti)| (e / z) as f32 - ti)
                .collect();
            Ok((loss, grad))
        }
        LossKind::MeanSquaredError => {
            let grad: Vec<f32> = d.iter().zip(target).map(|(a, b)| a - b).collect();
            let loss = 0.5 * grad.iter().map(|g| g * g).sum::<f32>();
            Ok((loss, grad))
        }
    }
}
