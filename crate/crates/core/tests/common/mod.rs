//! Independent reference implementations used by the property and
//! acceptance suites. Everything here is written with plain loops in f64
//! and only reads weights through the public API.

#![allow(dead_code)]

pub mod checks;

use recos::network::{LayerKind, LossKind, Network};
use recos::Rectifier;

pub fn rectify(r: Rectifier, v: f64) -> f64 {
    match r {
        Rectifier::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        Rectifier::Relu => v.max(0.0),
        Rectifier::PRelu { slope } => {
            if v >= 0.0 {
                v
            } else {
                f64::from(slope) * v
            }
        }
        Rectifier::TRelu { phi } => {
            let phi = f64::from(phi);
            if v >= phi {
                (v - phi) / (1.0 - phi)
            } else {
                0.0
            }
        }
    }
}

/// Branch taken by the rectifier at `v`, for detecting kink crossings.
fn side(r: Rectifier, v: f64) -> bool {
    match r {
        Rectifier::Sigmoid => true,
        Rectifier::Relu | Rectifier::PRelu { .. } => v >= 0.0,
        Rectifier::TRelu { phi } => v >= f64::from(phi),
    }
}

/// Parameters of one layer copied to f64.
#[derive(Clone, Debug)]
pub struct RefLayer {
    pub kind: LayerKind,
    pub rectifier: Rectifier,
    pub anchors: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RefNet {
    pub input: Vec<usize>,
    pub layers: Vec<RefLayer>,
}

impl RefNet {
    pub fn from_network(net: &Network) -> Self {
        RefNet {
            input: net.input_shape().dims().to_vec(),
            layers: net
                .layers()
                .iter()
                .map(|l| RefLayer {
                    kind: l.spec.kind,
                    rectifier: l.spec.rectifier,
                    anchors: l.bank().anchors(),
                    dim: l.bank().dim(),
                    weights: l.bank().weights().iter().map(|&v| f64::from(v)).collect(),
                    bias: l.bank().bias().iter().map(|&v| f64::from(v)).collect(),
                })
                .collect(),
        }
    }

    /// Mutable reference to parameter `i` in (layer, weights then bias) order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.weights.len() {
                return &mut l.weights[i];
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return &mut l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Output of a reference forward pass plus the discrete path it took
/// (rectifier branches and pooling winners).
pub struct RefForward {
    pub output: Vec<f64>,
    pub path: Vec<usize>,
}

/// Direct sliding-window forward pass.
pub fn forward(net: &RefNet, image: &[f64]) -> RefForward {
    let mut shape = net.input.clone();
    let mut x = image.to_vec();
    let mut path = Vec::new();
    for layer in &net.layers {
        match layer.kind {
            LayerKind::Conv {
                filters,
                window,
                stride,
                pool,
            } => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut resp = vec![0.0; filters * oh * ow];
                for k in 0..filters {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            let mut sum = 0.0;
                            for ch in 0..c {
                                for dy in 0..window {
                                    for dx in 0..window {
                                        let v = x[ch * h * w + (oy * stride + dy) * w + ox * stride + dx];
                                        let wi = k * layer.dim + ch * window * window + dy * window + dx;
                                        acc += layer.weights[wi] * v;
                                        sum += v;
                                    }
                                }
                            }
                            let pre = acc + layer.bias[k] * sum / layer.dim as f64;
                            path.push(usize::from(side(layer.rectifier, pre)));
                            resp[(k * oh + oy) * ow + ox] = rectify(layer.rectifier, pre);
                        }
                    }
                }
                if pool {
                    let (ph, pw) = (oh / 2, ow / 2);
                    let mut out = vec![0.0; filters * ph * pw];
                    for k in 0..filters {
                        for i in 0..ph {
                            for j in 0..pw {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                                    let v = resp[(k * oh + 2 * i + dy) * ow + 2 * j + dx];
                                    if v > best {
                                        best = v;
                                        arg = q;
                                    }
                                }
                                path.push(arg);
                                out[(k * ph + i) * pw + j] = best;
                            }
                        }
                    }
                    x = out;
                    shape = vec![filters, ph, pw];
                } else {
                    x = resp;
                    shape = vec![filters, oh, ow];
                }
            }
            LayerKind::FullyConnected { units } => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                let out: Vec<f64> = (0..units)
                    .map(|k| {
                        let pre: f64 = (0..layer.dim).map(|n| layer.weights[k * layer.dim + n] * x[n]).sum::<f64>()
                            + layer.bias[k] * mean;
                        path.push(usize::from(side(layer.rectifier, pre)));
                        rectify(layer.rectifier, pre)
                    })
                    .collect();
                x = out;
                shape = vec![units];
            }
        }
    }
    RefForward { output: x, path }
}

pub fn loss(d: &[f64], target: usize, kind: LossKind) -> f64 {
    match kind {
        LossKind::CrossEntropy => {
            let m = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = d.iter().map(|v| (v - m).exp()).sum();
            -(d[target] - m - z.ln())
        }
        LossKind::MeanSquaredError => d
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let t = if i == target { 1.0 } else { 0.0 };
                0.5 * (v - t) * (v - t)
            })
            .sum(),
    }
}

/// Central-difference gradient of the loss over every parameter. Entries
/// whose ±h evaluations take different forward paths are `None`.
pub fn finite_difference(net: &RefNet, image: &[f64], target: usize, kind: LossKind, h: f64) -> Vec<Option<f64>> {
    let mut work = net.clone();
    (0..net.param_count())
        .map(|i| {
            let orig = *work.param_mut(i);
            *work.param_mut(i) = orig + h;
            let plus = forward(&work, image);
            *work.param_mut(i) = orig - h;
            let minus = forward(&work, image);
            *work.param_mut(i) = orig;
            (plus.path == minus.path)
                .then(|| (loss(&plus.output, target, kind) - loss(&minus.output, target, kind)) / (2.0 * h))
        })
        .collect()
}

/// Naive backward pass of a single conv layer without pooling: given the
/// gradient of the loss with respect to the rectified `K×OH×OW` response,
/// returns (weight gradient, mean-coefficient gradient, input gradient).
pub fn conv_backward(
    layer: &RefLayer,
    input: &[f64],
    shape: [usize; 3],
    grad_response: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let LayerKind::Conv { window, stride, .. } = layer.kind else {
        panic!("conv layer expected");
    };
    let [c, h, w] = shape;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let n = layer.dim as f64;
    let mut dw = vec![0.0; layer.weights.len()];
    let mut db = vec![0.0; layer.anchors];
    let mut dx = vec![0.0; input.len()];
    for k in 0..layer.anchors {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = |ch: usize, dy: usize, dx: usize| ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                let mut pre = 0.0;
                let mut sum = 0.0;
                for ch in 0..c {
                    for dy in 0..window {
                        for ddx in 0..window {
                            let v = input[at(ch, dy, ddx)];
                            pre += layer.weights[k * layer.dim + (ch * window + dy) * window + ddx] * v;
                            sum += v;
                        }
                    }
                }
                pre += layer.bias[k] * sum / n;
                let slope = {
                    let e = 1e-7;
                    match layer.rectifier {
                        Rectifier::Sigmoid => {
                            let s = rectify(layer.rectifier, pre);
                            s * (1.0 - s)
                        }
                        r => (rectify(r, pre + e) - rectify(r, pre)) / e,
                    }
                };
                let g = grad_response[(k * oh + oy) * ow + ox] * slope;
                db[k] += g * sum / n;
                for ch in 0..c {
                    for dy in 0..window {
                        for ddx in 0..window {
                            let wi = k * layer.dim + (ch * window + dy) * window + ddx;
                            dw[wi] += g * input[at(ch, dy, ddx)];
                            dx[at(ch, dy, ddx)] += g * (layer.weights[wi] + layer.bias[k] / n);
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}
