//! Backpropagation and minibatch SGD, plus the experiments built on them:
//! weak-supervision learning curves and per-layer anchor orientation change.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{align_output_nodes, unsupervised_accuracy, LabelMapping};
use crate::error::{Error, Result};
use crate::mnist::{stratified_subset, LabeledImage};
use crate::network::{loss, one_hot, Activations, LossKind, Network};
use crate::numerics::{fold_patches, gemm, max_unpool, norm, MatRef, Tensor};
use crate::recos::geodesic_angle;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Loss gradient for every weight and mean coefficient, layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.bank().weights().len()],
                    bias: vec![0.0; l.bank().bias().len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, f: f32) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= f);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Reverse-mode gradients for one sample. `activations` must come from
/// `net.forward` on the current weights.
pub fn backward(net: &Network, activations: &Activations, loss_grad: &[f32]) -> Result<Gradients> {
    Ok(backprop(net, activations, loss_grad, false)?.0)
}

/// Like [`backward`], also returning the gradient with respect to the input.
pub fn backward_with_input(net: &Network, activations: &Activations, loss_grad: &[f32]) -> Result<(Gradients, Tensor)> {
    let (grads, input) = backprop(net, activations, loss_grad, true)?;
    Ok((grads, Tensor::from_vec(net.input_shape().clone(), input)?))
}

fn backprop(net: &Network, activations: &Activations, loss_grad: &[f32], want_input: bool) -> Result<(Gradients, Vec<f32>)> {
    if activations.stamp() != net.stamp() {
        return Err(Error::StaleActivations(
            "network weights changed after the forward pass".into(),
        ));
    }
    if activations.layers_computed() != net.depth() {
        return Err(Error::StaleActivations(format!(
            "forward pass covered {} of {} layers",
            activations.layers_computed(),
            net.depth()
        )));
    }
    let out_len = net.layer(net.depth() - 1).output_shape().len();
    if loss_grad.len() != out_len {
        return Err(Error::shape("backward", out_len, loss_grad.len()));
    }

    let mut grads = Vec::with_capacity(net.depth());
    let mut g = loss_grad.to_vec();
    for l in (0..net.depth()).rev() {
        let layer = net.layer(l);
        let cache = &activations.caches[l];
        let bank = layer.bank();
        let rect = layer.spec.rectifier;
        let (k, n) = (bank.anchors(), bank.dim());

        let g_resp = match &cache.argmax {
            Some(argmax) => max_unpool(&g, argmax, layer.response_shape()).into_data(),
            None => g,
        };
        let g_pre: Vec<f32> = g_resp.iter().zip(&cache.pre).map(|(&gr, &p)| gr * rect.grad(p)).collect();

        let mut dw = vec![0.0; k * n];
        let db: Vec<f32>;
        let need_input = l > 0 || want_input;
        match &cache.patches {
            Some(patches) => {
                let s = patches.count();
                gemm(
                    MatRef::row_major(&g_pre, k, s),
                    MatRef::row_major(patches.as_matrix(), s, n),
                    0.0,
                    &mut dw,
                );
                db = g_pre
                    .chunks_exact(s)
                    .map(|row| row.iter().zip(&cache.means).map(|(a, b)| a * b).sum())
                    .collect();
                g = if need_input {
                    let mut dp = vec![0.0; s * n];
                    gemm(
                        MatRef::row_major(&g_pre, k, s).t(),
                        MatRef::row_major(bank.weights(), k, n),
                        0.0,
                        &mut dp,
                    );
                    if bank.bias().iter().any(|&b| b != 0.0) {
                        for (si, row) in dp.chunks_exact_mut(n).enumerate() {
                            let c: f32 = (0..k).map(|kk| g_pre[kk * s + si] * bank.bias()[kk]).sum::<f32>() / n as f32;
                            row.iter_mut().for_each(|v| *v += c);
                        }
                    }
                    fold_patches(&dp, layer.input_shape(), patches.window, patches.stride).into_data()
                } else {
                    Vec::new()
                };
            }
            None => {
                let x = activations.representations[l].data();
                gemm(MatRef::row_major(&g_pre, k, 1), MatRef::row_major(x, 1, n), 0.0, &mut dw);
                let mean = cache.means[0];
                db = g_pre.iter().map(|v| v * mean).collect();
                g = if need_input {
                    let mut dx = vec![0.0; n];
                    gemm(
                        MatRef::row_major(bank.weights(), k, n).t(),
                        MatRef::row_major(&g_pre, k, 1),
                        0.0,
                        &mut dx,
                    );
                    let c: f32 = g_pre.iter().zip(bank.bias()).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                    if c != 0.0 {
                        dx.iter_mut().for_each(|v| *v += c);
                    }
                    dx
                } else {
                    Vec::new()
                };
            }
        }
        grads.push(LayerGradient { weights: dw, bias: db });
    }
    grads.reverse();
    Ok((Gradients { layers: grads }, g))
}

/// Loss, correctness and gradients for one labeled sample.
pub fn sample_gradients(net: &Network, sample: &LabeledImage, kind: LossKind) -> Result<(f32, bool, Gradients)> {
    let (d, acts) = net.forward(&sample.pixels)?;
    let target = one_hot(sample.label as usize, net.class_count());
    let (value, grad) = loss(&d.0, &target, kind)?;
    let correct = d.decode() == sample.label as usize;
    Ok((value, correct, backward(net, &acts, &grad)?))
}

pub fn sample_loss(net: &Network, sample: &LabeledImage, kind: LossKind) -> Result<f32> {
    let d = net.forward(&sample.pixels)?.0;
    Ok(loss(&d.0, &one_hot(sample.label as usize, net.class_count()), kind)?.0)
}

/// `w ← w − lr·grad` on every parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, learning_rate: f32) {
    for (l, g) in grads.layers.iter().enumerate() {
        let bank = net.bank_mut(l);
        bank.weights_mut()
            .iter_mut()
            .zip(&g.weights)
            .for_each(|(w, d)| *w -= learning_rate * d);
        bank.bias_mut()
            .iter_mut()
            .zip(&g.bias)
            .for_each(|(w, d)| *w -= learning_rate * d);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Relative training-loss improvement counted as progress.
    pub convergence_tol: f64,
    /// Consecutive epochs without progress before stopping.
    pub patience: usize,
    /// Evaluate the test set every this many epochs (0: final epoch only).
    pub test_every: usize,
    /// Relabel the output nodes to the training labels before the first
    /// step. See [`align_output_nodes`].
    pub align_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 20,
            seed: 0,
            loss: LossKind::CrossEntropy,
            convergence_tol: 1e-4,
            patience: 3,
            test_every: 1,
            align_output: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid(format!(
                "training needs learning_rate > 0 and batch_size ≥ 1, got {} and {}",
                self.learning_rate, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub converged: bool,
}

impl TrainHistory {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_accuracy)
    }
}

/// Fraction of `data` classified correctly.
pub fn accuracy(net: &Network, data: &[LabeledImage]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let correct: usize = data
        .par_iter()
        .map(|s| net.predict(&s.pixels).map(|p| usize::from(p == s.label as usize)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

/// The network [`train`] takes its first step from: `net` itself, or `net`
/// with its output nodes aligned to the labels of `train_set`.
pub fn training_start(net: &Network, train_set: &[LabeledImage], cfg: &TrainConfig) -> Result<Network> {
    if cfg.align_output && !train_set.is_empty() && cfg.max_epochs > 0 {
        align_output_nodes(net, train_set)
    } else {
        Ok(net.clone())
    }
}

/// Minibatch SGD with per-epoch seeded shuffling. Per-sample gradients may
/// be computed in parallel; they are summed in sample order so results do
/// not depend on the worker count.
pub fn train(
    net: &Network,
    train_set: &[LabeledImage],
    test_set: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if train_set.is_empty() || cfg.max_epochs == 0 {
        return Ok((net.clone(), history));
    }
    if let Some(bad) = train_set.iter().find(|s| s.label as usize >= net.class_count()) {
        return Err(Error::invalid(format!("label {} outside 0..{}", bad.label, net.class_count())));
    }
    let mut net = training_start(net, train_set, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stale_epochs = 0;
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f32, bool, Gradients)> = batch
                .par_iter()
                .map(|&i| sample_gradients(&net, &train_set[i], cfg.loss))
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros_like(&net);
            let mut batch_loss = 0f64;
            for (l, c, g) in &per_sample {
                batch_loss += f64::from(*l);
                correct += usize::from(*c);
                total.add_assign(g);
            }
            if !batch_loss.is_finite() || !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss as f32,
                });
            }
            loss_sum += batch_loss;
            total.scale(1.0 / batch.len() as f32);
            sgd_step(&mut net, &total, cfg.learning_rate);
            step += 1;
        }
        let epoch_loss = loss_sum / train_set.len() as f64;
        if let Some(prev) = history.records.last() {
            let improvement = (prev.loss - epoch_loss) / prev.loss.abs().max(1e-12);
            if improvement < cfg.convergence_tol {
                stale_epochs += 1;
            } else {
                stale_epochs = 0;
            }
        }
        let converged = stale_epochs >= cfg.patience;
        let last = converged || epoch == cfg.max_epochs;
        let evaluate = !test_set.is_empty() && (last || (cfg.test_every > 0 && epoch % cfg.test_every == 0));
        let test_accuracy = if evaluate { Some(accuracy(&net, test_set)?) } else { None };
        let record = EpochRecord {
            epoch,
            loss: epoch_loss,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
        };
        debug!("epoch {epoch}: {record:?}");
        history.records.push(record);
        if converged {
            history.converged = true;
            info!("converged after {epoch} epochs");
            break;
        }
    }
    Ok((net, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub samples: usize,
    pub accuracy: f64,
    pub epochs: usize,
}

/// Test accuracy after training `initialized` on class-stratified subsets of
/// each size. A size of zero reports the untrained network's accuracy under
/// `zero_mapping`.
pub fn learning_curve(
    initialized: &Network,
    train_set: &[LabeledImage],
    test_set: &[LabeledImage],
    counts: &[usize],
    cfg: &TrainConfig,
    zero_mapping: LabelMapping,
) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::with_capacity(counts.len());
    for &count in counts {
        let point = if count == 0 {
            CurvePoint {
                samples: 0,
                accuracy: unsupervised_accuracy(initialized, train_set, test_set, zero_mapping)?,
                epochs: 0,
            }
        } else {
            let subset = stratified_subset(train_set, count, cfg.seed)?;
            let (_, history) = train(initialized, &subset, test_set, cfg)?;
            CurvePoint {
                samples: count,
                accuracy: history.final_test_accuracy().unwrap_or(0.0),
                epochs: history.records.len(),
            }
        };
        info!("learning curve: {} samples -> {:.4}", point.samples, point.accuracy);
        points.push(point);
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationRow {
    /// `input/output` layer names, e.g. `S4/C5`.
    pub label: String,
    pub mean_radians: f64,
    pub mean_degrees: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationReport {
    pub rows: Vec<OrientationRow>,
}

fn unit_or_none(v: &[f32]) -> Option<Vec<f32>> {
    let n = norm(v);
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// Mean angle per layer between each anchor's initial and final direction
/// (mean coefficients excluded).
pub fn anchor_orientation_change(initial: &Network, trained: &Network) -> Result<OrientationReport> {
    if !initial.same_architecture(trained) {
        return Err(Error::invalid("orientation change needs two networks with the same architecture"));
    }
    let mut rows = Vec::with_capacity(initial.depth());
    for l in 0..initial.depth() {
        let (a, b) = (initial.layer(l).bank(), trained.layer(l).bank());
        let mut total = 0f64;
        for k in 0..a.anchors() {
            let angle = match (unit_or_none(a.row(k)), unit_or_none(b.row(k))) {
                (Some(u), Some(v)) if u == v => 0.0,
                (Some(u), Some(v)) => f64::from(geodesic_angle(&u, &v)?),
                (None, None) => 0.0,
                _ => std::f64::consts::FRAC_PI_2,
            };
            total += angle;
        }
        let mean = total / a.anchors() as f64;
        let input = if l == 0 { "Input".to_string() } else { initial.layer(l - 1).name.clone() };
        rows.push(OrientationRow {
            label: format!("{input}/{}", initial.layer(l).name),
            mean_radians: mean,
            mean_degrees: mean.to_degrees(),
        });
    }
    Ok(OrientationReport { rows })
}
