//! Read-only instruments for inspecting a network: anchor-position vectors,
//! modulated outputs, cluster roles, nearest images, unsupervised accuracy,
//! sub-class splits and the TReLU threshold sweep.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use log::info;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::{initialize, spherical_kmeans, InitScheme, KMeansConfig, SampleSet};
use crate::mnist::LabeledImage;
use crate::network::{build_lenet5, Network};
use crate::numerics::{dot, extract_patches, norm, Tensor};
use crate::recos::{normalize_to_sphere, roles_from_responses, AnchorBank, Rectifier, DEFAULT_FLAT_THRESHOLD};
use crate::train::{train, TrainConfig};

/// The columns of an anchor matrix: `vector(n)[k] = A[k][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPositionSet {
    anchors: usize,
    positions: usize,
    /// `positions×anchors`, row-major.
    data: Vec<f32>,
}

impl AnchorPositionSet {
    /// K, the dimension of each vector.
    pub fn anchors(&self) -> usize {
        self.anchors
    }

    /// N, the number of vectors.
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vector(&self, n: usize) -> &[f32] {
        &self.data[n * self.anchors..(n + 1) * self.anchors]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.anchors)
    }

    /// The `K×N` anchor matrix these vectors came from.
    pub fn to_weights(&self) -> Tensor {
        Tensor::matrix(self.anchors, self.positions, transpose(&self.data, self.positions, self.anchors))
            .expect("dims match data")
    }
}

fn transpose(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub fn anchor_position_vectors(bank: &AnchorBank) -> AnchorPositionSet {
    AnchorPositionSet {
        anchors: bank.anchors(),
        positions: bank.dim(),
        data: transpose(bank.weights(), bank.anchors(), bank.dim()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedOutputs {
    /// `outputs[n] = y ⊙ α_n`.
    pub outputs: Vec<Vec<f32>>,
    /// Population variance of the entries of each `α_n`.
    pub variances: Vec<f32>,
}

pub fn modulated_outputs(y: &[f32], positions: &AnchorPositionSet) -> Result<ModulatedOutputs> {
    if y.len() != positions.anchors {
        return Err(Error::shape("modulated_outputs", positions.anchors, y.len()));
    }
    let outputs = positions
        .vectors()
        .map(|alpha| alpha.iter().zip(y).map(|(a, v)| a * v).collect())
        .collect();
    let variances = positions
        .vectors()
        .map(|alpha| {
            let n = alpha.len() as f64;
            let mean = alpha.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            (alpha.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n) as f32
        })
        .collect();
    Ok(ModulatedOutputs { outputs, variances })
}

/// How output nodes are mapped to labels when scoring an untrained network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMapping {
    /// Each node takes the most frequent label among samples it wins.
    Majority,
    /// One-to-one node↔label matching that maximizes correct counts.
    #[default]
    OptimalAssignment,
}

impl fmt::Display for LabelMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMapping::Majority => "majority",
            LabelMapping::OptimalAssignment => "optimal",
        })
    }
}

impl FromStr for LabelMapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(LabelMapping::Majority),
            "optimal" => Ok(LabelMapping::OptimalAssignment),
            other => Err(Error::invalid(format!("unknown label mapping {other:?} (expected majority or optimal)"))),
        }
    }
}

/// `counts[node][label]` over `data`, with nodes and labels both ranging
/// over the network's classes.
pub fn confusion_matrix(net: &Network, data: &[LabeledImage]) -> Result<Vec<Vec<usize>>> {
    let c = net.class_count();
    let predicted: Vec<usize> = data
        .par_iter()
        .map(|s| net.predict(&s.pixels))
        .collect::<Result<_>>()?;
    let mut counts = vec![vec![0usize; c]; c];
    for (s, p) in data.iter().zip(predicted) {
        let label = s.label as usize;
        if label >= c {
            return Err(Error::invalid(format!("label {label} outside 0..{c}")));
        }
        counts[p][label] += 1;
    }
    Ok(counts)
}

/// Node→label map fitted on a confusion matrix.
pub fn fit_mapping(counts: &[Vec<usize>], mapping: LabelMapping) -> Vec<usize> {
    match mapping {
        LabelMapping::Majority => counts
            .iter()
            .map(|row| {
                // Lowest label wins ties; a node that never fires keeps its own index.
                let best = row.iter().copied().max().unwrap_or(0);
                if best == 0 {
                    return usize::MAX;
                }
                row.iter().position(|&v| v == best).unwrap_or(0)
            })
            .enumerate()
            .map(|(node, label)| if label == usize::MAX { node } else { label })
            .collect(),
        LabelMapping::OptimalAssignment => {
            let weights = Matrix::from_rows(counts.iter().map(|row| row.iter().map(|&v| v as i64).collect::<Vec<_>>()))
                .expect("square confusion matrix");
            kuhn_munkres(&weights).1
        }
    }
}

/// Reorders the output anchors so that node `c` is the one an optimal
/// one-to-one node→label assignment, fitted on `labeled`, gives to label
/// `c`. The decision rule is unchanged up to that relabeling.
pub fn align_output_nodes(net: &Network, labeled: &[LabeledImage]) -> Result<Network> {
    if labeled.is_empty() {
        return Err(Error::invalid("aligning output nodes needs labeled data"));
    }
    let map = fit_mapping(&confusion_matrix(net, labeled)?, LabelMapping::OptimalAssignment);
    let last = net.depth() - 1;
    let bank = net.layer(last).bank();
    let dim = bank.dim();
    let mut weights = vec![0.0; bank.weights().len()];
    let mut bias = vec![0.0; bank.anchors()];
    for (node, &label) in map.iter().enumerate() {
        weights[label * dim..(label + 1) * dim].copy_from_slice(bank.row(node));
        bias[label] = bank.bias()[node];
    }
    let mut out = net.clone();
    out.set_bank(last, AnchorBank::new(Tensor::matrix(bank.anchors(), dim, weights)?, bias)?)?;
    Ok(out)
}

/// Accuracy on `evaluation` of the untrained decision rule, with the
/// node→label map fitted on `fitting`.
pub fn unsupervised_accuracy(
    net: &Network,
    fitting: &[LabeledImage],
    evaluation: &[LabeledImage],
    mapping: LabelMapping,
) -> Result<f64> {
    if fitting.is_empty() || evaluation.is_empty() {
        return Err(Error::invalid("unsupervised accuracy needs non-empty fitting and evaluation data"));
    }
    let map = fit_mapping(&confusion_matrix(net, fitting)?, mapping);
    let counts = confusion_matrix(net, evaluation)?;
    let correct: usize = counts.iter().enumerate().map(|(node, row)| row[map[node]]).sum();
    Ok(correct as f64 / evaluation.len() as f64)
}

/// Cluster roles of one sample at one FC layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRoles {
    pub sample: usize,
    pub layer: usize,
    pub primary: Option<usize>,
    pub relevant: usize,
    pub auxiliary: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRoleSummary {
    pub layer: usize,
    pub name: String,
    pub anchors: usize,
    /// Number of (sample, position) cases aggregated.
    pub cases: usize,
    /// Mean rectified output of the primary anchor, over cases that have one.
    pub mean_primary_output: f64,
    pub mean_relevant: f64,
    pub mean_auxiliary: f64,
    /// Fraction of cases with no relevant anchor.
    pub no_primary_fraction: f64,
}

/// Per-sample records (FC layers) and per-layer aggregates. Conv layers
/// aggregate over every spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub samples: Vec<SampleRoles>,
    pub layers: Vec<LayerRoleSummary>,
}

#[derive(Default, Clone, Copy)]
struct RoleTally {
    cases: usize,
    with_primary: usize,
    primary_output: f64,
    relevant: usize,
    auxiliary: usize,
}

pub fn cluster_statistics(net: &Network, data: &[LabeledImage], layers: Range<usize>) -> Result<ClusterStats> {
    if layers.end > net.depth() || layers.is_empty() {
        return Err(Error::invalid(format!(
            "layer range {layers:?} not within 0..{}",
            net.depth()
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("cluster statistics of an empty dataset"));
    }
    let per_sample: Vec<(Vec<RoleTally>, Vec<SampleRoles>)> = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let acts = net.forward_prefix(&s.pixels, layers.end)?;
            let mut tallies = Vec::with_capacity(layers.len());
            let mut records = Vec::new();
            for l in layers.clone() {
                let k = net.layer(l).bank().anchors();
                let (pre, rect) = (acts.pre_activations(l), acts.rectified(l));
                let positions = pre.len() / k;
                let mut tally = RoleTally::default();
                let (mut raw, mut out) = (vec![0.0; k], vec![0.0; k]);
                for p in 0..positions {
                    for a in 0..k {
                        raw[a] = pre[a * positions + p];
                        out[a] = rect[a * positions + p];
                    }
                    let roles = roles_from_responses(&raw, &out);
                    tally.cases += 1;
                    tally.relevant += roles.relevant.len();
                    tally.auxiliary += roles.auxiliary.len();
                    if let Some(primary) = roles.primary {
                        tally.with_primary += 1;
                        tally.primary_output += f64::from(out[primary]);
                    }
                    if !net.layer(l).is_conv() {
                        records.push(SampleRoles {
                            sample: i,
                            layer: l,
                            primary: roles.primary,
                            relevant: roles.relevant.len(),
                            auxiliary: roles.auxiliary.len(),
                        });
                    }
                }
                tallies.push(tally);
            }
            Ok((tallies, records))
        })
        .collect::<Result<_>>()?;

    let mut totals = vec![RoleTally::default(); layers.len()];
    let mut samples = Vec::new();
    for (tallies, records) in per_sample {
        for (t, s) in totals.iter_mut().zip(tallies) {
            t.cases += s.cases;
            t.with_primary += s.with_primary;
            t.primary_output += s.primary_output;
            t.relevant += s.relevant;
            t.auxiliary += s.auxiliary;
        }
        samples.extend(records);
    }
    let summaries = layers
        .clone()
        .zip(totals)
        .map(|(l, t)| LayerRoleSummary {
            layer: l,
            name: net.layer(l).name.clone(),
            anchors: net.layer(l).bank().anchors(),
            cases: t.cases,
            mean_primary_output: if t.with_primary > 0 { t.primary_output / t.with_primary as f64 } else { 0.0 },
            mean_relevant: t.relevant as f64 / t.cases as f64,
            mean_auxiliary: t.auxiliary as f64 / t.cases as f64,
            no_primary_fraction: (t.cases - t.with_primary) as f64 / t.cases as f64,
        })
        .collect();
    Ok(ClusterStats {
        samples,
        layers: summaries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestImage {
    pub anchor: usize,
    pub image: usize,
    pub similarity: f32,
}

/// Cosine similarities between every anchor of layer `layer` and the
/// sphere-normalized layer input of one image; for conv layers the best
/// patch counts.
fn anchor_similarities(net: &Network, image: &Tensor, layer: usize, anchors: &[Vec<f32>]) -> Result<Vec<f32>> {
    let acts = net.forward_prefix(image, layer)?;
    let x = &acts.representations[layer];
    let mut best = vec![f32::NEG_INFINITY; anchors.len()];
    let mut score = |v: &[f32]| -> Result<()> {
        let u = normalize_to_sphere(v, DEFAULT_FLAT_THRESHOLD)?.vector;
        for (b, a) in best.iter_mut().zip(anchors) {
            *b = b.max(dot(&u, a));
        }
        Ok(())
    };
    match net.layer(layer).spec.kind {
        crate::network::LayerKind::Conv { window, stride, .. } => {
            for p in extract_patches(x, window, stride)?.iter() {
                score(p)?;
            }
        }
        crate::network::LayerKind::FullyConnected { .. } => score(x.data())?,
    }
    Ok(best)
}

/// For every anchor of layer `layer`, the image in `data` whose layer input
/// is most similar to it. Ties go to the lowest image index.
pub fn nearest_images_to_anchors(net: &Network, data: &[LabeledImage], layer: usize) -> Result<Vec<NearestImage>> {
    if layer >= net.depth() {
        return Err(Error::invalid(format!("layer {layer} out of range (depth {})", net.depth())));
    }
    if data.is_empty() {
        return Err(Error::invalid("nearest images of an empty dataset"));
    }
    let bank = net.layer(layer).bank();
    let anchors: Vec<Vec<f32>> = (0..bank.anchors())
        .map(|k| {
            let row = bank.row(k);
            let n = norm(row);
            row.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
        })
        .collect();
    let sims: Vec<Vec<f32>> = data
        .par_iter()
        .map(|s| anchor_similarities(net, &s.pixels, layer, &anchors))
        .collect::<Result<_>>()?;
    Ok((0..anchors.len())
        .map(|k| {
            let mut best = NearestImage {
                anchor: k,
                image: 0,
                similarity: sims[0][k],
            };
            for (i, s) in sims.iter().enumerate().skip(1) {
                if s[k] > best.similarity {
                    best.image = i;
                    best.similarity = s[k];
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubclassSplit {
    pub class: u8,
    /// Indices into the data of the class members that were clustered.
    pub members: Vec<usize>,
    /// Sub-cluster of each member.
    pub assignments: Vec<usize>,
    /// Per sub-cluster, the data index of the member closest to its centroid.
    pub exemplars: Vec<usize>,
    /// Class members dropped because their representation was flat.
    pub flat: usize,
    /// Mean cosine distance over pairs in the same sub-cluster.
    pub mean_intra_distance: Option<f64>,
    /// Mean cosine distance over pairs in different sub-clusters.
    pub mean_inter_distance: Option<f64>,
}

/// Splits one class into `k` sub-clusters of its last-hidden-layer
/// representation.
pub fn subclass_split(
    net: &Network,
    data: &[LabeledImage],
    class: u8,
    k: usize,
    seed: u64,
) -> Result<SubclassSplit> {
    if net.depth() < 2 {
        return Err(Error::invalid("sub-class split needs a hidden layer"));
    }
    let members: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == class).collect();
    if k == 0 || k > members.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples of class {class} into {k} sub-classes",
            members.len()
        )));
    }
    let last_hidden = net.depth() - 1;
    let vectors: Vec<Vec<f32>> = members
        .par_iter()
        .map(|&i| {
            let acts = net.forward_prefix(&data[i].pixels, last_hidden)?;
            Ok(normalize_to_sphere(acts.representations[last_hidden].data(), DEFAULT_FLAT_THRESHOLD)?.vector)
        })
        .collect::<Result<_>>()?;
    let (kept, rows): (Vec<usize>, Vec<Vec<f32>>) = members
        .iter()
        .zip(vectors)
        .filter(|(_, v)| v.iter().any(|&x| x != 0.0))
        .map(|(&i, v)| (i, v))
        .unzip();
    let flat = members.len() - kept.len();
    if kept.len() < k {
        return Err(Error::invalid(format!(
            "only {} non-flat samples of class {class} for {k} sub-classes",
            kept.len()
        )));
    }
    let samples = SampleSet::from_rows(&rows)?;
    let result = spherical_kmeans(
        &samples,
        &KMeansConfig {
            k,
            seed,
            ..KMeansConfig::default()
        },
    )?;

    let exemplars = (0..k)
        .map(|c| {
            let centroid = result.centroid(c);
            (0..rows.len())
                .filter(|&i| result.assignments[i] == c)
                .map(|i| (i, dot(&rows[i], centroid)))
                .fold(None, |best: Option<(usize, f32)>, (i, s)| match best {
                    Some((_, bs)) if bs >= s => best,
                    _ => Some((i, s)),
                })
                .map(|(i, _)| kept[i])
                .unwrap_or(usize::MAX)
        })
        .collect();

    // Pairwise sums of u_i·u_j through per-cluster sums.
    let dim = samples.dim();
    let mut sums = vec![vec![0f64; dim]; k];
    let mut sizes = vec![0usize; k];
    let mut self_dots = vec![0f64; k];
    for (row, &c) in rows.iter().zip(&result.assignments) {
        sizes[c] += 1;
        self_dots[c] += row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
        for (s, &v) in sums[c].iter_mut().zip(row) {
            *s += f64::from(v);
        }
    }
    let dot64 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut intra_sum, mut intra_pairs) = (0f64, 0f64);
    let (mut inter_sum, mut inter_pairs) = (0f64, 0f64);
    for a in 0..k {
        let n = sizes[a] as f64;
        let pairs = n * (n - 1.0) / 2.0;
        intra_sum += pairs - (dot64(&sums[a], &sums[a]) - self_dots[a]) / 2.0;
        intra_pairs += pairs;
        for b in a + 1..k {
            let pairs = n * sizes[b] as f64;
            inter_sum += pairs - dot64(&sums[a], &sums[b]);
            inter_pairs += pairs;
        }
    }
    info!("class {class}: {} members in {k} sub-classes", kept.len());
    Ok(SubclassSplit {
        class,
        members: kept,
        assignments: result.assignments,
        exemplars,
        flat,
        mean_intra_distance: (intra_pairs > 0.0).then(|| intra_sum / intra_pairs),
        mean_inter_distance: (inter_pairs > 0.0).then(|| inter_sum / inter_pairs),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub phi: f32,
    pub accuracy: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Threshold with the highest accuracy (smallest on ties).
    pub best_phi: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub init: InitScheme,
    pub kmeans: KMeansConfig,
    pub train: TrainConfig,
}

/// Trains one LeNet-5 per distinct threshold and reports test accuracy.
pub fn trelu_sweep(
    phis: &[f32],
    train_set: &[LabeledImage],
    test_set: &[LabeledImage],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    let mut distinct: Vec<f32> = Vec::new();
    for &phi in phis {
        Rectifier::trelu(phi)?;
        if !distinct.iter().any(|d| d.to_bits() == phi.to_bits()) {
            distinct.push(phi);
        }
    }
    if distinct.is_empty() {
        return Err(Error::invalid("threshold sweep needs at least one value"));
    }
    if test_set.is_empty() {
        return Err(Error::invalid("threshold sweep needs test data"));
    }
    let mut rows = Vec::with_capacity(distinct.len());
    for phi in distinct {
        let net = initialize(&build_lenet5(Rectifier::trelu(phi)?), cfg.init, train_set, &cfg.kmeans)?;
        let (_, history) = train(&net, train_set, test_set, &cfg.train)?;
        let accuracy = history.final_test_accuracy().unwrap_or(0.0);
        info!("TReLU φ = {phi}: accuracy {accuracy:.4}");
        rows.push(SweepRow {
            phi,
            accuracy,
            epochs: history.records.len(),
        });
    }
    let best_phi = rows
        .iter()
        .fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.accuracy > r.accuracy || (b.accuracy == r.accuracy && b.phi <= r.phi) => best,
            _ => Some(r),
        })
        .map(|r| r.phi)
        .expect("non-empty sweep");
    Ok(SweepResult { rows, best_phi })
}
