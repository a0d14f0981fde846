//! Network initialization.
//!
//! The k-means scheme initializes a network from the input side: for each
//! layer it gathers that layer's inputs as produced by the already
//! initialized layers below it, projects them onto the unit sphere after
//! mean removal, clusters them with spherical k-means and installs the
//! centroids as the layer's anchor vectors. The random scheme is the usual
//! Glorot-uniform draw.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mnist::LabeledImage;
use crate::network::{LayerKind, Network};
use crate::numerics::{dot, extract_patches, gemm, MatRef, Tensor};
use crate::recos::{normalize_to_sphere, AnchorBank, DEFAULT_FLAT_THRESHOLD};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop when the relative objective improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Upper bound on the number of vectors clustered (and images scanned).
    pub sample_cap: usize,
    pub flat_threshold: f32,
    /// Divide each layer's centroids by the mean magnitude of that layer's
    /// inputs, so typical pre-activations are correlations on the sphere
    /// even though the forward pass does not normalize. Off: unit anchors.
    pub calibrate_gain: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 1,
            max_iter: 50,
            tol: 1e-4,
            seed: 0,
            sample_cap: 100_000,
            flat_threshold: DEFAULT_FLAT_THRESHOLD,
            calibrate_gain: true,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_iter == 0 || !(self.tol > 0.0) || self.sample_cap < self.k {
            return Err(Error::invalid(format!(
                "k-means config needs k ≥ 1, max_iter ≥ 1, tol > 0 and sample_cap ≥ k, got {self:?}"
            )));
        }
        if !(self.flat_threshold > 0.0) {
            return Err(Error::invalid("flat threshold must be positive"));
        }
        Ok(())
    }

    /// One config per layer of `net`, with `k` set to the layer width and a
    /// distinct seed per layer.
    pub fn per_layer(net: &Network, template: &KMeansConfig) -> Vec<KMeansConfig> {
        net.layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| KMeansConfig {
                k: layer.spec.kind.width(),
                seed: template.seed.wrapping_add(l as u64),
                ..template.clone()
            })
            .collect()
    }
}

/// Row-major set of equal-length vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f32>,
}

impl SampleSet {
    pub fn new(dim: usize) -> Self {
        SampleSet { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut set = SampleSet::new(dim);
        for r in rows {
            set.push(r)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::shape("SampleSet::push", self.dim, row.len()));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub k: usize,
    pub dim: usize,
    /// `k×dim`, unit rows.
    pub centroids: Vec<f32>,
    pub assignments: Vec<usize>,
    /// Mean over samples of the largest correlation with any centroid.
    pub objective: f64,
    /// Objective after each assignment step, in order.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn bank(&self) -> AnchorBank {
        self.scaled_bank(1.0)
    }

    /// Zero-sum bank whose rows are the centroids times `gain`.
    pub fn scaled_bank(&self, gain: f32) -> AnchorBank {
        let rows = self.centroids.iter().map(|v| v * gain).collect();
        AnchorBank::zero_sum(Tensor::matrix(self.k, self.dim, rows).expect("centroid dims")).expect("centroids are finite")
    }
}

const CHUNK: usize = 4096;

/// Best centroid and its correlation for every sample. Ties go to the lowest
/// centroid index.
fn assign(samples: &SampleSet, centroids: &[f32], k: usize) -> (Vec<usize>, Vec<f32>) {
    let dim = samples.dim();
    let parts: Vec<(Vec<usize>, Vec<f32>)> = samples
        .as_slice()
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let rows = chunk.len() / dim;
            let mut corr = vec![0.0; rows * k];
            gemm(
                MatRef::row_major(chunk, rows, dim),
                MatRef::row_major(centroids, k, dim).t(),
                0.0,
                &mut corr,
            );
            let mut idx = Vec::with_capacity(rows);
            let mut best = Vec::with_capacity(rows);
            for r in corr.chunks_exact(k) {
                let mut b = 0;
                for c in 1..k {
                    if r[c] > r[b] {
                        b = c;
                    }
                }
                idx.push(b);
                best.push(r[b]);
            }
            (idx, best)
        })
        .collect();
    let mut idx = Vec::with_capacity(samples.len());
    let mut best = Vec::with_capacity(samples.len());
    for (i, b) in parts {
        idx.extend(i);
        best.extend(b);
    }
    (idx, best)
}

fn mean_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
}

/// k-means++ seeding with cosine distance `1 − xᵀc`.
fn seed_centroids(samples: &SampleSet, nonzero: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dim = samples.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = Vec::with_capacity(k);
    let first = nonzero[rng.gen_range(0..nonzero.len())];
    chosen.push(first);
    centroids.extend_from_slice(samples.row(first));
    let mut best: Vec<f32> = nonzero.par_iter().map(|&i| dot(samples.row(i), samples.row(first))).collect();
    while chosen.len() < k {
        let weights: Vec<f64> = best.iter().map(|&c| (1.0 - f64::from(c)).max(0.0).powi(2)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = nonzero.len() - 1;
            for (j, w) in weights.iter().enumerate() {
                if target < *w {
                    pick = j;
                    break;
                }
                target -= w;
            }
            nonzero[pick]
        } else {
            // All remaining samples coincide with a centroid.
            let free: Vec<usize> = nonzero.iter().copied().filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(pick);
        let c = samples.row(pick);
        centroids.extend_from_slice(c);
        best.par_iter_mut().zip(nonzero.par_iter()).for_each(|(b, &i)| {
            *b = b.max(dot(samples.row(i), c));
        });
    }
    centroids
}

/// Spherical k-means (Lloyd iterations under cosine similarity).
///
/// Samples are expected to be unit vectors; all-zero rows are tolerated but
/// never chosen as seeds. Empty clusters are re-seeded with the sample whose
/// best correlation is smallest.
pub fn spherical_kmeans(samples: &SampleSet, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 || cfg.max_iter == 0 || !(cfg.tol > 0.0) {
        return Err(Error::invalid(format!("invalid k-means config {cfg:?}")));
    }
    let (k, dim) = (cfg.k, samples.dim());
    let nonzero: Vec<usize> = (0..samples.len())
        .filter(|&i| samples.row(i).iter().any(|&v| v != 0.0))
        .collect();
    if nonzero.len() < k {
        return Err(Error::invalid(format!(
            "spherical k-means needs at least {k} non-zero samples, got {}",
            nonzero.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_centroids(samples, &nonzero, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (assignments, best) = assign(samples, &centroids, k);
        let objective = mean_f64(&best);
        if let Some(&prev) = history.last() {
            if objective < prev - 1e-9 {
                warn!("spherical k-means objective decreased: {prev} -> {objective}");
            }
        }
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| objective - prev < cfg.tol * prev.abs().max(1e-12));
        history.push(objective);
        if converged && iterations < cfg.max_iter {
            if let Some(sums) = first_variation(samples, &assignments, k) {
                set_centroids(&mut centroids, &sums, dim);
                iterations += 1;
                continue;
            }
        }
        if converged || iterations == cfg.max_iter {
            debug!("spherical k-means: k={k} dim={dim} iterations={iterations} objective={objective:.6}");
            return Ok(KMeansResult {
                k,
                dim,
                centroids,
                assignments,
                objective,
                history,
                iterations,
            });
        }

        // Update step: normalized member sums, accumulated in sample order.
        let mut sums = vec![0f64; k * dim];
        for (i, &c) in assignments.iter().enumerate() {
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(samples.row(i)) {
                *s += f64::from(v);
            }
        }
        let empty = set_centroids(&mut centroids, &sums, dim);
        if !empty.is_empty() {
            let mut order: Vec<usize> = nonzero.clone();
            order.sort_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)));
            for (c, &i) in empty.iter().zip(&order) {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(samples.row(i));
            }
            debug!("re-seeded {} empty clusters", empty.len());
        }
        iterations += 1;
    }
}

/// Writes normalized cluster sums into `centroids`; returns the clusters
/// whose sum vanished (left unchanged).
fn set_centroids(centroids: &mut [f32], sums: &[f64], dim: usize) -> Vec<usize> {
    let mut empty = Vec::new();
    for (c, (dst, sum)) in centroids.chunks_exact_mut(dim).zip(sums.chunks_exact(dim)).enumerate() {
        let n = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            for (d, &s) in dst.iter_mut().zip(sum) {
                *d = (s / n) as f32;
            }
        } else {
            empty.push(c);
        }
    }
    empty
}

const FIRST_VARIATION_SWEEPS: usize = 10;

/// Local search over single-sample moves between clusters, each of which
/// strictly raises `Σ_c ‖S_c‖` (the partition objective). Returns the new
/// cluster sums if any move was made.
fn first_variation(samples: &SampleSet, assignments: &[usize], k: usize) -> Option<Vec<f64>> {
    if k < 2 {
        return None;
    }
    let dim = samples.dim();
    let mut labels = assignments.to_vec();
    let mut sums = vec![0f64; k * dim];
    let mut sizes = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        sizes[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(samples.row(i)) {
            *s += f64::from(v);
        }
    }
    let mut sq: Vec<f64> = sums.chunks_exact(dim).map(|s| s.iter().map(|v| v * v).sum()).collect();
    let mut moved_any = false;
    let mut x = vec![0f64; dim];
    for _ in 0..FIRST_VARIATION_SWEEPS {
        let mut moved = false;
        for i in 0..labels.len() {
            let a = labels[i];
            if sizes[a] < 2 {
                continue;
            }
            x.iter_mut().zip(samples.row(i)).for_each(|(d, &v)| *d = f64::from(v));
            let xx: f64 = x.iter().map(|v| v * v).sum();
            if xx == 0.0 {
                continue;
            }
            let dots: Vec<f64> = sums.chunks_exact(dim).map(|s| s.iter().zip(&x).map(|(p, q)| p * q).sum()).collect();
            let leave = (sq[a] - 2.0 * dots[a] + xx).max(0.0).sqrt() - sq[a].sqrt();
            let mut best = (0.0, a);
            for b in (0..k).filter(|&b| b != a) {
                let gain = leave + (sq[b] + 2.0 * dots[b] + xx).max(0.0).sqrt() - sq[b].sqrt();
                if gain > best.0 {
                    best = (gain, b);
                }
            }
            let (gain, b) = best;
            if gain > 1e-9 {
                for (j, &v) in x.iter().enumerate() {
                    sums[a * dim + j] -= v;
                    sums[b * dim + j] += v;
                }
                sq[a] = sums[a * dim..(a + 1) * dim].iter().map(|v| v * v).sum();
                sq[b] = sums[b * dim..(b + 1) * dim].iter().map(|v| v * v).sum();
                sizes[a] -= 1;
                sizes[b] += 1;
                labels[i] = b;
                moved = true;
            }
        }
        moved_any |= moved;
        if !moved {
            break;
        }
    }
    moved_any.then_some(sums)
}

/// Best of `restarts` runs with consecutive seeds.
pub fn spherical_kmeans_restarts(samples: &SampleSet, cfg: &KMeansConfig, restarts: usize) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let run = spherical_kmeans(
            samples,
            &KMeansConfig {
                seed: cfg.seed.wrapping_add(r as u64),
                ..cfg.clone()
            },
        )?;
        if best.as_ref().is_none_or(|b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Uniform fixed-size sample of a stream (Algorithm R).
struct Reservoir {
    cap: usize,
    seen: usize,
    set: SampleSet,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn offer(&mut self, v: &[f32]) {
        self.seen += 1;
        if self.set.len() < self.cap {
            self.set.data.extend_from_slice(v);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if j < self.cap {
                let d = self.set.dim;
                self.set.data[j * d..(j + 1) * d].copy_from_slice(v);
            }
        }
    }
}

/// Sphere-normalized inputs of layer `layer` (0-based), as seen through the
/// current weights of layers `0..layer`. Flat vectors are dropped.
pub fn collect_layer_inputs(
    net: &Network,
    images: &[LabeledImage],
    layer: usize,
    cfg: &KMeansConfig,
) -> Result<SampleSet> {
    Ok(gather_layer_inputs(net, images, layer, cfg)?.0)
}

/// [`collect_layer_inputs`] plus the mean pre-normalization magnitude of
/// every non-flat vector seen.
fn gather_layer_inputs(
    net: &Network,
    images: &[LabeledImage],
    layer: usize,
    cfg: &KMeansConfig,
) -> Result<(SampleSet, f64)> {
    if layer >= net.depth() {
        return Err(Error::invalid(format!("layer {layer} out of range (depth {})", net.depth())));
    }
    if images.is_empty() {
        return Err(Error::invalid("no images to collect layer inputs from"));
    }
    let spec = net.layer(layer).spec;
    let dim = net.layer(layer).bank().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(cfg.sample_cap);

    let mut reservoir = Reservoir {
        cap: cfg.sample_cap,
        seen: 0,
        set: SampleSet::new(dim),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
    };
    let mut magnitude_sum = 0f64;
    for batch in order.chunks(256) {
        let vectors: Vec<Result<(Vec<f32>, f64)>> = batch
            .par_iter()
            .map(|&i| {
                let acts = net.forward_prefix(&images[i].pixels, layer)?;
                let x: &Tensor = &acts.representations[layer];
                let mut out = Vec::new();
                let mut magnitudes = 0f64;
                let mut keep = |v: &[f32]| -> Result<()> {
                    let sp = normalize_to_sphere(v, cfg.flat_threshold)?;
                    if !sp.is_zero() {
                        out.extend_from_slice(&sp.vector);
                        magnitudes += f64::from(sp.magnitude);
                    }
                    Ok(())
                };
                match spec.kind {
                    LayerKind::Conv { window, stride, .. } => {
                        for p in extract_patches(x, window, stride)?.iter() {
                            keep(p)?;
                        }
                    }
                    LayerKind::FullyConnected { .. } => keep(x.data())?,
                }
                Ok((out, magnitudes))
            })
            .collect();
        for v in vectors {
            let (rows, magnitudes) = v?;
            magnitude_sum += magnitudes;
            for row in rows.chunks_exact(dim) {
                reservoir.offer(row);
            }
        }
    }
    if reservoir.set.is_empty() {
        return Err(Error::invalid(format!(
            "every input of layer {} is flat; nothing to cluster",
            net.layer(layer).name
        )));
    }
    debug!(
        "layer {}: kept {} of {} non-flat vectors",
        net.layer(layer).name,
        reservoir.set.len(),
        reservoir.seen
    );
    let mean_magnitude = magnitude_sum / reservoir.seen as f64;
    Ok((reservoir.set, mean_magnitude))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerInitReport {
    pub layer: String,
    pub samples: usize,
    pub iterations: usize,
    pub objective: f64,
    /// Mean magnitude of the layer's non-flat inputs before normalization.
    pub input_magnitude: f64,
    /// Factor applied to the unit centroids (1 without calibration).
    pub gain: f64,
}

/// Layer-by-layer spherical k-means initialization. `cfgs[l].k` must match
/// the width of layer `l`.
pub fn kmeans_initialize(
    net: &Network,
    images: &[LabeledImage],
    cfgs: &[KMeansConfig],
) -> Result<(Network, Vec<LayerInitReport>)> {
    if cfgs.len() != net.depth() {
        return Err(Error::invalid(format!(
            "need one k-means config per layer ({}), got {}",
            net.depth(),
            cfgs.len()
        )));
    }
    let mut net = net.clone();
    let mut reports = Vec::with_capacity(cfgs.len());
    for (l, cfg) in cfgs.iter().enumerate() {
        cfg.validate()?;
        let width = net.layer(l).spec.kind.width();
        if cfg.k != width {
            return Err(Error::invalid(format!(
                "layer {} has {width} anchors but its k-means config asks for {}",
                net.layer(l).name,
                cfg.k
            )));
        }
        let (samples, input_magnitude) = gather_layer_inputs(&net, images, l, cfg)?;
        let result = spherical_kmeans(&samples, cfg)?;
        let gain = if cfg.calibrate_gain {
            1.0 / input_magnitude
        } else {
            1.0
        };
        info!(
            "k-means init {}: {} vectors, {} iterations, objective {:.4}",
            net.layer(l).name,
            samples.len(),
            result.iterations,
            result.objective
        );
        reports.push(LayerInitReport {
            layer: net.layer(l).name.clone(),
            samples: samples.len(),
            iterations: result.iterations,
            objective: result.objective,
            input_magnitude,
            gain,
        });
        net.set_bank(l, result.scaled_bank(gain as f32))?;
    }
    Ok((net, reports))
}

/// Glorot-uniform weights `U(−√(6/(fan_in+fan_out)), +√(…))` and zero mean
/// coefficients. For conv layers `fan_out = filters·window²`.
pub fn random_initialize(net: &Network, seed: u64) -> Network {
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..net.depth() {
        let layer = net.layer(l);
        let fan_in = layer.bank().dim();
        let fan_out = match layer.spec.kind {
            LayerKind::Conv { filters, window, .. } => filters * window * window,
            LayerKind::FullyConnected { units } => units,
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let bank = net.bank_mut(l);
        for w in bank.weights_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        bank.bias_mut().iter_mut().for_each(|b| *b = 0.0);
    }
    net
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    KMeans,
    Random,
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitScheme::KMeans => "kmeans",
            InitScheme::Random => "random",
        })
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(InitScheme::KMeans),
            "random" => Ok(InitScheme::Random),
            other => Err(Error::invalid(format!("unknown init scheme {other:?} (expected kmeans or random)"))),
        }
    }
}

/// Initializes `net` with either scheme. `template` supplies the k-means
/// settings (per-layer `k` is taken from the architecture) and the seed.
pub fn initialize(
    net: &Network,
    scheme: InitScheme,
    images: &[LabeledImage],
    template: &KMeansConfig,
) -> Result<Network> {
    match scheme {
        InitScheme::KMeans => Ok(kmeans_initialize(net, images, &KMeansConfig::per_layer(net, template))?.0),
        InitScheme::Random => Ok(random_initialize(net, template.seed)),
    }
}
