//! Property checks shared by the property tests and the acceptance run.
//! Each returns a short summary on success and a diagnostic on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recos::checkpoint;
use recos::init::{random_initialize, spherical_kmeans, spherical_kmeans_restarts, SampleSet};
use recos::mnist::{self, LabeledImage};
use recos::network::{decode, loss, one_hot, LayerKind, LayerSpec, LossKind, Network};
use recos::recos::{normalize_to_sphere, recos_forward, AnchorBank, Rectifier};
use recos::train::{backward, backward_with_input, sample_loss, sgd_step};
use recos::{build_lenet5, KMeansConfig, Shape, Tensor};

use super::{conv_backward, finite_difference, forward, RefNet};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn random_weights(net: &Network, rng: &mut ChaCha8Rng, scale: f32) -> Network {
    let mut net = net.clone();
    for l in 0..net.depth() {
        let bank = net.bank_mut(l);
        bank.weights_mut().iter_mut().for_each(|w| *w = rng.gen_range(-scale..scale));
        bank.bias_mut().iter_mut().for_each(|b| *b = rng.gen_range(-scale..scale));
    }
    net
}

fn image(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let shape = Shape::new(dims.to_vec()).unwrap();
    let data = (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn tiny_net(rect: Rectifier) -> Network {
    Network::new(
        Shape::new([1, 8, 8]).unwrap(),
        &[
            LayerSpec::new(LayerKind::conv(2, 5), rect),
            LayerSpec::new(LayerKind::fc(4), rect),
            LayerSpec::new(LayerKind::fc(3), rect),
        ],
    )
    .unwrap()
}

/// Backprop against central differences of an f64 reference forward pass
/// on the 1×8×8 → Conv(2,5×5)+pool → FC(4) → FC(3) network.
pub fn gradient_finite_difference() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rects = [
        Rectifier::Sigmoid,
        Rectifier::Relu,
        Rectifier::PRelu { slope: 0.1 },
        Rectifier::TRelu { phi: 0.2 },
    ];
    let (mut compared, mut skipped, mut worst) = (0usize, 0usize, 0f64);
    for rect in rects {
        for kind in [LossKind::CrossEntropy, LossKind::MeanSquaredError] {
            for trial in 0..5 {
                let net = random_weights(&tiny_net(rect), &mut rng, 0.6);
                let img = image(&mut rng, &[1, 8, 8]);
                let target = trial % 3;
                let (d, acts) = net.forward(&img).unwrap();
                let (_, g) = loss(&d.0, &one_hot(target, 3), kind).unwrap();
                let grads = backward(&net, &acts, &g).unwrap();
                let analytic: Vec<f64> = grads
                    .layers
                    .iter()
                    .flat_map(|l| l.weights.iter().chain(&l.bias).map(|&v| f64::from(v)))
                    .collect();
                let reference = RefNet::from_network(&net);
                let pixels: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
                let fd = finite_difference(&reference, &pixels, target, kind, 1e-3);
                for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
                    let Some(f) = f else {
                        skipped += 1;
                        continue;
                    };
                    if a.abs() <= 1e-6 && f.abs() <= 1e-6 {
                        continue;
                    }
                    let rel = (a - f).abs() / a.abs().max(f.abs());
                    worst = worst.max(rel);
                    compared += 1;
                    ensure(rel <= 1e-2, || {
                        format!("{rect} {kind} parameter {i}: backprop {a:.6e} vs finite difference {f:.6e} (rel {rel:.2e})")
                    })?;
                }
            }
        }
    }
    ensure(compared > 1000, || format!("only {compared} coordinates compared"))?;
    Ok(format!("{compared} coordinates, worst rel err {worst:.2e}, {skipped} kink crossings skipped"))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Conv forward and backward (weights, mean coefficients, input) against
/// the sliding-window reference.
pub fn conv_against_sliding_window() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0f64;
    for (c, hw, filters, window, stride, pool) in [
        (1, 8, 3, 5, 1, false),
        (2, 9, 4, 3, 2, false),
        (3, 12, 2, 5, 1, true),
        (1, 32, 6, 5, 1, true),
    ] {
        for rect in [Rectifier::Relu, Rectifier::PRelu { slope: 0.2 }, Rectifier::Sigmoid] {
            let kind = LayerKind::Conv {
                filters,
                window,
                stride,
                pool,
            };
            let net = Network::new(Shape::new([c, hw, hw]).unwrap(), &[LayerSpec::new(kind, rect)]).unwrap();
            let net = random_weights(&net, &mut rng, 0.5);
            let img = image(&mut rng, &[c, hw, hw]);
            let pixels: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
            let reference = RefNet::from_network(&net);
            let ref_out = forward(&reference, &pixels);
            let (d, acts) = net.forward(&img).unwrap();
            for (a, b) in d.0.iter().zip(&ref_out.output) {
                worst = worst.max((f64::from(*a) - b).abs());
                ensure(close(f64::from(*a), *b, 1e-5), || format!("forward {a} vs reference {b}"))?;
            }

            let upstream: Vec<f32> = (0..d.0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (grads, dx) = backward_with_input(&net, &acts, &upstream).unwrap();
            // Route pooled gradients back through the reference winners.
            let out = (hw - window) / stride + 1;
            let grad_response: Vec<f64> = if pool {
                let mut g = vec![0.0; filters * out * out];
                let winners = &ref_out.path[filters * out * out..];
                let half = out / 2;
                for k in 0..filters {
                    for i in 0..half {
                        for j in 0..half {
                            let q = (k * half + i) * half + j;
                            let (dy, dxx) = (winners[q] / 2, winners[q] % 2);
                            g[(k * out + 2 * i + dy) * out + 2 * j + dxx] += f64::from(upstream[q]);
                        }
                    }
                }
                g
            } else {
                upstream.iter().map(|&v| f64::from(v)).collect()
            };
            let (dw, db, dxr) = conv_backward(&reference.layers[0], &pixels, [c, hw, hw], &grad_response);
            let pairs = grads.layers[0]
                .weights
                .iter()
                .zip(&dw)
                .chain(grads.layers[0].bias.iter().zip(&db))
                .chain(dx.data().iter().zip(&dxr));
            for (a, b) in pairs {
                worst = worst.max((f64::from(*a) - b).abs() / b.abs().max(1.0));
                ensure(close(f64::from(*a), *b, 1e-5), || {
                    format!("{rect} C={c} {hw}×{hw} window {window} stride {stride}: gradient {a} vs reference {b}")
                })?;
            }
        }
    }
    Ok(format!("worst scaled error {worst:.2e}"))
}

/// One small SGD step on one sample lowers that sample's loss.
pub fn single_step_decreases_loss() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = build_lenet5(Rectifier::Relu);
    let mut failures = Vec::new();
    for case in 0..100 {
        let net = random_initialize(&base, case);
        let sample = LabeledImage {
            pixels: image(&mut rng, &[1, 32, 32]),
            label: rng.gen_range(0..10),
        };
        let kind = if case % 2 == 0 { LossKind::CrossEntropy } else { LossKind::MeanSquaredError };
        let before = sample_loss(&net, &sample, kind).unwrap();
        let (d, acts) = net.forward(&sample.pixels).unwrap();
        let (_, g) = loss(&d.0, &one_hot(sample.label as usize, 10), kind).unwrap();
        let grads = backward(&net, &acts, &g).unwrap();
        let mut stepped = net.clone();
        sgd_step(&mut stepped, &grads, 1e-4);
        let after = sample_loss(&stepped, &sample, kind).unwrap();
        if !(after < before) {
            failures.push(format!("case {case}: {before} -> {after}"));
        }
    }
    ensure(failures.len() <= 2, || format!("{} failures: {failures:?}", failures.len()))?;
    Ok(format!("{} of 100 cases did not decrease", failures.len()))
}

/// Random unit vectors with a planted 3-cluster structure in 4 dimensions.
fn brute_force_instance(seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
    (0..20)
        .map(|i| {
            let c = &centers[i % 3];
            let v: Vec<f32> = c.iter().map(|x| x + rng.gen_range(-0.6..0.6)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Exhaustive search over assignments of `points` to `k` groups; the
/// spherical k-means objective of a partition is `Σ‖S_c‖ / n`.
fn best_partition(points: &[Vec<f64>], k: usize) -> f64 {
    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
    fn search(points: &[Vec<f64>], i: usize, used: usize, sums: &mut Vec<Vec<f64>>, best: &mut f64) {
        let current: f64 = sums.iter().map(|s| norm(s)).sum();
        if i == points.len() {
            *best = best.max(current);
            return;
        }
        // Each remaining unit vector adds at most 1 to the total.
        if current + (points.len() - i) as f64 <= *best {
            return;
        }
        // Groups are opened in order, which removes label permutations.
        for c in 0..sums.len().min(used + 1) {
            sums[c].iter_mut().zip(&points[i]).for_each(|(s, p)| *s += p);
            search(points, i + 1, used.max(c + 1), sums, best);
            sums[c].iter_mut().zip(&points[i]).for_each(|(s, p)| *s -= p);
        }
    }
    let mut sums = vec![vec![0.0; points[0].len()]; k];
    let mut best = 0.0;
    search(points, 0, 0, &mut sums, &mut best);
    best / points.len() as f64
}

/// Objective monotonicity on random data and global optimality on tiny
/// instances checked by exhaustive enumeration.
pub fn kmeans_monotone_and_optimal() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let rows: Vec<Vec<f32>> = (0..500).map(|_| unit(&mut rng, 8)).collect();
        let samples = SampleSet::from_rows(&rows).unwrap();
        let result = spherical_kmeans(
            &samples,
            &KMeansConfig {
                k: 6,
                seed: trial,
                tol: 1e-12,
                max_iter: 100,
                ..KMeansConfig::default()
            },
        )
        .unwrap();
        for w in result.history.windows(2) {
            ensure(w[1] >= w[0] - 1e-9, || format!("objective decreased {} -> {}", w[0], w[1]))?;
        }
    }
    let mut worst_gap = 0f64;
    for seed in 0..3 {
        let rows = brute_force_instance(seed);
        let exact = best_partition(
            &rows
                .iter()
                .map(|r| r.iter().map(|&v| f64::from(v)).collect())
                .collect::<Vec<_>>(),
            3,
        );
        let samples = SampleSet::from_rows(&rows).unwrap();
        let cfg = KMeansConfig {
            k: 3,
            seed: 100 + seed,
            tol: 1e-12,
            max_iter: 200,
            ..KMeansConfig::default()
        };
        let found = spherical_kmeans_restarts(&samples, &cfg, 10).unwrap().objective;
        let gap = exact - found;
        worst_gap = worst_gap.max(gap);
        ensure(gap <= 1e-6, || format!("instance {seed}: k-means {found} vs exhaustive {exact}"))?;
    }
    Ok(format!("monotone on 10 runs; worst gap to exhaustive optimum {worst_gap:.2e}"))
}

pub fn rectifier_grids() -> Check {
    let grid: Vec<f32> = (0..=10_000).map(|i| -5.0 + 10.0 * i as f32 / 10_000.0).collect();
    let all = [
        Rectifier::Sigmoid,
        Rectifier::Relu,
        Rectifier::PRelu { slope: 0.1 },
        Rectifier::TRelu { phi: 0.0 },
        Rectifier::TRelu { phi: 0.5 },
        Rectifier::TRelu { phi: 0.9 },
    ];
    for r in all {
        let out: Vec<f32> = grid.iter().map(|&v| r.apply(v)).collect();
        for w in out.windows(2) {
            ensure(w[1] >= w[0], || format!("{r} decreases: {} -> {}", w[0], w[1]))?;
        }
        if !matches!(r, Rectifier::PRelu { .. }) {
            ensure(out.iter().all(|&v| v >= 0.0), || format!("{r} produced a negative output"))?;
        }
    }
    let trelu0 = Rectifier::TRelu { phi: 0.0 };
    for &v in &grid {
        let (a, b) = (trelu0.apply(v), Rectifier::Relu.apply(v));
        ensure(a.to_bits() == b.to_bits(), || format!("TReLU(0)({v}) = {a} but ReLU = {b}"))?;
    }
    Ok(format!("{} grid points per rectifier", grid.len()))
}

pub fn decode_is_nearest_one_hot() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let c = rng.gen_range(1..=12);
        let d: Vec<f32> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let nearest = (0..c)
            .map(|i| {
                let dist: f64 = d
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| (f64::from(v) - if i == j { 1.0 } else { 0.0 }).powi(2))
                    .sum();
                (i, dist)
            })
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0;
        ensure(decode(&d) == nearest, || format!("{d:?}: decode {} vs nearest {nearest}", decode(&d)))?;
    }
    Ok("1000 vectors".into())
}

pub fn sphere_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..2000 {
        let n = rng.gen_range(1..40);
        let x: Vec<f32> = if rng.gen_bool(0.1) {
            vec![rng.gen_range(-2.0..2.0); n]
        } else {
            (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()
        };
        let p = normalize_to_sphere(&x, 1e-4).unwrap();
        let norm = p.vector.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        ensure(norm == 0.0 || (norm - 1.0).abs() <= 1e-5, || format!("norm {norm} for {x:?}"))?;
        if norm > 0.0 {
            let c = rng.gen_range(0.01..100.0f32);
            let scaled: Vec<f32> = x.iter().map(|v| v * c).collect();
            let q = normalize_to_sphere(&scaled, 1e-4).unwrap();
            for (a, b) in p.vector.iter().zip(&q.vector) {
                ensure((a - b).abs() <= 1e-5, || format!("scale {c} changed {a} to {b}"))?;
            }
        }
    }
    Ok("2000 vectors".into())
}

/// Rectification separates `x` from `−x` whenever correlations take both
/// signs.
pub fn sign_disambiguation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut tested = 0;
    for _ in 0..500 {
        let w: Vec<f32> = (0..6 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bank = AnchorBank::new(Tensor::matrix(6, 25, w).unwrap(), vec![0.0; 6]).unwrap();
        let x: Vec<f32> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        let raw = bank.correlate(&x).unwrap();
        if !(raw.iter().any(|&v| v > 0.0) && raw.iter().any(|&v| v < 0.0)) {
            continue;
        }
        tested += 1;
        for r in [Rectifier::Relu, Rectifier::TRelu { phi: 0.0 }] {
            ensure(
                recos_forward(&x, &bank, r).unwrap() != recos_forward(&neg, &bank, r).unwrap(),
                || format!("{r} maps x and −x to the same output"),
            )?;
        }
    }
    ensure(tested > 100, || format!("only {tested} instances had mixed signs"))?;
    Ok(format!("{tested} instances"))
}

pub fn checkpoint_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (i, r) in [Rectifier::Relu, Rectifier::Sigmoid, Rectifier::PRelu { slope: 0.3 }, Rectifier::TRelu { phi: 0.4 }]
        .into_iter()
        .enumerate()
    {
        let net = random_weights(&build_lenet5(r), &mut rng, 1.0);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("net{i}.bin"));
        checkpoint::save(&net, &path).map_err(|e| e.to_string())?;
        let back = checkpoint::load(&path).map_err(|e| e.to_string())?;
        ensure(checkpoint::to_bytes(&back) == std::fs::read(&path).unwrap(), || "re-saved bytes differ".into())?;
        for l in 0..net.depth() {
            let (a, b) = (net.layer(l).bank(), back.layer(l).bank());
            let same = a.weights().iter().chain(a.bias()).zip(b.weights().iter().chain(b.bias())).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("layer {l} weights changed"))?;
        }
    }
    Ok("4 networks".into())
}

/// Loader checks on a synthetic IDX pair, and on the real files when given.
pub fn idx_loader(real: Option<&mnist::Dataset>) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let count = 3usize;
    let mut images = vec![0, 0, 8, 3];
    images.extend((count as u32).to_be_bytes());
    images.extend(28u32.to_be_bytes());
    images.extend(28u32.to_be_bytes());
    for i in 0..count {
        images.extend((0..784).map(|p| ((p + i * 7) % 256) as u8));
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((count as u32).to_be_bytes());
    labels.extend([4u8, 0, 9]);
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let set = mnist::load_idx(&ip, &lp).map_err(|e| e.to_string())?;
    ensure(set.len() == count, || format!("loaded {} of {count}", set.len()))?;
    for (i, s) in set.iter().enumerate() {
        check_padding(s)?;
        let want = ((100 + i * 7) % 256) as f32 / 255.0; // source pixel (3, 16)
        let got = s.pixels.data()[(3 + 2) * 32 + 16 + 2];
        ensure((got - want).abs() < 1e-7, || format!("pixel {got} vs {want}"))?;
    }
    ensure(set.iter().map(|s| s.label).collect::<Vec<_>>() == [4, 0, 9], || "labels".into())?;
    let mut summary = "synthetic IDX".to_string();
    if let Some(ds) = real {
        ensure(ds.train.len() == 60_000 && ds.test.len() == 10_000, || {
            format!("counts {} / {}", ds.train.len(), ds.test.len())
        })?;
        for s in ds.train.iter().step_by(997).chain(ds.test.iter().step_by(997)) {
            check_padding(s)?;
        }
        summary.push_str(" + MNIST 60000/10000");
    }
    Ok(summary)
}

fn check_padding(s: &LabeledImage) -> Result<(), String> {
    ensure(s.pixels.shape().dims() == [1, 32, 32], || format!("shape {}", s.pixels.shape()))?;
    let d = s.pixels.data();
    ensure(d.iter().all(|v| (0.0..=1.0).contains(v)), || "pixel outside [0, 1]".into())?;
    for y in 0..32 {
        for x in 0..32 {
            if !(2..30).contains(&y) || !(2..30).contains(&x) {
                ensure(d[y * 32 + x] == 0.0, || format!("border pixel ({y}, {x}) is {}", d[y * 32 + x]))?;
            }
        }
    }
    Ok(())
}
