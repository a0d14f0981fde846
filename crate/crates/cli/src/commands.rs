use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use recos::analysis::{
    cluster_statistics, confusion_matrix, nearest_images_to_anchors, subclass_split, trelu_sweep, unsupervised_accuracy,
    LabelMapping, SweepConfig,
};
use recos::checkpoint;
use recos::init::LayerInitReport;
use recos::mnist::{stratified_subset, TRAIN_IMAGES};
use recos::train::{accuracy, anchor_orientation_change, learning_curve, training_start};
use recos::{build_lenet5, kmeans_initialize, random_initialize, Dataset, InitScheme, KMeansConfig, LabeledImage, Network};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{line_plot, num, opt_num, pgm, write_csv, write_text, Series};

pub const INIT_CHECKPOINT: &str = "init.recos";
pub const TRAINED_CHECKPOINT: &str = "trained.recos";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Loaded MNIST with the training split already cut to `samples`.
struct Data {
    train: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
}

fn data_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cfg
        .data_dir
        .clone()
        .or_else(|| std::env::var_os("RECOS_MNIST_DIR").map(PathBuf::from))
        .ok_or_else(|| CliError::usage("no dataset given: pass --data-dir DIR (or set data_dir in the config)"))?;
    if !dir.join(TRAIN_IMAGES).is_file() {
        return Err(CliError::usage(format!(
            "--data-dir {}: no MNIST files found there",
            dir.display()
        )));
    }
    Ok(dir)
}

fn load_data(cfg: &ExperimentConfig) -> CliResult<Data> {
    let dir = data_dir(cfg)?;
    info!("loading MNIST from {}", dir.display());
    let Dataset { train, test } = Dataset::load(&dir)?;
    let train = match cfg.samples {
        Some(n) if n < train.len() => stratified_subset(&train, n, cfg.seed)?,
        _ => train,
    };
    Ok(Data { train, test })
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> CliResult<&Path> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_text(&dir.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    Ok(dir)
}

fn init_network(cfg: &ExperimentConfig, scheme: InitScheme, train: &[LabeledImage]) -> CliResult<(Network, Vec<LayerInitReport>)> {
    let net = build_lenet5(cfg.rectifier);
    Ok(match scheme {
        InitScheme::KMeans => {
            info!("k-means initialization on {} images", train.len());
            kmeans_initialize(&net, train, &KMeansConfig::per_layer(&net, &cfg.kmeans_template()))?
        }
        InitScheme::Random => (random_initialize(&net, cfg.seed), Vec::new()),
    })
}

/// Loads a checkpoint whose layers must match the configured LeNet-5.
fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> CliResult<Network> {
    let net = checkpoint::load(path)?;
    let expected = build_lenet5(cfg.rectifier);
    if !net.same_architecture(&expected) || net.specs() != expected.specs() {
        return Err(CliError::usage(format!(
            "--checkpoint {}: architecture does not match the configured LeNet-5 with rectifier {}",
            path.display(),
            cfg.rectifier
        )));
    }
    Ok(net)
}

pub fn init(cfg: &ExperimentConfig) -> CliResult<()> {
    let train = match cfg.init {
        InitScheme::KMeans => load_data(cfg)?.train,
        InitScheme::Random => Vec::new(),
    };
    let out = prepare_out_dir(cfg)?;
    let (net, reports) = init_network(cfg, cfg.init, &train)?;
    checkpoint::save(&net, &out.join(INIT_CHECKPOINT))?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.layer.clone(),
                r.samples.to_string(),
                r.iterations.to_string(),
                num(r.objective),
                num(r.input_magnitude),
                num(r.gain),
            ]
        })
        .collect();
    write_csv(
        &out.join("init_report.csv"),
        &["layer", "samples", "iterations", "objective", "input_magnitude", "gain"],
        &rows,
    )?;
    info!("wrote {}", out.join(INIT_CHECKPOINT).display());
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, checkpoint_in: Option<&Path>) -> CliResult<()> {
    let data = load_data(cfg)?;
    let out = prepare_out_dir(cfg)?;
    let initial = match checkpoint_in {
        Some(p) => load_checkpoint(cfg, p)?,
        None => init_network(cfg, cfg.init, &data.train)?.0,
    };
    info!("training on {} samples", data.train.len());
    let train_cfg = cfg.train_config();
    let (trained, history) = recos::train(&initial, &data.train, &data.test, &train_cfg)?;
    checkpoint::save(&trained, &out.join(TRAINED_CHECKPOINT))?;
    let rows: Vec<Vec<String>> = history
        .records
        .iter()
        .map(|r| vec![r.epoch.to_string(), num(r.loss), num(r.train_accuracy), opt_num(r.test_accuracy)])
        .collect();
    write_csv(&out.join("history.csv"), &["epoch", "loss", "train_acc", "test_acc"], &rows)?;
    // Measured from the relabeled start, so a node permutation is not counted as rotation.
    let orientation = anchor_orientation_change(&training_start(&initial, &data.train, &train_cfg)?, &trained)?;
    let rows: Vec<Vec<String>> = orientation
        .rows
        .iter()
        .map(|r| vec![r.label.clone(), num(r.mean_radians), num(r.mean_degrees)])
        .collect();
    write_csv(&out.join("orientation.csv"), &["layer", "mean_radians", "mean_degrees"], &rows)?;
    if let Some(acc) = history.final_test_accuracy() {
        info!("final test accuracy {acc:.4} after {} epochs", history.records.len());
    }
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig, checkpoint_in: &Path, unsupervised: bool) -> CliResult<()> {
    let data = load_data(cfg)?;
    let net = load_checkpoint(cfg, checkpoint_in)?;
    let out = prepare_out_dir(cfg)?;
    let test_accuracy = accuracy(&net, &data.test)?;
    let counts = confusion_matrix(&net, &data.test)?;
    let classes = net.class_count();
    let mut rows = vec![vec!["test_accuracy".to_string(), num(test_accuracy)]];
    for label in 0..classes {
        let total: usize = counts.iter().map(|row| row[label]).sum();
        let acc = (total > 0).then(|| counts[label][label] as f64 / total as f64);
        rows.push(vec![format!("class_{label}_accuracy"), opt_num(acc)]);
    }
    if unsupervised || cfg.eval.unsupervised {
        for mapping in [LabelMapping::Majority, LabelMapping::OptimalAssignment] {
            let acc = unsupervised_accuracy(&net, &data.train, &data.test, mapping)?;
            rows.push(vec![format!("unsupervised_accuracy_{mapping}"), num(acc)]);
        }
    }
    write_csv(&out.join("metrics.csv"), &["metric", "value"], &rows)?;
    let mut header = vec!["predicted".to_string()];
    header.extend((0..classes).map(|l| format!("label_{l}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = counts
        .iter()
        .enumerate()
        .map(|(node, row)| std::iter::once(node.to_string()).chain(row.iter().map(usize::to_string)).collect())
        .collect();
    write_csv(&out.join("confusion.csv"), &header, &rows)?;
    info!("test accuracy {test_accuracy:.4}");
    Ok(())
}

pub fn curve(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.curve.inits.is_empty() || cfg.curve.counts.is_empty() {
        return Err(CliError::usage("[curve] needs at least one init scheme and one sample count"));
    }
    let data = load_data(cfg)?;
    let out = prepare_out_dir(cfg)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &scheme in &cfg.curve.inits {
        let (net, _) = init_network(cfg, scheme, &data.train)?;
        let points = learning_curve(
            &net,
            &data.train,
            &data.test,
            &cfg.curve.counts,
            &cfg.train_config(),
            cfg.curve.zero_mapping,
        )?;
        for p in &points {
            rows.push(vec![scheme.to_string(), p.samples.to_string(), num(p.accuracy), p.epochs.to_string()]);
        }
        series.push(Series {
            name: scheme.to_string(),
            points: points.iter().map(|p| (p.samples as f64, p.accuracy)).collect(),
        });
    }
    write_csv(&out.join("curve.csv"), &["init", "samples", "accuracy", "epochs"], &rows)?;
    write_text(
        &out.join("curve.svg"),
        &line_plot("Test accuracy vs. labeled samples", "labeled training samples", "test accuracy", &series),
    )?;
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig) -> CliResult<()> {
    let data = load_data(cfg)?;
    let out = prepare_out_dir(cfg)?;
    let result = trelu_sweep(
        &cfg.sweep.phis,
        &data.train,
        &data.test,
        &SweepConfig {
            init: cfg.init,
            kmeans: cfg.kmeans_template(),
            train: cfg.train_config(),
        },
    )?;
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| vec![r.phi.to_string(), num(r.accuracy), r.epochs.to_string()])
        .collect();
    write_csv(&out.join("sweep.csv"), &["phi", "accuracy", "epochs"], &rows)?;
    write_csv(&out.join("sweep_best.csv"), &["best_phi"], &[vec![result.best_phi.to_string()]])?;
    info!("best threshold {}", result.best_phi);
    Ok(())
}

pub fn analyze(cfg: &ExperimentConfig, checkpoint_in: Option<&Path>) -> CliResult<()> {
    let data = load_data(cfg)?;
    let net = match checkpoint_in {
        Some(p) => load_checkpoint(cfg, p)?,
        None => init_network(cfg, cfg.init, &data.train)?.0,
    };
    let out = prepare_out_dir(cfg)?;
    let a = &cfg.analyze;

    let stats_data = &data.test[..a.stats_samples.min(data.test.len())];
    let stats = cluster_statistics(&net, stats_data, 0..net.depth())?;
    let rows: Vec<Vec<String>> = stats
        .layers
        .iter()
        .map(|s| {
            vec![
                s.name.clone(),
                s.anchors.to_string(),
                s.cases.to_string(),
                num(s.mean_primary_output),
                num(s.mean_relevant),
                num(s.mean_auxiliary),
                num(s.no_primary_fraction),
            ]
        })
        .collect();
    write_csv(
        &out.join("cluster_layers.csv"),
        &["layer", "anchors", "cases", "mean_primary_output", "mean_relevant", "mean_auxiliary", "no_primary_fraction"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = stats
        .samples
        .iter()
        .map(|s| {
            vec![
                s.sample.to_string(),
                net.layer(s.layer).name.clone(),
                s.primary.map(|p| p.to_string()).unwrap_or_default(),
                s.relevant.to_string(),
                s.auxiliary.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("cluster_samples.csv"), &["sample", "layer", "primary", "relevant", "auxiliary"], &rows)?;

    let layer = a.gallery_layer.unwrap_or(net.depth() - 1);
    if layer >= net.depth() {
        return Err(CliError::usage(format!("[analyze] gallery_layer {layer} out of range (depth {})", net.depth())));
    }
    let gallery = out.join("gallery");
    fs::create_dir_all(&gallery).map_err(CliError::io(&gallery))?;
    let nearest = nearest_images_to_anchors(&net, &data.test, layer)?;
    let mut rows = Vec::new();
    for n in &nearest {
        let file = format!("anchor_{:03}.pgm", n.anchor);
        let img = &data.test[n.image];
        fs::write(gallery.join(&file), pgm(&img.pixels)).map_err(CliError::io(gallery.join(&file)))?;
        rows.push(vec![
            n.anchor.to_string(),
            n.image.to_string(),
            img.label.to_string(),
            num(f64::from(n.similarity)),
            file,
        ]);
    }
    write_csv(&gallery.join("index.csv"), &["anchor", "image", "label", "similarity", "file"], &rows)?;

    let sub_dir = out.join("subclasses");
    fs::create_dir_all(&sub_dir).map_err(CliError::io(&sub_dir))?;
    let mut summary = Vec::new();
    let mut exemplars = Vec::new();
    for class in 0..net.class_count() as u8 {
        let split = subclass_split(&net, &data.test, class, a.subclasses, cfg.seed)?;
        summary.push(vec![
            class.to_string(),
            split.members.len().to_string(),
            split.flat.to_string(),
            opt_num(split.mean_intra_distance),
            opt_num(split.mean_inter_distance),
        ]);
        for (j, &image) in split.exemplars.iter().enumerate() {
            let size = split.assignments.iter().filter(|&&c| c == j).count();
            let file = format!("class_{class}_sub_{j}.pgm");
            fs::write(sub_dir.join(&file), pgm(&data.test[image].pixels)).map_err(CliError::io(sub_dir.join(&file)))?;
            exemplars.push(vec![class.to_string(), j.to_string(), size.to_string(), image.to_string(), file]);
        }
    }
    write_csv(
        &out.join("subclasses.csv"),
        &["class", "members", "flat", "mean_intra_distance", "mean_inter_distance"],
        &summary,
    )?;
    write_csv(&sub_dir.join("index.csv"), &["class", "subclass", "size", "image", "file"], &exemplars)?;
    Ok(())
}
