//! Experiment configuration: a TOML file with sections, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use recos::analysis::LabelMapping;
use recos::{InitScheme, KMeansConfig, LossKind, Rectifier, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_with::{serde_as, DisplayFromStr};

use crate::error::{CliError, CliResult};

#[serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory holding the four MNIST IDX files.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde_as(as = "DisplayFromStr")]
    pub init: InitScheme,
    #[serde_as(as = "DisplayFromStr")]
    pub rectifier: Rectifier,
    /// Size of the stratified training subset; all samples when absent.
    pub samples: Option<usize>,
    pub train: TrainSection,
    pub kmeans: KMeansSection,
    pub eval: EvalSection,
    pub curve: CurveSection,
    pub sweep: SweepSection,
    pub analyze: AnalyzeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            init: InitScheme::KMeans,
            rectifier: Rectifier::Relu,
            samples: None,
            train: TrainSection::default(),
            kmeans: KMeansSection::default(),
            eval: EvalSection::default(),
            curve: CurveSection::default(),
            sweep: SweepSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

#[serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde_as(as = "DisplayFromStr")]
    pub loss: LossKind,
    pub convergence_tol: f64,
    pub patience: usize,
    pub test_every: usize,
    pub align_output: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            loss: t.loss,
            convergence_tol: t.convergence_tol,
            patience: t.patience,
            test_every: t.test_every,
            align_output: t.align_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansSection {
    pub max_iter: usize,
    pub tol: f64,
    pub sample_cap: usize,
    pub flat_threshold: f32,
    pub calibrate_gain: bool,
}

impl Default for KMeansSection {
    fn default() -> Self {
        let k = KMeansConfig::default();
        KMeansSection {
            max_iter: k.max_iter,
            tol: k.tol,
            sample_cap: k.sample_cap,
            flat_threshold: k.flat_threshold,
            calibrate_gain: k.calibrate_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Also score the raw decision rule under both node→label mappings.
    pub unsupervised: bool,
}

#[serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSection {
    pub counts: Vec<usize>,
    #[serde_as(as = "Vec<DisplayFromStr>")]
    pub inits: Vec<InitScheme>,
    /// Mapping used for the zero-label point.
    #[serde_as(as = "DisplayFromStr")]
    pub zero_mapping: LabelMapping,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            counts: vec![0, 50, 100, 250, 500, 1000],
            inits: vec![InitScheme::KMeans, InitScheme::Random],
            zero_mapping: LabelMapping::OptimalAssignment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub phis: Vec<f32>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            phis: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Layer whose anchors get a nearest-image gallery; the output layer
    /// when absent.
    pub gallery_layer: Option<usize>,
    /// Test images used for cluster statistics.
    pub stats_samples: usize,
    /// Sub-clusters per digit class.
    pub subclasses: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            gallery_layer: None,
            stats_samples: 1000,
            subclasses: 4,
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub init: Option<InitScheme>,
    pub rectifier: Option<Rectifier>,
    pub samples: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))
    }

    pub fn resolve(file: Option<&Path>, overrides: Overrides) -> CliResult<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let Overrides {
            data_dir,
            out_dir,
            seed,
            init,
            rectifier,
            samples,
        } = overrides;
        cfg.data_dir = data_dir.or(cfg.data_dir);
        cfg.out_dir = out_dir.unwrap_or(cfg.out_dir);
        cfg.seed = seed.unwrap_or(cfg.seed);
        cfg.init = init.unwrap_or(cfg.init);
        cfg.rectifier = rectifier.unwrap_or(cfg.rectifier);
        cfg.samples = samples.or(cfg.samples);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train_config().validate().map_err(|e| CliError::usage(format!("[train] {e}")))?;
        self.kmeans_template().validate().map_err(|e| CliError::usage(format!("[kmeans] {e}")))?;
        if self.samples == Some(0) {
            return Err(CliError::usage("--samples must be at least 1"));
        }
        if self.analyze.subclasses == 0 || self.analyze.stats_samples == 0 {
            return Err(CliError::usage("[analyze] subclasses and stats_samples must be at least 1"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            seed: self.seed,
            loss: t.loss,
            convergence_tol: t.convergence_tol,
            patience: t.patience,
            test_every: t.test_every,
            align_output: t.align_output,
        }
    }

    /// Per-layer `k` is filled in from the architecture.
    pub fn kmeans_template(&self) -> KMeansConfig {
        let k = &self.kmeans;
        KMeansConfig {
            k: 1,
            max_iter: k.max_iter,
            tol: k.tol,
            seed: self.seed,
            sample_cap: k.sample_cap,
            flat_threshold: k.flat_threshold,
            calibrate_gain: k.calibrate_gain,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}
