//! Config resolution: defaults, then the config file, then CLI flags, with
//! flags winning. The resolved snapshot is what the run manifest records.

use std::fs;
use std::path::Path;

use bgch_core::estimators::EstimatorSpec;
use bgch_core::training::{Ablations, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Keys accepted in the `key = value` config file. Every key mirrors a
/// training parameter; unknown keys are usage errors so typos cannot
/// silently fall back to defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    #[serde(alias = "disp_iters")]
    pub power_iterations: Option<usize>,
    pub epsilon: Option<f64>,
    pub estimator: Option<String>,
    pub n_terms: Option<u32>,
    #[serde(alias = "H")]
    pub half_period: Option<f64>,
    pub n_counts_harmonics: Option<bool>,
    pub clip: Option<f64>,
    pub temperature: Option<f64>,
    pub beta: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lr: Option<f64>,
    #[serde(alias = "batch")]
    pub batch_size: Option<usize>,
    #[serde(alias = "negatives")]
    pub neg_samples: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    pub patience: Option<usize>,
    pub eval_top_n: Option<usize>,
    pub test_ratio: Option<f64>,
    pub ablation: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::require_input(path)?;
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }
}

/// Values taken from CLI flags. `None` means the flag was not given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub estimator: Option<String>,
    pub n_terms: Option<u32>,
    pub half_period: Option<f64>,
    pub epsilon: Option<f64>,
    pub layers: Option<usize>,
    pub power_iterations: Option<usize>,
    pub dim: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub neg_samples: Option<usize>,
    pub ablation: Option<String>,
    pub top_n: Option<usize>,
}

/// A fully resolved run configuration plus the split ratio, which lives
/// outside `TrainConfig` because the split happens before training.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub test_ratio: f64,
}

/// Flat, serialization-stable mirror of a resolved configuration. Field
/// order here is the key order in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfigSnapshot {
    pub dim: usize,
    pub layers: usize,
    pub power_iterations: usize,
    pub epsilon: f64,
    pub estimator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_harmonic: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub neg_samples: usize,
    pub epochs: usize,
    pub seed: u64,
    /// 0 encodes "early stopping disabled"; TOML has no null.
    pub patience: usize,
    pub eval_top_n: usize,
    pub test_ratio: f64,
    pub ablation: String,
}

pub const ABLATION_NAMES: [&str; 6] =
    ["no_fd", "no_ah_ta", "no_ah_rf", "learnable_factors", "no_bpr", "no_rec"];

pub fn parse_ablation(name: &str) -> Result<Ablations> {
    let mut a = Ablations::default();
    match name {
        "none" => {}
        "no_fd" => a.no_fd = true,
        "no_ah_ta" => a.no_ah_ta = true,
        "no_ah_rf" => a.no_ah_rf = true,
        "learnable_factors" => a.learnable_factors = true,
        "no_bpr" => a.no_bpr = true,
        "no_rec" => a.no_rec = true,
        other => {
            return Err(Error::Usage(format!(
                "unknown ablation {other:?}; expected one of none, {}",
                ABLATION_NAMES.join(", ")
            )))
        }
    }
    Ok(a)
}

pub fn ablation_label(a: &Ablations) -> &'static str {
    if a.no_fd {
        "no_fd"
    } else if a.no_ah_ta {
        "no_ah_ta"
    } else if a.no_ah_rf {
        "no_ah_rf"
    } else if a.learnable_factors {
        "learnable_factors"
    } else if a.no_bpr {
        "no_bpr"
    } else if a.no_rec {
        "no_rec"
    } else {
        "none"
    }
}

/// Estimator parameters pooled from file and flags before the spec is built.
#[derive(Debug, Clone)]
struct EstimatorParams {
    name: String,
    n_terms: u32,
    half_period: f64,
    n_counts_harmonics: bool,
    clip: f64,
    temperature: f64,
    beta: f64,
}

fn build_estimator(p: &EstimatorParams) -> Result<EstimatorSpec> {
    let spec = match p.name.as_str() {
        "fourier" => EstimatorSpec::fourier(p.n_terms, p.half_period, p.n_counts_harmonics),
        "ste" => EstimatorSpec::Ste { clip: p.clip },
        "tanh" => EstimatorSpec::Tanh { temperature: p.temperature },
        "sigmoid" => EstimatorSpec::Sigmoid { temperature: p.temperature },
        "signswish" => EstimatorSpec::SignSwish { beta: p.beta },
        other => {
            return Err(Error::Usage(format!(
                "unknown estimator {other:?}; expected fourier, ste, tanh, sigmoid, or signswish"
            )))
        }
    };
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(spec)
}

/// Merges defaults, config file, and flag overrides into a validated
/// configuration. Validation failures surface as usage errors because every
/// input to this function came from the command line or the config file.
pub fn resolve(file: &FileConfig, ov: &Overrides) -> Result<ResolvedConfig> {
    let dim = ov.dim.or(file.dim).unwrap_or(64);
    let mut cfg = TrainConfig::new(dim);
    cfg.layers = ov.layers.or(file.layers).unwrap_or(cfg.layers);
    cfg.power_iterations = ov
        .power_iterations
        .or(file.power_iterations)
        .unwrap_or_else(|| cfg.power_iterations.min(cfg.layers));
    cfg.epsilon = ov.epsilon.or(file.epsilon).unwrap_or(cfg.epsilon);
    cfg.lambda1 = ov.lambda1.or(file.lambda1).unwrap_or(cfg.lambda1);
    cfg.lambda2 = ov.lambda2.or(file.lambda2).unwrap_or(cfg.lambda2);
    cfg.lr = ov.lr.or(file.lr).unwrap_or(cfg.lr);
    cfg.batch_size = ov.batch_size.or(file.batch_size).unwrap_or(cfg.batch_size);
    cfg.neg_samples = ov.neg_samples.or(file.neg_samples).unwrap_or(cfg.neg_samples);
    cfg.epochs = file.epochs.unwrap_or(cfg.epochs);
    cfg.seed = ov.seed.or(file.seed).unwrap_or(cfg.seed);
    if let Some(p) = file.patience {
        cfg.patience = if p == 0 { None } else { Some(p) };
    }
    cfg.eval_top_n = ov.top_n.or(file.eval_top_n).unwrap_or(cfg.eval_top_n);

    let params = EstimatorParams {
        name: ov
            .estimator
            .clone()
            .or_else(|| file.estimator.clone())
            .unwrap_or_else(|| "fourier".into()),
        n_terms: ov.n_terms.or(file.n_terms).unwrap_or(4),
        half_period: ov.half_period.or(file.half_period).unwrap_or(1.0),
        n_counts_harmonics: file.n_counts_harmonics.unwrap_or(false),
        clip: file.clip.unwrap_or(1.0),
        temperature: file.temperature.unwrap_or(1.0),
        beta: file.beta.unwrap_or(5.0),
    };
    cfg.estimator = build_estimator(&params)?;

    let ablation = ov
        .ablation
        .clone()
        .or_else(|| file.ablation.clone())
        .unwrap_or_else(|| "none".into());
    cfg.ablations = parse_ablation(&ablation)?;

    let test_ratio = file.test_ratio.unwrap_or(0.2);
    if !(0.0..1.0).contains(&test_ratio) {
        return Err(Error::Usage(format!("test_ratio must be in [0, 1), got {test_ratio}")));
    }
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(ResolvedConfig { train: cfg, test_ratio })
}

impl ResolvedConfig {
    pub fn snapshot(&self) -> ConfigSnapshot {
        let cfg = &self.train;
        let mut snap = ConfigSnapshot {
            dim: cfg.dim,
            layers: cfg.layers,
            power_iterations: cfg.power_iterations,
            epsilon: cfg.epsilon,
            estimator: cfg.estimator.name().to_string(),
            max_harmonic: None,
            half_period: None,
            clip: None,
            temperature: None,
            beta: None,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            neg_samples: cfg.neg_samples,
            epochs: cfg.epochs,
            seed: cfg.seed,
            patience: cfg.patience.unwrap_or(0),
            eval_top_n: cfg.eval_top_n,
            test_ratio: self.test_ratio,
            ablation: ablation_label(&cfg.ablations).to_string(),
        };
        match cfg.estimator {
            EstimatorSpec::Fourier { max_harmonic, half_period } => {
                snap.max_harmonic = Some(max_harmonic);
                snap.half_period = Some(half_period);
            }
            EstimatorSpec::Ste { clip } => snap.clip = Some(clip),
            EstimatorSpec::Tanh { temperature } | EstimatorSpec::Sigmoid { temperature } => {
                snap.temperature = Some(temperature)
            }
            EstimatorSpec::SignSwish { beta } => snap.beta = Some(beta),
        }
        snap
    }
}
