//! Experiment configuration files.
//!
//! A config is a TOML document (or the same structure as JSON) with
//! top-level run settings and the sections `population`,
//! `population.pool`, `algorithm`, `privacy`, `training` and `ditto`.
//! Unknown keys are rejected. Every omitted key is filled with a default
//! that may depend on the population kind or the algorithm, and
//! [`render_toml`] writes the fully resolved form back out.
//!
//! ```toml
//! seed = 1
//! rounds = 50
//! cohort_fraction = 0.1
//!
//! [population]
//! kind = "label_shard"        # or point_estimation, linear_regression
//! n_clients = 200
//! samples_per_client = 20
//! rho_np = 0.05
//! skew_digit = 7
//!
//! [population.pool]
//! type = "synthetic"          # or idx with images = "...", labels = "..."
//!
//! [algorithm]
//! name = "feo2"               # or fedavg, dp_fedavg
//! r = 0.1
//!
//! [privacy]
//! z = 1.0
//!
//! [ditto]
//! lambda_p = 0.005
//! ```

use std::path::Path;

use feo2_core::analytic::AnalyticParams;
use feo2_core::datagen::{PoolSource, PopulationKind, PopulationSpec};
use feo2_core::personalization::DittoConfig;
use feo2_core::privacy::DpConfig;
use feo2_core::simulate::{Algorithm, ExperimentConfig, FeO2Config, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub cohort_fraction: Option<f64>,
    pub population: PopulationSection,
    #[serde(default)]
    pub algorithm: AlgorithmSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub training: TrainingSection,
    pub ditto: Option<DittoSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub kind: PopulationKind,
    pub n_clients: usize,
    pub samples_per_client: Option<usize>,
    pub rho_np: Option<f64>,
    pub skew_digit: Option<u8>,
    pub test_fraction: Option<f64>,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub beta2: Option<f64>,
    pub tau2: Option<f64>,
    pub gamma2: Option<f64>,
    pub pool: Option<PoolSource>,
}

impl Default for PopulationSection {
    fn default() -> Self {
        PopulationSection {
            kind: PopulationKind::PointEstimation,
            n_clients: 0,
            samples_per_client: None,
            rho_np: None,
            skew_digit: None,
            test_fraction: None,
            seed: None,
            dim: None,
            beta2: None,
            tau2: None,
            gamma2: None,
            pool: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    pub name: Option<Algorithm>,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub z: Option<f64>,
    pub z_b: Option<f64>,
    pub clip_norm: Option<f64>,
    pub kappa: Option<f64>,
    pub eta_b: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    /// Zero means full-batch steps.
    pub batch_size: Option<usize>,
    pub server_learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DittoSection {
    pub lambda_p: Option<f64>,
    pub lambda_np: Option<f64>,
    pub eta_p: Option<f64>,
}

pub const DEFAULT_SAMPLES_PER_CLIENT: usize = 20;
pub const DEFAULT_LABEL_BATCH: usize = 10;

/// Encoding of a config document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

fn config_err(key: &str, constraint: &str) -> CliError {
    CliError::Config(format!("{key}: {constraint}"))
}

/// Read, resolve and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    resolve(&read_file_config(path)?)
}

/// Read a config file without resolving defaults.
pub fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_file_config(&text, Format::from_path(path))
}

pub fn parse_file_config(text: &str, format: Format) -> Result<FileConfig, CliError> {
    match format {
        Format::Toml => toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string() + &location(&e))),
        Format::Json => serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string())),
    }
}

pub fn parse_config_str(text: &str, format: Format) -> Result<ExperimentConfig, CliError> {
    resolve(&parse_file_config(text, format)?)
}

fn location(e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => format!(" (at byte {})", span.start),
        None => String::new(),
    }
}

/// Fill defaults and check every constraint.
pub fn resolve(file: &FileConfig) -> Result<ExperimentConfig, CliError> {
    let seed = file.seed.unwrap_or(0);
    let pop = &file.population;
    let estimation = pop.kind != PopulationKind::LabelShard;
    let algorithm = file.algorithm.name.unwrap_or(Algorithm::FeO2);

    if pop.n_clients == 0 {
        return Err(config_err("population.n_clients", "must be >= 1"));
    }
    let samples = pop.samples_per_client.unwrap_or(DEFAULT_SAMPLES_PER_CLIENT);
    let rho_np = pop.rho_np.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&rho_np) {
        return Err(config_err("population.rho_np", "must be in [0,1]"));
    }
    let n_np = (rho_np * pop.n_clients as f64).round() as usize;

    let analytic = if estimation {
        for (key, present) in [("population.pool", pop.pool.is_some()), ("population.skew_digit", pop.skew_digit.is_some())] {
            if present {
                return Err(config_err(key, "only valid for label_shard populations"));
            }
        }
        let dim = pop.dim.unwrap_or(1);
        let p = AnalyticParams::new(
            pop.n_clients,
            pop.n_clients - n_np,
            samples,
            dim,
            pop.beta2.unwrap_or(1.0),
            pop.tau2.unwrap_or(0.5),
            pop.gamma2.unwrap_or(0.0),
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        Some(p)
    } else {
        for (key, present) in [
            ("population.dim", pop.dim.is_some()),
            ("population.beta2", pop.beta2.is_some()),
            ("population.tau2", pop.tau2.is_some()),
            ("population.gamma2", pop.gamma2.is_some()),
        ] {
            if present {
                return Err(config_err(key, "only valid for estimation populations"));
            }
        }
        None
    };

    let population = PopulationSpec {
        kind: pop.kind,
        analytic,
        n_clients: pop.n_clients,
        samples_per_client: samples,
        rho_np,
        skew: pop.skew_digit,
        test_fraction: pop.test_fraction.unwrap_or(if estimation { 0.0 } else { 0.2 }),
        source: if estimation { None } else { Some(pop.pool.clone().unwrap_or_default()) },
        seed: pop.seed.unwrap_or(seed),
    };

    let r = file.algorithm.r.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&r) {
        return Err(config_err("algorithm.r", "r must be in [0,1]"));
    }
    let pr = &file.privacy;
    let defaults = DpConfig::default();
    let privacy = DpConfig {
        z: pr.z.unwrap_or(if algorithm == Algorithm::FedAvg { 0.0 } else { defaults.z }),
        z_b: pr.z_b.unwrap_or(defaults.z_b),
        initial_clip: pr.clip_norm.unwrap_or(defaults.initial_clip),
        kappa: pr.kappa.unwrap_or(defaults.kappa),
        eta_b: pr.eta_b.unwrap_or(defaults.eta_b),
        delta: pr.delta.unwrap_or(defaults.delta),
    };

    let tr = &file.training;
    let batch_size = match tr.batch_size {
        Some(0) => None,
        Some(b) => Some(b),
        None if estimation => None,
        None => Some(DEFAULT_LABEL_BATCH),
    };
    let training = TrainingConfig {
        learning_rate: tr.learning_rate.unwrap_or(if estimation { 1.0 } else { 0.1 }),
        epochs: tr.epochs.unwrap_or(1),
        batch_size,
        server_learning_rate: tr.server_learning_rate.unwrap_or(1.0),
    };

    let ditto = file.ditto.as_ref().map(|d| {
        let lambda_p = d.lambda_p.unwrap_or(1.0);
        DittoConfig {
            lambda_p,
            lambda_np: d.lambda_np.unwrap_or(lambda_p),
            eta_p: d.eta_p.unwrap_or(training.learning_rate),
        }
    });

    let cfg = ExperimentConfig {
        population,
        algorithm,
        feo2: FeO2Config { ratio: r, privacy },
        ditto,
        training,
        rounds: file.rounds.unwrap_or(1),
        cohort_fraction: file.cohort_fraction.unwrap_or(1.0),
        master_seed: seed,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Fully explicit file form of a resolved config.
pub fn to_file_config(cfg: &ExperimentConfig) -> FileConfig {
    let p = &cfg.population;
    let a = p.analytic.as_ref();
    let dp = &cfg.feo2.privacy;
    FileConfig {
        seed: Some(cfg.master_seed),
        rounds: Some(cfg.rounds),
        cohort_fraction: Some(cfg.cohort_fraction),
        population: PopulationSection {
            kind: p.kind,
            n_clients: p.n_clients,
            samples_per_client: Some(p.samples_per_client),
            rho_np: Some(p.rho_np),
            skew_digit: p.skew,
            test_fraction: Some(p.test_fraction),
            seed: Some(p.seed),
            dim: a.map(|a| a.dim),
            beta2: a.map(|a| a.beta2),
            tau2: a.map(|a| a.tau2),
            gamma2: a.map(|a| a.gamma2),
            pool: p.source.clone(),
        },
        algorithm: AlgorithmSection {
            name: Some(cfg.algorithm),
            r: Some(cfg.feo2.ratio),
        },
        privacy: PrivacySection {
            z: Some(dp.z),
            z_b: Some(dp.z_b),
            clip_norm: Some(dp.initial_clip),
            kappa: Some(dp.kappa),
            eta_b: Some(dp.eta_b),
            delta: Some(dp.delta),
        },
        training: TrainingSection {
            learning_rate: Some(cfg.training.learning_rate),
            epochs: Some(cfg.training.epochs),
            batch_size: Some(cfg.training.batch_size.unwrap_or(0)),
            server_learning_rate: Some(cfg.training.server_learning_rate),
        },
        ditto: cfg.ditto.map(|d| DittoSection {
            lambda_p: Some(d.lambda_p),
            lambda_np: Some(d.lambda_np),
            eta_p: Some(d.eta_p),
        }),
    }
}

/// Resolved config as TOML, every default written out.
pub fn render_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(&to_file_config(cfg)).expect("config structure is always representable in TOML")
}

/// Resolved config as pretty JSON.
pub fn render_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(&to_file_config(cfg)).expect("config is serializable")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[population]\nkind = \"point_estimation\"\nn_clients = 10\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL, Format::Toml).unwrap();
        assert_eq!(cfg.training.epochs, 1);
        assert_eq!(cfg.feo2.privacy.z_b, 0.0);
        assert_eq!(cfg.feo2.privacy.kappa, 0.5);
        assert_eq!(cfg.population.samples_per_client, 20);
        assert_eq!(cfg.algorithm, Algorithm::FeO2);
        assert_eq!(cfg.training.batch_size, None);
    }

    #[test]
    fn ratio_out_of_range_is_named() {
        let text = format!("{MINIMAL}[algorithm]\nr = 1.5\n");
        let err = parse_config_str(&text, Format::Toml).unwrap_err();
        assert!(err.to_string().contains("r must be in [0,1]"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}[privacy]\nnoise = 2.0\n");
        let err = parse_config_str(&text, Format::Toml).unwrap_err();
        assert!(err.to_string().contains("noise"), "{err}");
    }

    #[test]
    fn fedavg_defaults_to_no_noise() {
        let text = format!("{MINIMAL}[algorithm]\nname = \"fedavg\"\n");
        assert_eq!(parse_config_str(&text, Format::Toml).unwrap().feo2.privacy.z, 0.0);
        let text = format!("{MINIMAL}[algorithm]\nname = \"dp_fedavg\"\n");
        assert_eq!(parse_config_str(&text, Format::Toml).unwrap().feo2.privacy.z, 1.0);
    }

    #[test]
    fn label_shard_defaults() {
        let text = "[population]\nkind = \"label_shard\"\nn_clients = 20\nskew_digit = 7\nrho_np = 0.05\n";
        let cfg = parse_config_str(text, Format::Toml).unwrap();
        assert_eq!(cfg.training.batch_size, Some(10));
        assert_eq!(cfg.population.test_fraction, 0.2);
        assert!(cfg.population.source.is_some());
    }

    #[test]
    fn misplaced_keys_are_rejected() {
        let text = "[population]\nkind = \"label_shard\"\nn_clients = 20\ntau2 = 0.5\n";
        assert!(parse_config_str(text, Format::Toml).is_err());
        let text = format!("{MINIMAL}skew_digit = 7\n");
        assert!(parse_config_str(&text, Format::Toml).is_err());
    }

    #[test]
    fn json_is_accepted() {
        let text = r#"{"population": {"kind": "point_estimation", "n_clients": 10}}"#;
        assert_eq!(
            parse_config_str(text, Format::Json).unwrap(),
            parse_config_str(MINIMAL, Format::Toml).unwrap()
        );
    }
}
