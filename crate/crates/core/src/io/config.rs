//! Experiment configuration: a flat sectioned key-value text format.
//!
//! ```text
//! # comment
//! [experiment]
//! master_seed = 42
//! output_dir = out
//!
//! [data]
//! source = synthetic-digits
//! train_size = 10000
//! test_size = 2000
//!
//! [defense]
//! labels = 5            # or: all, or a comma list
//! variant = single_square
//! kappa = 0.1
//! injection_ratio = 0.5
//!
//! [training]
//! epochs = 5
//! batch = 32
//! lr = 0.001
//!
//! [detector]
//! fpr = 0.05
//! neuron_fraction = 1.0
//!
//! [attack.pgd]
//! eps = 8               # 0-255 scale, normalized by /255
//! iterations = 100
//! ```
//!
//! Unknown sections and keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackConfig, AttackMethod};
use crate::io::seed::derive_seed;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("[{section}] missing required key '{key}'")]
    MissingKey { section: String, key: String },
    #[error("[{section}] {key} = '{value}': {msg}")]
    InvalidValue {
        section: String,
        key: String,
        value: String,
        msg: String,
    },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("[{section}] unknown key '{key}'")]
    UnknownKey { section: String, key: String },
    #[error("config invariant violated: {0}")]
    Invariant(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    SyntheticDigits { train_size: usize, test_size: usize },
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefendedLabels {
    All,
    Some(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSettings {
    pub labels: DefendedLabels,
    /// single_square or multi_square
    pub variant: String,
    pub kappa: f32,
    pub injection_ratio: f32,
    /// Square side for single_square trapdoors.
    pub side: usize,
    /// Trapdoors per defended label.
    pub count: usize,
    /// locations or intensities, for count > 1.
    pub set_variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub optimizer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    /// "default" or a layer index.
    pub layer: String,
    pub neuron_fraction: f32,
    pub fpr: f32,
}

/// One attack section: method plus overrides in 0-255 pixel conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub method: String,
    pub overrides: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub model: String,
    pub data: DataSource,
    pub defense: DefenseSettings,
    pub training: TrainingSettings,
    pub detector: DetectorSettings,
    pub attacks: Vec<AttackSettings>,
    /// The raw config text this value was parsed from.
    pub source_text: String,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let sections = parse_sections(text)?;
        for name in sections.keys() {
            let known = matches!(
                name.as_str(),
                "experiment" | "data" | "defense" | "training" | "detector"
            ) || name.starts_with("attack.");
            if !known {
                return Err(ConfigError::UnknownSection(name.clone()));
            }
        }

        let experiment = section(&sections, "experiment")?;
        check_keys(experiment, "experiment", &["master_seed", "output_dir", "model"])?;
        let master_seed: u64 = require(experiment, "experiment", "master_seed")?;
        let output_dir: String =
            get_or(experiment, "experiment", "output_dir", "out".to_string())?;
        let model: String = get_or(experiment, "experiment", "model", "mnist_cnn".to_string())?;

        let data_sec = section(&sections, "data")?;
        let source: String = get_or(data_sec, "data", "source", "synthetic-digits".to_string())?;
        let data = match source.as_str() {
            "synthetic-digits" => {
                check_keys(data_sec, "data", &["source", "train_size", "test_size"])?;
                DataSource::SyntheticDigits {
                    train_size: get_or(data_sec, "data", "train_size", 10_000)?,
                    test_size: get_or(data_sec, "data", "test_size", 2_000)?,
                }
            }
            "blobs" => {
                check_keys(
                    data_sec,
                    "data",
                    &["source", "classes", "dim", "per_class", "test_per_class"],
                )?;
                DataSource::Blobs {
                    classes: get_or(data_sec, "data", "classes", 4)?,
                    dim: get_or(data_sec, "data", "dim", 16)?,
                    per_class: get_or(data_sec, "data", "per_class", 100)?,
                    test_per_class: get_or(data_sec, "data", "test_per_class", 50)?,
                }
            }
            "idx" => {
                check_keys(
                    data_sec,
                    "data",
                    &[
                        "source",
                        "train_images",
                        "train_labels",
                        "test_images",
                        "test_labels",
                    ],
                )?;
                DataSource::Idx {
                    train_images: PathBuf::from(require::<String>(
                        data_sec,
                        "data",
                        "train_images",
                    )?),
                    train_labels: PathBuf::from(require::<String>(
                        data_sec,
                        "data",
                        "train_labels",
                    )?),
                    test_images: PathBuf::from(require::<String>(data_sec, "data", "test_images")?),
                    test_labels: PathBuf::from(require::<String>(data_sec, "data", "test_labels")?),
                }
            }
            other => {
                return Err(ConfigError::InvalidValue {
                    section: "data".into(),
                    key: "source".into(),
                    value: other.into(),
                    msg: "expected synthetic-digits | blobs | idx".into(),
                })
            }
        };

        let defense_sec = section(&sections, "defense")?;
        check_keys(
            defense_sec,
            "defense",
            &[
                "labels",
                "variant",
                "kappa",
                "injection_ratio",
                "side",
                "count",
                "set_variant",
            ],
        )?;
        let labels_raw: String = get_or(defense_sec, "defense", "labels", "all".to_string())?;
        let labels = if labels_raw == "all" {
            DefendedLabels::All
        } else {
            let mut out = Vec::new();
            for part in labels_raw.split(',') {
                out.push(part.trim().parse::<usize>().map_err(|_| {
                    ConfigError::InvalidValue {
                        section: "defense".into(),
                        key: "labels".into(),
                        value: labels_raw.clone(),
                        msg: "expected 'all' or a comma-separated label list".into(),
                    }
                })?);
            }
            DefendedLabels::Some(out)
        };
        let defense = DefenseSettings {
            labels,
            variant: get_or(defense_sec, "defense", "variant", "single_square".to_string())?,
            kappa: get_or(defense_sec, "defense", "kappa", 0.1)?,
            injection_ratio: get_or(defense_sec, "defense", "injection_ratio", 0.5)?,
            side: get_or(defense_sec, "defense", "side", 6)?,
            count: get_or(defense_sec, "defense", "count", 1)?,
            set_variant: get_or(defense_sec, "defense", "set_variant", "locations".to_string())?,
        };
        if !(defense.variant == "single_square" || defense.variant == "multi_square") {
            return Err(ConfigError::InvalidValue {
                section: "defense".into(),
                key: "variant".into(),
                value: defense.variant,
                msg: "expected single_square | multi_square".into(),
            });
        }

        let training_sec = section(&sections, "training")?;
        check_keys(training_sec, "training", &["epochs", "batch", "lr", "optimizer"])?;
        let training = TrainingSettings {
            epochs: get_or(training_sec, "training", "epochs", 5)?,
            batch: get_or(training_sec, "training", "batch", 32)?,
            lr: get_or(training_sec, "training", "lr", 0.001)?,
            optimizer: get_or(training_sec, "training", "optimizer", "adam".to_string())?,
        };

        let detector_sec = section(&sections, "detector")?;
        check_keys(detector_sec, "detector", &["layer", "neuron_fraction", "fpr"])?;
        let detector = DetectorSettings {
            layer: get_or(detector_sec, "detector", "layer", "default".to_string())?,
            neuron_fraction: get_or(detector_sec, "detector", "neuron_fraction", 1.0)?,
            fpr: get_or(detector_sec, "detector", "fpr", 0.05)?,
        };

        let mut attacks = Vec::new();
        for (name, body) in &sections {
            if let Some(method) = name.strip_prefix("attack.") {
                if AttackMethod::parse(method).is_none() {
                    return Err(ConfigError::InvalidValue {
                        section: name.clone(),
                        key: "method".into(),
                        value: method.into(),
                        msg: "unknown attack method".into(),
                    });
                }
                attacks.push(AttackSettings {
                    method: method.to_string(),
                    overrides: body.clone(),
                });
            }
        }

        let config = ExperimentConfig {
            master_seed,
            output_dir: PathBuf::from(output_dir),
            model,
            data,
            defense,
            training,
            detector,
            attacks,
            source_text: text.to_string(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let num_classes = self.num_classes();
        if let DefendedLabels::Some(labels) = &self.defense.labels {
            if labels.is_empty() {
                return Err(ConfigError::Invariant("no defended labels".into()));
            }
            for &l in labels {
                if l >= num_classes {
                    return Err(ConfigError::Invariant(format!(
                        "defended label {l} out of range for {num_classes} classes"
                    )));
                }
            }
        }
        if !(0.0 < self.detector.fpr && self.detector.fpr < 1.0) {
            return Err(ConfigError::Invariant(format!(
                "detector fpr {} outside (0,1)",
                self.detector.fpr
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.data {
            DataSource::SyntheticDigits { .. } => 10,
            DataSource::Blobs { classes, .. } => *classes,
            DataSource::Idx { .. } => 10,
        }
    }

    pub fn defended_labels(&self) -> Vec<usize> {
        match &self.defense.labels {
            DefendedLabels::All => (0..self.num_classes()).collect(),
            DefendedLabels::Some(l) => l.clone(),
        }
    }

    /// Attack config for one section, applying 0-255 scale conventions:
    /// `eps` divides by 255, `step` is a fraction of eps.
    pub fn attack_config(&self, settings: &AttackSettings) -> Result<AttackConfig, ConfigError> {
        let method = AttackMethod::parse(&settings.method).expect("validated on parse");
        let seed = derive_seed(self.master_seed, "attack", &settings.method);
        let mut cfg = AttackConfig::preset(method, seed);
        for (key, value) in &settings.overrides {
            let bad = |msg: &str| ConfigError::InvalidValue {
                section: format!("attack.{}", settings.method),
                key: key.clone(),
                value: value.clone(),
                msg: msg.into(),
            };
            let parse_f32 = || value.parse::<f32>().map_err(|_| bad("expected a number"));
            let parse_usize = || value.parse::<usize>().map_err(|_| bad("expected an integer"));
            match key.as_str() {
                "eps" => {
                    cfg.eps = parse_f32()? / 255.0;
                    cfg.step_size = 0.1 * cfg.eps;
                }
                "iterations" => cfg.iterations = parse_usize()?,
                "step" => cfg.step_size = parse_f32()? * cfg.eps,
                "cw_binary_steps" => cfg.cw.binary_steps = parse_usize()?,
                "cw_lr" => cfg.cw.lr = parse_f32()?,
                "cw_confidence" => cfg.cw.confidence = parse_f32()?,
                "cw_abort_early" => {
                    cfg.cw.abort_early = value.parse::<bool>().map_err(|_| bad("expected a bool"))?
                }
                "en_beta" => cfg.en.beta = parse_f32()?,
                "spsa_lr" => cfg.spsa.lr = parse_f32()?,
                "spsa_perturbation" => cfg.spsa.perturbation_size = parse_f32()?,
                "spsa_probes" => cfg.spsa.probes = parse_usize()?,
                "distance_weight" => cfg.adaptive.distance_weight = parse_f32()?,
                "probe_count" => cfg.adaptive.probe_count = parse_usize()?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        section: format!("attack.{}", settings.method),
                        key: key.clone(),
                    })
                }
            }
        }
        Ok(cfg)
    }
}

type Sections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections, ConfigError> {
    let mut sections: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(ConfigError::Parse {
                line: i + 1,
                msg: "unterminated section header".into(),
            })?;
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: "empty section name".into(),
                });
            }
            sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            });
        };
        let section = current.as_ref().ok_or(ConfigError::Parse {
            line: i + 1,
            msg: "key before any [section]".into(),
        })?;
        sections
            .get_mut(section)
            .unwrap()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(sections)
}

fn section<'a>(
    sections: &'a Sections,
    name: &str,
) -> Result<&'a BTreeMap<String, String>, ConfigError> {
    static EMPTY: std::sync::OnceLock<BTreeMap<String, String>> = std::sync::OnceLock::new();
    Ok(sections
        .get(name)
        .unwrap_or_else(|| EMPTY.get_or_init(BTreeMap::new)))
}

fn check_keys(
    body: &BTreeMap<String, String>,
    section: &str,
    allowed: &[&str],
) -> Result<(), ConfigError> {
    for key in body.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey {
                section: section.to_string(),
                key: key.clone(),
            });
        }
    }
    Ok(())
}

fn require<T: std::str::FromStr>(
    body: &BTreeMap<String, String>,
    section: &str,
    key: &str,
) -> Result<T, ConfigError> {
    let raw = body.get(key).ok_or_else(|| ConfigError::MissingKey {
        section: section.to_string(),
        key: key.to_string(),
    })?;
    raw.parse::<T>().map_err(|_| ConfigError::InvalidValue {
        section: section.to_string(),
        key: key.to_string(),
        value: raw.clone(),
        msg: "could not parse".into(),
    })
}

fn get_or<T: std::str::FromStr>(
    body: &BTreeMap<String, String>,
    section: &str,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match body.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse::<T>().map_err(|_| ConfigError::InvalidValue {
            section: section.to_string(),
            key: key.to_string(),
            value: raw.clone(),
            msg: "could not parse".into(),
        }),
    }
}
