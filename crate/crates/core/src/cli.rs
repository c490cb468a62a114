//! Command-line workflow: each subcommand reads the experiment config,
//! consumes artifacts produced by earlier stages from the output directory,
//! and writes its own artifact plus a one-line summary.
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, bad config
//! file), 2 runtime error from any pipeline stage.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attack::{oracle_signature_attack, vault_attack, AttackConfig, AttackMethod};
use crate::detect::Detector;
use crate::eval::{
    self, build_detector, build_model_for, build_registry, clean_train_config, distribution_csv,
    evaluate_outcome, load_data, training_config, EvalReport, SweepKind,
};
use crate::io::bundle::{load_bundle, save_bundle, ArtifactBundle};
use crate::io::config::ExperimentConfig;
use crate::metrics::similarity_distribution;
use crate::model::{train, Model};
use crate::trapdoor::{injection_success_rate, train_trapdoored};

/// Output-directory override honored across all subcommands.
pub const OUT_DIR_ENV: &str = "TRAPNET_OUT";

#[derive(Parser)]
#[command(
    name = "trapnet",
    about = "Trapdoor honeypot defense: train, calibrate, attack, evaluate",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the experiment config file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean (never-trapdoored) reference model.
    TrainClean(ConfigArg),
    /// Poison the training data and train the trapdoored model.
    TrainTrapdoor(ConfigArg),
    /// Compute trapdoor signatures and calibrate detection thresholds.
    Calibrate(ConfigArg),
    /// Run attacks against the trapdoored model, streaming JSON-lines records.
    Attack {
        #[command(flatten)]
        config: ConfigArg,
        /// Restrict to one attack method (default: every configured attack).
        #[arg(long)]
        method: Option<String>,
    },
    /// Flag the adversarial records produced by `attack`.
    Detect(ConfigArg),
    /// Full evaluation report from the trained artifacts.
    Evaluate(ConfigArg),
    /// One full train+attack+detect cycle per grid point.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// injection_ratio | trapdoor_count_locations |
        /// trapdoor_count_intensities | signature_layer | neuron_fraction
        #[arg(long)]
        kind: String,
        /// Comma-separated grid values.
        #[arg(long)]
        grid: String,
    },
    /// Re-print the summary of an existing report.json.
    Report(ConfigArg),
}

/// Entry point used by main and the CLI tests.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage text; all parse problems are
            // configuration errors
            let _ = e.print();
            return 1;
        }
    };
    let (config_path, rest) = match &cli.command {
        Command::TrainClean(c)
        | Command::TrainTrapdoor(c)
        | Command::Calibrate(c)
        | Command::Detect(c)
        | Command::Evaluate(c)
        | Command::Report(c) => (&c.config, None),
        Command::Attack { config, method } => (&config.config, method.clone()),
        Command::Sweep { config, kind, grid } => {
            (&config.config, Some(format!("{kind}|{grid}")))
        }
    };
    let mut config = match ExperimentConfig::from_file(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            config.output_dir = PathBuf::from(dir);
        }
    }
    let result = match &cli.command {
        Command::TrainClean(_) => train_clean(&config),
        Command::TrainTrapdoor(_) => train_trapdoor(&config),
        Command::Calibrate(_) => calibrate(&config),
        Command::Attack { .. } => attack(&config, rest.as_deref()),
        Command::Detect(_) => detect(&config),
        Command::Evaluate(_) => evaluate(&config),
        Command::Sweep { .. } => {
            let spec = rest.unwrap();
            let (kind, grid) = spec.split_once('|').unwrap();
            sweep_cmd(&config, kind, grid)
        }
        Command::Report(_) => report(&config),
    };
    match result {
        Ok(()) => 0,
        Err(StageError::Config(msg)) => {
            eprintln!("config error: {msg}");
            1
        }
        Err(StageError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

enum StageError {
    Config(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for StageError {
    fn from(e: E) -> Self {
        StageError::Runtime(e.to_string())
    }
}

fn artifact(config: &ExperimentConfig, name: &str) -> PathBuf {
    config.output_dir.join(name)
}

fn write_text(path: &Path, text: &str) -> Result<(), StageError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StageError::Runtime(e.to_string()))?;
    }
    std::fs::write(path, text).map_err(|e| StageError::Runtime(e.to_string()))?;
    Ok(())
}

fn load_model_artifact(
    config: &ExperimentConfig,
    name: &str,
    produced_by: &str,
) -> Result<(Model, ArtifactBundle), StageError> {
    let path = artifact(config, name);
    if !path.exists() {
        return Err(StageError::Runtime(format!(
            "missing artifact {}: run `trapnet {produced_by}` first",
            path.display()
        )));
    }
    let bundle = load_bundle(&path)?;
    let model = bundle.instantiate_model()?;
    Ok((model, bundle))
}

fn train_clean(config: &ExperimentConfig) -> Result<(), StageError> {
    let data = load_data(config)?;
    let seed = crate::io::seed::derive_seed(config.master_seed, "model", "init");
    let mut model = build_model_for(config, seed)?;
    let log = train(&mut model, &data.train, &clean_train_config(config))?;
    let acc = model.accuracy(&data.eval)?;
    let path = artifact(config, "clean.bundle");
    save_bundle(
        &ArtifactBundle::from_model(&model).with_config_text(&config.source_text),
        &path,
    )?;
    let final_loss = log.epochs.last().map(|e| e.loss).unwrap_or(f32::NAN);
    println!(
        "train-clean: accuracy {:.4} final-loss {:.4} -> {}",
        acc,
        final_loss,
        path.display()
    );
    Ok(())
}

fn train_trapdoor(config: &ExperimentConfig) -> Result<(), StageError> {
    let data = load_data(config)?;
    let seed = crate::io::seed::derive_seed(config.master_seed, "model", "init");
    let registry = build_registry(config)?;
    let base = build_model_for(config, seed)?;
    let (model, _) = train_trapdoored(base, &data.train, &registry, &training_config(config))?;
    let rates = injection_success_rate(&model, &data.eval, &registry)?;
    let min_rate = rates.values().cloned().fold(f32::INFINITY, f32::min);
    let acc = model.accuracy(&data.eval)?;
    let path = artifact(config, "trapdoored.bundle");
    save_bundle(
        &ArtifactBundle::from_model(&model)
            .with_registry(&registry)
            .with_config_text(&config.source_text),
        &path,
    )?;
    println!(
        "train-trapdoor: injection-success(min) {:.4} normal-accuracy {:.4} -> {}",
        min_rate,
        acc,
        path.display()
    );
    Ok(())
}

fn calibrate(config: &ExperimentConfig) -> Result<(), StageError> {
    let data = load_data(config)?;
    let (model, bundle) = load_model_artifact(config, "trapdoored.bundle", "train-trapdoor")?;
    let registry = bundle
        .registry
        .ok_or_else(|| StageError::Runtime("trapdoored bundle lacks a registry".into()))?;
    let detector = build_detector(config, &model, &registry, &data.calib)?;
    let fpr = detector.flag_rate(&model, &data.eval.inputs)?;
    let path = artifact(config, "detector.bundle");
    save_bundle(
        &ArtifactBundle::from_model(&model)
            .with_registry(&registry)
            .with_detector(&detector)
            .with_config_text(&config.source_text),
        &path,
    )?;
    println!(
        "calibrate: labels {:?} fpr-target {:.3} empirical-fpr {:.4} -> {}",
        detector.defended_labels(),
        detector.fpr_target,
        fpr,
        path.display()
    );
    Ok(())
}

/// One streamed record per crafted adversarial example.
#[derive(Serialize, Deserialize)]
pub struct AdversarialRecord {
    pub attack: String,
    pub index: usize,
    pub target_label: usize,
    pub success: bool,
    pub query_count: usize,
    pub final_loss: f32,
    pub l1: f32,
    pub l2: f32,
    pub linf: f32,
    pub x_adv: Vec<f32>,
}

fn attack(config: &ExperimentConfig, only: Option<&str>) -> Result<(), StageError> {
    let data = load_data(config)?;
    let (model, bundle) = load_model_artifact(config, "trapdoored.bundle", "train-trapdoor")?;
    let target = config.defended_labels()[0];
    let craft = data.eval.filter_label_ne(target);
    let mut lines = Vec::new();
    let mut summaries = Vec::new();
    for settings in &config.attacks {
        if let Some(only) = only {
            if settings.method != only {
                continue;
            }
        }
        let cfg = config.attack_config(settings)?;
        let outcome = run_attack_any(&model, &bundle, &craft, target, &cfg, config)?;
        for (i, r) in outcome.results.iter().enumerate() {
            let record = AdversarialRecord {
                attack: cfg.method.name().to_string(),
                index: i,
                target_label: target,
                success: r.success,
                query_count: r.query_count,
                final_loss: r.final_loss,
                l1: r.perturbation_norms.l1,
                l2: r.perturbation_norms.l2,
                linf: r.perturbation_norms.linf,
                x_adv: r.x_adv.to_vec(),
            };
            lines.push(serde_json::to_string(&record).unwrap());
        }
        summaries.push(format!(
            "{}={:.3}",
            cfg.method.name(),
            outcome.success_rate()
        ));
    }
    if summaries.is_empty() {
        return Err(StageError::Config(format!(
            "no configured attack matches {only:?}"
        )));
    }
    let path = artifact(config, "attacks.jsonl");
    write_text(&path, &(lines.join("\n") + "\n"))?;
    println!(
        "attack: success {{{}}} target {} -> {}",
        summaries.join(", "),
        target,
        path.display()
    );
    Ok(())
}

/// Adaptive attacks need extra artifacts (signatures, probes); standard
/// attacks go through the common dispatcher.
fn run_attack_any(
    model: &Model,
    bundle: &ArtifactBundle,
    craft: &crate::model::Dataset,
    target: usize,
    cfg: &AttackConfig,
    config: &ExperimentConfig,
) -> Result<crate::attack::AttackOutcome, StageError> {
    match cfg.method {
        AttackMethod::OracleSig => {
            let detector = bundle.detector.as_ref().ok_or_else(|| {
                StageError::Runtime("oracle attack needs a calibrated detector: run `trapnet calibrate` first".into())
            })?;
            let sigs = detector.signatures.get(&target).ok_or_else(|| {
                StageError::Runtime(format!("detector holds no signatures for label {target}"))
            })?;
            Ok(oracle_signature_attack(model, &craft.inputs, target, sigs, cfg)?)
        }
        AttackMethod::Vault => {
            let probes = craft.subset(
                &(0..cfg.adaptive.probe_count.min(craft.len())).collect::<Vec<_>>(),
            );
            let rest: Vec<usize> = (probes.len()..craft.len()).collect();
            let xs = craft.subset(&rest);
            let n_known = config.defense.count.max(1);
            Ok(vault_attack(model, &probes, &xs.inputs, target, n_known, cfg)?.outcome)
        }
        _ => Ok(crate::attack::run_standard_attack(model, &craft.inputs, target, cfg)?),
    }
}

fn detect(config: &ExperimentConfig) -> Result<(), StageError> {
    let (model, bundle) = load_model_artifact(config, "detector.bundle", "calibrate")?;
    let detector: Detector = bundle
        .detector
        .ok_or_else(|| StageError::Runtime("detector not calibrated: run `trapnet calibrate` first".into()))?;
    let records_path = artifact(config, "attacks.jsonl");
    if !records_path.exists() {
        return Err(StageError::Runtime(format!(
            "missing attack records {}: run `trapnet attack` first",
            records_path.display()
        )));
    }
    let text = std::fs::read_to_string(&records_path)?;
    let shape = model.spec.input_shape;
    let mut out_lines = Vec::new();
    let mut flagged = 0usize;
    let mut total = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: AdversarialRecord = serde_json::from_str(line)?;
        let x = crate::tensor::Tensor::new(
            &[1, shape[0], shape[1], shape[2]],
            record.x_adv.clone(),
        )?;
        let detection = detector.detect(&model, &x)?;
        total += 1;
        if detection.flag {
            flagged += 1;
        }
        out_lines.push(format!(
            "{{\"attack\":\"{}\",\"index\":{},\"flag\":{},\"label\":{},\"best_similarity\":{}}}",
            record.attack,
            record.index,
            detection.flag,
            detection.label,
            detection
                .best_similarity
                .map(|s| s.to_string())
                .unwrap_or_else(|| "null".into())
        ));
    }
    let path = artifact(config, "detections.jsonl");
    write_text(&path, &(out_lines.join("\n") + "\n"))?;
    println!(
        "detect: flagged {flagged}/{total} ({:.4}) -> {}",
        flagged as f32 / total.max(1) as f32,
        path.display()
    );
    Ok(())
}

fn evaluate(config: &ExperimentConfig) -> Result<(), StageError> {
    let data = load_data(config)?;
    let (clean_model, _) = load_model_artifact(config, "clean.bundle", "train-clean")?;
    let (trap_model, bundle) = load_model_artifact(config, "detector.bundle", "calibrate")?;
    let detector = bundle
        .detector
        .as_ref()
        .ok_or_else(|| StageError::Runtime("detector not calibrated: run `trapnet calibrate` first".into()))?;
    let registry = bundle
        .registry
        .as_ref()
        .ok_or_else(|| StageError::Runtime("bundle lacks a registry".into()))?;

    let started = std::time::Instant::now();
    let target = config.defended_labels()[0];
    let craft = data.eval.filter_label_ne(target);
    let mut attack_reports = Vec::new();
    let mut distributions = Vec::new();
    distributions.push(similarity_distribution(
        detector,
        &trap_model,
        &data.eval.inputs,
        "benign",
    )?);
    for settings in &config.attacks {
        let cfg = config.attack_config(settings)?;
        let outcome = run_attack_any(&trap_model, &bundle, &craft, target, &cfg, config)?;
        let report = evaluate_outcome(&trap_model, detector, &outcome, &data.eval, &cfg)?;
        let successes = outcome.successful_indices();
        if successes.len() >= crate::metrics::MIN_DISTRIBUTION_INPUTS {
            let adv_rows: Vec<crate::tensor::Tensor> =
                successes.iter().map(|&i| outcome.results[i].x_adv.clone()).collect();
            let adv = crate::tensor::Tensor::stack(&adv_rows)?;
            distributions.push(similarity_distribution(
                detector,
                &trap_model,
                &adv,
                cfg.method.name(),
            )?);
        }
        attack_reports.push(report);
    }

    let benign_sims = eval::pooled_similarities(detector, &trap_model, &data.eval.inputs)?;
    let report = EvalReport {
        task_id: "evaluate".into(),
        clean_model_hash: clean_model.params_hash(),
        trapdoored_model_hash: trap_model.params_hash(),
        normal_accuracy_clean: clean_model.accuracy(&data.eval)?,
        normal_accuracy_trapdoored: trap_model.accuracy(&data.eval)?,
        injection_success: injection_success_rate(&trap_model, &data.eval, registry)?,
        fpr_target: detector.fpr_target,
        empirical_fpr: detector.flag_rate(&trap_model, &data.eval.inputs)?,
        target_label: target,
        attacks: attack_reports,
        benign_similarity: crate::metrics::quantile_summary(&benign_sims),
        master_seed: config.master_seed,
        runtime_secs: started.elapsed().as_secs_f64(),
        config_text: config.source_text.clone(),
    };
    report.validate()?;

    write_text(&artifact(config, "report.json"), &report.to_json())?;
    let mut csv = String::from(EvalReport::csv_header());
    csv.push('\n');
    for row in report.to_csv_rows() {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_text(&artifact(config, "report.csv"), &csv)?;
    write_text(
        &artifact(config, "distributions.csv"),
        &distribution_csv(&distributions),
    )?;
    let summary: Vec<String> = report
        .attacks
        .iter()
        .map(|a| format!("{}:det={:.3}", a.attack, a.detection_rate_at_fpr))
        .collect();
    println!(
        "evaluate: acc {:.4}/{:.4} fpr {:.4} {{{}}} -> {}",
        report.normal_accuracy_clean,
        report.normal_accuracy_trapdoored,
        report.empirical_fpr,
        summary.join(", "),
        artifact(config, "report.json").display()
    );
    Ok(())
}

fn sweep_cmd(config: &ExperimentConfig, kind: &str, grid: &str) -> Result<(), StageError> {
    let kind = SweepKind::parse(kind)
        .ok_or_else(|| StageError::Config(format!("unknown sweep kind '{kind}'")))?;
    let values: Result<Vec<f64>, _> = grid.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| StageError::Config(format!("bad grid '{grid}'")))?;
    let reports = eval::sweep(kind, &values, config)?;
    let mut csv = String::from(EvalReport::csv_header());
    csv.push('\n');
    for report in &reports {
        for row in report.to_csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
        write_text(
            &artifact(config, &format!("sweep-{}.json", report.task_id.replace('=', "-"))),
            &report.to_json(),
        )?;
    }
    let path = artifact(config, "sweep.csv");
    write_text(&path, &csv)?;
    println!(
        "sweep: {} over {:?} ({} cycles) -> {}",
        kind.name(),
        values,
        reports.len(),
        path.display()
    );
    Ok(())
}

fn report(config: &ExperimentConfig) -> Result<(), StageError> {
    let path = artifact(config, "report.json");
    if !path.exists() {
        return Err(StageError::Runtime(format!(
            "missing report {}: run `trapnet evaluate` first",
            path.display()
        )));
    }
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    println!(
        "report: task {} seed {} acc {:.4}/{:.4} fpr {:.4} attacks {}",
        report.task_id,
        report.master_seed,
        report.normal_accuracy_clean,
        report.normal_accuracy_trapdoored,
        report.empirical_fpr,
        report
            .attacks
            .iter()
            .map(|a| format!("{}(succ={:.3},det={:.3},auc={:.3})", a.attack, a.attack_success, a.detection_rate_at_fpr, a.auc))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}
