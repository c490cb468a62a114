//! End-to-end experiment harness: trains clean and trapdoored models,
//! calibrates the detector, runs the attack suite, and aggregates metrics
//! into reproducible reports (JSON mirror plus stable-column CSV).

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{
    run_standard_attack, AttackConfig, AttackError, AttackOutcome,
};
use crate::detect::{
    build_signatures, features_at, sample_neuron_subset, DetectError, Detector, LayerKey,
};
use crate::io::config::{ConfigError, DataSource, ExperimentConfig};
use crate::io::idx::{load_idx, IdxError};
use crate::io::seed::derive_seed;
use crate::io::synth::{synth_blobs, synth_digits};
use crate::metrics::{
    detection_rate_at_fpr, quantile_summary, roc_auc, MetricsError, QuantileSummary,
    SimilarityDistribution,
};
use crate::model::{
    mlp_spec, mnist_cnn_spec, train, Dataset, Model, ModelError, TrainConfig,
};
use crate::optim::OptimizerConfig;
use crate::tensor::Tensor;
use crate::trapdoor::{
    inject, injection_success_rate, make_trapdoor_set, train_trapdoored,
    SetBaseConfig, SetVariant, TrapdoorError, TrapdoorRegistry, TrainingConfig,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trapdoor(#[from] TrapdoorError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("unlearning failed to reach injection success <= {target} within {epochs} epochs (reached {reached})")]
    UnlearningDidNotConverge {
        target: f32,
        epochs: usize,
        reached: f32,
    },
    #[error("unknown model spec '{0}'")]
    UnknownModel(String),
    #[error("{0}")]
    Invalid(String),
}

/// Per-attack row of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub config: AttackConfig,
    pub n_crafted: usize,
    pub n_successful: usize,
    pub attack_success: f32,
    /// Detection rate over successful examples at the report's FPR.
    pub detection_rate_at_fpr: f32,
    pub auc: f32,
    pub adv_similarity: QuantileSummary,
}

/// Full experiment outcome. Self-describing: embeds the config text and all
/// derived seeds so the run is reproducible from the report alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub clean_model_hash: String,
    pub trapdoored_model_hash: String,
    pub normal_accuracy_clean: f32,
    pub normal_accuracy_trapdoored: f32,
    pub injection_success: BTreeMap<usize, f32>,
    pub fpr_target: f32,
    pub empirical_fpr: f32,
    pub target_label: usize,
    pub attacks: Vec<AttackReport>,
    pub benign_similarity: QuantileSummary,
    pub master_seed: u64,
    pub runtime_secs: f64,
    pub config_text: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        let rates = self
            .attacks
            .iter()
            .flat_map(|a| [a.attack_success, a.detection_rate_at_fpr, a.auc])
            .chain([
                self.normal_accuracy_clean,
                self.normal_accuracy_trapdoored,
                self.empirical_fpr,
            ])
            .chain(self.injection_success.values().copied());
        for r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(EvalError::Invalid(format!("rate {r} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row per attack; stable column order documented in README.
    pub fn csv_header() -> &'static str {
        "task_id,attack,target_label,n_crafted,n_successful,attack_success,detection_rate_at_fpr,auc,fpr_target,empirical_fpr,normal_accuracy_clean,normal_accuracy_trapdoored,min_injection_success,master_seed"
    }

    pub fn to_csv_rows(&self) -> Vec<String> {
        let min_inj = self
            .injection_success
            .values()
            .cloned()
            .fold(f32::INFINITY, f32::min);
        self.attacks
            .iter()
            .map(|a| {
                format!(
                    "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                    self.task_id,
                    a.attack,
                    self.target_label,
                    a.n_crafted,
                    a.n_successful,
                    a.attack_success,
                    a.detection_rate_at_fpr,
                    a.auc,
                    self.fpr_target,
                    self.empirical_fpr,
                    self.normal_accuracy_clean,
                    self.normal_accuracy_trapdoored,
                    min_inj,
                    self.master_seed
                )
            })
            .collect()
    }
}

/// Long-format rows for similarity distributions:
/// tag, attack, percentile, value.
pub fn distribution_csv(rows: &[SimilarityDistribution]) -> String {
    let mut out = String::from("tag,percentile,value\n");
    for d in rows {
        for (p, v) in [
            (5, d.quantiles.p5),
            (25, d.quantiles.p25),
            (50, d.quantiles.p50),
            (75, d.quantiles.p75),
            (95, d.quantiles.p95),
        ] {
            out.push_str(&format!("{},{},{:.6}\n", d.tag, p, v));
        }
    }
    out
}

/// Materialized datasets plus the splits every stage shares: signature and
/// threshold calibration use `calib`, FPR and attack crafting use `eval`.
pub struct ExperimentData {
    pub train: Dataset,
    pub calib: Dataset,
    pub eval: Dataset,
}

pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData, EvalError> {
    let seed = derive_seed(config.master_seed, "data", "generate");
    let (train, test) = match &config.data {
        DataSource::SyntheticDigits {
            train_size,
            test_size,
        } => (
            synth_digits(*train_size, seed)?,
            synth_digits(*test_size, seed.wrapping_add(1))?,
        ),
        DataSource::Blobs {
            classes,
            dim,
            per_class,
            test_per_class,
        } => {
            // one draw so train and test share the cluster means
            let total = synth_blobs(*classes, *dim, per_class + test_per_class, seed)?;
            total.split_at(classes * per_class)
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(train_images, train_labels, None)?,
            load_idx(test_images, test_labels, None)?,
        ),
    };
    let (calib, eval) = test.split_at(test.len() / 2);
    Ok(ExperimentData { train, calib, eval })
}

pub fn build_model_for(config: &ExperimentConfig, seed: u64) -> Result<Model, EvalError> {
    match config.model.as_str() {
        "mnist_cnn" => Ok(Model::build(mnist_cnn_spec(), seed)?),
        name => {
            // mlp:<hidden1>,<hidden2>,...
            if let Some(spec) = name.strip_prefix("mlp:") {
                let hidden: Result<Vec<usize>, _> =
                    spec.split(',').map(|p| p.trim().parse::<usize>()).collect();
                let hidden = hidden.map_err(|_| EvalError::UnknownModel(name.to_string()))?;
                let dims = input_dim(config);
                Ok(Model::build(
                    mlp_spec(dims, &hidden, config.num_classes()),
                    seed,
                )?)
            } else {
                Err(EvalError::UnknownModel(name.to_string()))
            }
        }
    }
}

fn input_dim(config: &ExperimentConfig) -> usize {
    match &config.data {
        DataSource::Blobs { dim, .. } => *dim,
        _ => 28 * 28,
    }
}

fn input_shape(config: &ExperimentConfig) -> [usize; 3] {
    match &config.data {
        DataSource::Blobs { dim, .. } => [1, 1, *dim],
        _ => [1, 28, 28],
    }
}

/// Build the registry the config describes.
pub fn build_registry(config: &ExperimentConfig) -> Result<TrapdoorRegistry, EvalError> {
    let shape = input_shape(config);
    let seed = derive_seed(config.master_seed, "trapdoor", "registry");
    let labels = config.defended_labels();
    let mut registry = TrapdoorRegistry::new(seed, 0.8, 0.2);
    for &label in &labels {
        let set = if config.defense.count > 1 {
            let variant = match config.defense.set_variant.as_str() {
                "intensities" => SetVariant::Intensities,
                _ => SetVariant::Locations,
            };
            make_trapdoor_set(
                &SetBaseConfig {
                    shape,
                    side: config.defense.side,
                    kappa: config.defense.kappa,
                    target_label: label,
                },
                config.defense.count,
                variant,
                derive_seed(seed, "trapdoor", &format!("set:{label}")),
            )?
        } else if config.defense.variant == "multi_square" || labels.len() > 1 {
            // all-label style: five scattered 3x3 squares per label
            let full = TrapdoorRegistry::all_labels(shape, config.num_classes(), config.defense.kappa, seed)?;
            full.get(label)
                .cloned()
                .ok_or_else(|| EvalError::Invalid(format!("label {label} missing")))?
        } else {
            TrapdoorRegistry::single_label(
                shape,
                label,
                config.defense.side,
                config.defense.kappa,
                seed,
            )?
            .get(label)
            .cloned()
            .unwrap()
        };
        registry.insert(set)?;
    }
    Ok(registry)
}

pub fn training_config(config: &ExperimentConfig) -> TrainingConfig {
    TrainingConfig {
        injection_ratio: config.defense.injection_ratio,
        epochs: config.training.epochs,
        batch_size: config.training.batch,
        lr: config.training.lr,
        seed: derive_seed(config.master_seed, "training", "trapdoored"),
    }
}

pub fn clean_train_config(config: &ExperimentConfig) -> TrainConfig {
    let optimizer = if config.training.optimizer == "sgd" {
        OptimizerConfig::sgd(config.training.lr)
    } else {
        OptimizerConfig::adam(config.training.lr)
    };
    TrainConfig {
        epochs: config.training.epochs,
        batch_size: config.training.batch,
        optimizer,
        seed: derive_seed(config.master_seed, "training", "clean"),
    }
}

pub fn detector_layer(config: &ExperimentConfig, model: &Model) -> Result<LayerKey, EvalError> {
    match config.detector.layer.as_str() {
        "default" => Ok(LayerKey::Single(model.spec.default_feature_layer())),
        other => {
            let idx: usize = other
                .parse()
                .map_err(|_| EvalError::Invalid(format!("bad detector layer '{other}'")))?;
            Ok(LayerKey::Single(idx))
        }
    }
}

/// Build and calibrate a detector per the config (layer, neuron fraction,
/// FPR), using calibration data for both signatures and thresholds.
pub fn build_detector(
    config: &ExperimentConfig,
    model: &Model,
    registry: &TrapdoorRegistry,
    calib: &Dataset,
) -> Result<Detector, EvalError> {
    let layer = detector_layer(config, model)?;
    let indices = if config.detector.neuron_fraction < 1.0 {
        let (key, idx) = sample_neuron_subset(
            model,
            &match &layer {
                LayerKey::Single(i) => vec![*i],
                LayerKey::Concat(ids) => ids.clone(),
            },
            config.detector.neuron_fraction,
            derive_seed(config.master_seed, "detector", "neuron-subset"),
        )?;
        debug_assert_eq!(key, layer);
        Some(idx)
    } else {
        None
    };
    let det = build_signatures(
        model,
        registry,
        calib,
        &layer,
        indices.as_deref(),
        config.detector.fpr,
    )?;
    Ok(det.calibrate(model, calib, config.detector.fpr)?)
}

/// Crafted attack set plus its evaluation against a detector.
pub struct AttackEvaluation {
    pub outcome: AttackOutcome,
    pub report: AttackReport,
    pub successful_adv: Option<Tensor>,
}

/// Run one attack on `craft` inputs and measure detection of its successful
/// examples at the detector's FPR target against `benign_eval`.
pub fn evaluate_attack(
    model: &Model,
    detector: &Detector,
    craft: &Dataset,
    benign_eval: &Dataset,
    y_target: usize,
    cfg: &AttackConfig,
) -> Result<AttackEvaluation, EvalError> {
    let outcome = run_standard_attack(model, &craft.inputs, y_target, cfg)?;
    let report = evaluate_outcome(model, detector, &outcome, benign_eval, cfg)?;
    let successful = outcome.successful_indices();
    let successful_adv = if successful.is_empty() {
        None
    } else {
        Some(gather(&outcome.x_adv, &successful))
    };
    Ok(AttackEvaluation {
        report,
        successful_adv,
        outcome,
    })
}

/// Metrics for an existing attack outcome (used by the adaptive attacks
/// whose crafting is method-specific).
pub fn evaluate_outcome(
    model: &Model,
    detector: &Detector,
    outcome: &AttackOutcome,
    benign_eval: &Dataset,
    cfg: &AttackConfig,
) -> Result<AttackReport, EvalError> {
    let successful = outcome.successful_indices();
    let n_crafted = outcome.results.len();
    let n_successful = successful.len();
    let (detection, auc, quantiles) = if n_successful == 0 {
        (
            0.0,
            0.5,
            QuantileSummary {
                p5: f32::NAN,
                p25: f32::NAN,
                p50: f32::NAN,
                p75: f32::NAN,
                p95: f32::NAN,
            },
        )
    } else {
        let adv = gather(&outcome.x_adv, &successful);
        let detection =
            detection_rate_at_fpr(detector, model, &adv, &benign_eval.inputs, detector.fpr_target)?;
        // AUC over max-signature similarity pools
        let adv_sims = pooled_similarities(detector, model, &adv)?;
        let benign_sims = pooled_similarities(detector, model, &benign_eval.inputs)?;
        let auc = roc_auc(&benign_sims, &adv_sims)?;
        (detection, auc, quantile_summary(&adv_sims))
    };
    Ok(AttackReport {
        attack: cfg.method.name().to_string(),
        config: *cfg,
        n_crafted,
        n_successful,
        attack_success: outcome.success_rate(),
        detection_rate_at_fpr: detection,
        auc,
        adv_similarity: quantiles,
    })
}

/// Max similarity over every signature the detector holds, per input.
pub fn pooled_similarities(
    detector: &Detector,
    model: &Model,
    inputs: &Tensor,
) -> Result<Vec<f32>, EvalError> {
    let n = inputs.shape()[0];
    let mut best = vec![f32::NEG_INFINITY; n];
    for sigs in detector.signatures.values() {
        let sims = crate::detect::max_similarities(sigs, model, inputs)?;
        for (b, s) in best.iter_mut().zip(sims) {
            *b = b.max(s);
        }
    }
    Ok(best)
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let rowlen: usize = x.shape()[1..].iter().product();
    let src = x.data();
    let mut data = Vec::with_capacity(rows.len() * rowlen);
    for &r in rows {
        data.extend_from_slice(&src[r * rowlen..(r + 1) * rowlen]);
    }
    drop(src);
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(&x.shape()[1..]);
    Tensor::new(&shape, data).unwrap()
}

/// Full pipeline for one configuration: train clean + trapdoored models,
/// calibrate, attack, measure. The task id names the run in reports.
pub fn run_experiment(config: &ExperimentConfig, task_id: &str) -> Result<EvalReport, EvalError> {
    let started = Instant::now();
    let data = load_data(config)?;
    let init_seed = derive_seed(config.master_seed, "model", "init");

    let mut clean_model = build_model_for(config, init_seed)?;
    train(&mut clean_model, &data.train, &clean_train_config(config))?;

    let registry = build_registry(config)?;
    let base = build_model_for(config, init_seed)?;
    let (trap_model, _) = train_trapdoored(base, &data.train, &registry, &training_config(config))?;

    let detector = build_detector(config, &trap_model, &registry, &data.calib)?;
    let empirical_fpr = detector.flag_rate(&trap_model, &data.eval.inputs)?;
    let injection = injection_success_rate(&trap_model, &data.eval, &registry)?;

    let target = config.defended_labels()[0];
    let craft_pool = data.eval.filter_label_ne(target);
    let benign_sims = pooled_similarities(&detector, &trap_model, &data.eval.inputs)?;

    let mut attacks = Vec::new();
    for settings in &config.attacks {
        let cfg = config.attack_config(settings)?;
        let eval = evaluate_attack(&trap_model, &detector, &craft_pool, &data.eval, target, &cfg)?;
        attacks.push(eval.report);
    }

    let report = EvalReport {
        task_id: task_id.to_string(),
        clean_model_hash: clean_model.params_hash(),
        trapdoored_model_hash: trap_model.params_hash(),
        normal_accuracy_clean: clean_model.accuracy(&data.eval)?,
        normal_accuracy_trapdoored: trap_model.accuracy(&data.eval)?,
        injection_success: injection,
        fpr_target: config.detector.fpr,
        empirical_fpr,
        target_label: target,
        attacks,
        benign_similarity: quantile_summary(&benign_sims),
        master_seed: config.master_seed,
        runtime_secs: started.elapsed().as_secs_f64(),
        config_text: config.source_text.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// Fine-tune the trapdoored inputs back to their true labels until
/// injection success drops to `target_rate`, keeping normal accuracy by
/// mixing in clean data.
pub fn unlearn_trapdoor(
    trapdoored: &Model,
    registry: &TrapdoorRegistry,
    clean: &Dataset,
    epochs_budget: usize,
    seed: u64,
) -> Result<Model, EvalError> {
    const TARGET_RATE: f32 = 0.10;
    let mut model = trapdoored.deep_clone();
    // corrected dataset: clean samples plus trapdoored inputs with TRUE labels
    let mut corrected = clean.clone();
    for &label in &registry.defended_labels() {
        let set = registry.get(label).unwrap();
        for trapdoor in &set.trapdoors {
            let eligible = clean.filter_label_ne(label);
            let injected = inject(&eligible.inputs, trapdoor)?;
            let block = Dataset::new(injected, eligible.labels.clone(), clean.num_classes)?;
            corrected = corrected.concat(&block)?;
        }
    }
    let mut reached = 1.0f32;
    for epoch in 0..epochs_budget {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(0.001),
            seed: derive_seed(seed, "unlearn", &format!("epoch:{epoch}")),
        };
        train(&mut model, &corrected, &cfg)?;
        let rates = injection_success_rate(&model, clean, registry)?;
        reached = rates.values().cloned().fold(0.0f32, f32::max);
        if reached <= TARGET_RATE {
            return Ok(model);
        }
    }
    Err(EvalError::UnlearningDidNotConverge {
        target: TARGET_RATE,
        epochs: epochs_budget,
        reached,
    })
}

/// Craft attacks on `source` and measure the targeted success of the same
/// inputs against `target`. Rate is over all crafted examples.
pub struct TransferResult {
    pub attack: String,
    pub transfer_rate: f32,
    pub source_success: f32,
    /// Detection rate of the transferred set on the target's detector, over
    /// examples that succeeded on the target (None when none did).
    pub detection_on_target: Option<f32>,
}

pub fn transfer_experiment(
    source: &Model,
    target: &Model,
    detector: Option<&Detector>,
    attack_configs: &[AttackConfig],
    inputs: &Dataset,
    y_target: usize,
) -> Result<Vec<TransferResult>, EvalError> {
    let mut out = Vec::new();
    for cfg in attack_configs {
        let outcome = run_standard_attack(source, &inputs.inputs, y_target, cfg)?;
        let preds = target.predict(&outcome.x_adv)?;
        let transferred: Vec<usize> = (0..preds.len()).filter(|&i| preds[i] == y_target).collect();
        let transfer_rate = transferred.len() as f32 / preds.len().max(1) as f32;
        let detection_on_target = match (detector, transferred.is_empty()) {
            (Some(det), false) => {
                let adv = gather(&outcome.x_adv, &transferred);
                let flags = det.detect_batch(target, &adv)?;
                Some(flags.iter().filter(|d| d.flag).count() as f32 / flags.len() as f32)
            }
            _ => None,
        };
        out.push(TransferResult {
            attack: cfg.method.name().to_string(),
            transfer_rate,
            source_success: outcome.success_rate(),
            detection_on_target,
        });
    }
    Ok(out)
}

/// Empirical check of the attack-effectiveness bound: mu from injection
/// failure, nu from attack failure, sigma from the mean cosine between
/// adversarial features and trapdoored-input features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub mu_hat: f32,
    pub nu_hat: f32,
    pub sigma_hat: f32,
    /// The distributional distance term is not estimable from samples;
    /// recorded descriptively only.
    pub rho_note: String,
    /// Whether nu <= mu + slack held when sigma was high (vacuously true
    /// when sigma is below the gate).
    pub bound_satisfied: bool,
}

pub const THEOREM_SLACK: f32 = 0.15;
pub const THEOREM_SIGMA_GATE: f32 = 0.8;

/// `sources` are the clean inputs the attacks started from, row-aligned
/// with `outcome`.
pub fn theorem_check(
    model: &Model,
    registry: &TrapdoorRegistry,
    target_label: usize,
    sources: &Dataset,
    outcome: &AttackOutcome,
    rho_note: &str,
) -> Result<TheoremCheckReport, EvalError> {
    let rates = injection_success_rate(model, sources, registry)?;
    let injection = rates
        .get(&target_label)
        .copied()
        .ok_or_else(|| EvalError::Invalid(format!("label {target_label} not defended")))?;
    let mu_hat = 1.0 - injection;
    let nu_hat = 1.0 - outcome.success_rate();

    // mean cosine between g(A(x)) and g(x + Delta) over the attack set
    let layer = LayerKey::Single(model.spec.default_feature_layer());
    let width = layer.width(model).map_err(EvalError::Detect)?;
    let set = registry.get(target_label).unwrap();
    let adv_feats = features_at(model, &outcome.x_adv, &layer)?;
    let mut best_per_trapdoor = vec![f32::NEG_INFINITY; outcome.results.len()];
    for trapdoor in &set.trapdoors {
        let trapped = inject(&sources.inputs, trapdoor)?;
        let trap_feats = features_at(model, &trapped, &layer)?;
        for i in 0..outcome.results.len() {
            let a = &adv_feats[i * width..(i + 1) * width];
            let t = &trap_feats[i * width..(i + 1) * width];
            let denom = crate::tensor::norm(a) * crate::tensor::norm(t);
            if denom > 0.0 {
                let cos = crate::tensor::dot(a, t) / denom;
                best_per_trapdoor[i] = best_per_trapdoor[i].max(cos);
            }
        }
    }
    let sigma_hat =
        best_per_trapdoor.iter().sum::<f32>() / best_per_trapdoor.len().max(1) as f32;
    let bound_satisfied = if sigma_hat >= THEOREM_SIGMA_GATE {
        nu_hat <= mu_hat + THEOREM_SLACK
    } else {
        true
    };
    Ok(TheoremCheckReport {
        mu_hat,
        nu_hat,
        sigma_hat: sigma_hat.clamp(0.0, 1.0),
        rho_note: rho_note.to_string(),
        bound_satisfied,
    })
}

/// What a sweep varies, one full train+attack+detect cycle per grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    InjectionRatio,
    TrapdoorCountLocations,
    TrapdoorCountIntensities,
    SignatureLayer,
    NeuronFraction,
}

impl SweepKind {
    pub fn parse(s: &str) -> Option<SweepKind> {
        match s {
            "injection_ratio" => Some(SweepKind::InjectionRatio),
            "trapdoor_count_locations" => Some(SweepKind::TrapdoorCountLocations),
            "trapdoor_count_intensities" => Some(SweepKind::TrapdoorCountIntensities),
            "signature_layer" => Some(SweepKind::SignatureLayer),
            "neuron_fraction" => Some(SweepKind::NeuronFraction),
        _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::InjectionRatio => "injection_ratio",
            SweepKind::TrapdoorCountLocations => "trapdoor_count_locations",
            SweepKind::TrapdoorCountIntensities => "trapdoor_count_intensities",
            SweepKind::SignatureLayer => "signature_layer",
            SweepKind::NeuronFraction => "neuron_fraction",
        }
    }
}

/// Run the full pipeline per grid point, everything else (including the
/// master seed) held fixed.
pub fn sweep(
    kind: SweepKind,
    grid: &[f64],
    base: &ExperimentConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Invalid("empty sweep grid".into()));
    }
    let mut reports = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut config = base.clone();
        match kind {
            SweepKind::InjectionRatio => config.defense.injection_ratio = value as f32,
            SweepKind::TrapdoorCountLocations => {
                config.defense.count = value as usize;
                config.defense.set_variant = "locations".into();
            }
            SweepKind::TrapdoorCountIntensities => {
                config.defense.count = value as usize;
                config.defense.set_variant = "intensities".into();
            }
            SweepKind::SignatureLayer => config.detector.layer = format!("{}", value as usize),
            SweepKind::NeuronFraction => config.detector.neuron_fraction = value as f32,
        }
        let task_id = format!("{}={}", kind.name(), value);
        reports.push(run_experiment(&config, &task_id)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fast full-pipeline config: separable blobs shaped as 1x16 images, a
    /// small MLP, and a single-pixel trapdoor with a strong blend.
    fn blob_config() -> ExperimentConfig {
        ExperimentConfig::parse(
            "
[experiment]
master_seed = 77
model = mlp:24

[data]
source = blobs
classes = 4
dim = 16
per_class = 150
test_per_class = 100

[defense]
labels = 1
variant = single_square
kappa = 0.6
injection_ratio = 0.5
side = 1

[training]
epochs = 12
batch = 16
lr = 0.005

[detector]
fpr = 0.05

[attack.fgsm]
eps = 40

[attack.pgd]
eps = 40
iterations = 30
",
        )
        .unwrap()
    }

    #[test]
    fn full_blob_experiment_produces_sane_report() {
        let config = blob_config();
        let report = run_experiment(&config, "blob-test").unwrap();
        report.validate().unwrap();
        assert!(report.normal_accuracy_clean >= 0.9, "clean acc {}", report.normal_accuracy_clean);
        assert!(
            report.injection_success[&1] >= 0.8,
            "injection {:?}",
            report.injection_success
        );
        assert!(report.empirical_fpr <= 0.12, "fpr {}", report.empirical_fpr);
        assert_eq!(report.attacks.len(), 2);
        // reports embed their provenance
        assert!(report.config_text.contains("master_seed = 77"));
        let csv = report.to_csv_rows();
        assert_eq!(csv.len(), 2);
        assert!(csv[0].starts_with("blob-test,fgsm,"));
    }

    #[test]
    fn reports_are_reproducible_from_config() {
        let config = blob_config();
        let a = run_experiment(&config, "rep").unwrap();
        let b = run_experiment(&config, "rep").unwrap();
        assert_eq!(a.trapdoored_model_hash, b.trapdoored_model_hash);
        assert_eq!(a.clean_model_hash, b.clean_model_hash);
        assert_eq!(a.to_csv_rows(), b.to_csv_rows());
    }

    #[test]
    fn transfer_to_self_equals_attack_success() {
        let config = blob_config();
        let data = load_data(&config).unwrap();
        let seed = derive_seed(config.master_seed, "model", "init");
        let mut model = build_model_for(&config, seed).unwrap();
        train(&mut model, &data.train, &clean_train_config(&config)).unwrap();
        let craft = data.eval.filter_label_ne(1);
        let mut cfg = AttackConfig::preset(crate::attack::AttackMethod::Pgd, 5);
        cfg.eps = 40.0 / 255.0;
        cfg.step_size = 0.1 * cfg.eps;
        cfg.iterations = 30;
        let results =
            transfer_experiment(&model, &model, None, &[cfg], &craft, 1).unwrap();
        assert_eq!(results[0].transfer_rate, results[0].source_success);
    }

    #[test]
    fn unlearning_restores_low_injection_success() {
        let config = blob_config();
        let data = load_data(&config).unwrap();
        let registry = build_registry(&config).unwrap();
        let seed = derive_seed(config.master_seed, "model", "init");
        let base = build_model_for(&config, seed).unwrap();
        let (trapdoored, _) =
            train_trapdoored(base, &data.train, &registry, &training_config(&config)).unwrap();
        let before = injection_success_rate(&trapdoored, &data.eval, &registry).unwrap()[&1];
        assert!(before >= 0.8, "trapdoor must be embedded first, got {before}");
        let unlearned =
            unlearn_trapdoor(&trapdoored, &registry, &data.calib, 10, 99).unwrap();
        let after = injection_success_rate(&unlearned, &data.eval, &registry).unwrap()[&1];
        assert!(after <= 0.10, "unlearning target missed: {after}");
        let acc_drop = trapdoored.accuracy(&data.eval).unwrap()
            - unlearned.accuracy(&data.eval).unwrap();
        assert!(acc_drop <= 0.03, "unlearning cost too much accuracy: {acc_drop}");
    }

    #[test]
    fn unlearning_a_clean_model_changes_little() {
        let config = blob_config();
        let data = load_data(&config).unwrap();
        let registry = build_registry(&config).unwrap();
        let seed = derive_seed(config.master_seed, "model", "init");
        let mut clean = build_model_for(&config, seed).unwrap();
        train(&mut clean, &data.train, &clean_train_config(&config)).unwrap();
        let acc_before = clean.accuracy(&data.eval).unwrap();
        // a clean model may already be below the injection threshold; use
        // the budgeted path and accept early convergence
        let unlearned = match unlearn_trapdoor(&clean, &registry, &data.calib, 3, 5) {
            Ok(m) => m,
            Err(EvalError::UnlearningDidNotConverge { .. }) => return,
            Err(e) => panic!("{e}"),
        };
        let acc_after = unlearned.accuracy(&data.eval).unwrap();
        assert!(
            (acc_before - acc_after).abs() <= 0.01 + 1e-6,
            "vacuous unlearning moved accuracy {acc_before} -> {acc_after}"
        );
    }

    #[test]
    fn theorem_check_on_trapdoored_images() {
        // the trapdoor itself is its own best attack: sigma ~ 1 and
        // nu ~ mu by construction
        let config = blob_config();
        let data = load_data(&config).unwrap();
        let registry = build_registry(&config).unwrap();
        let seed = derive_seed(config.master_seed, "model", "init");
        let base = build_model_for(&config, seed).unwrap();
        let (model, _) =
            train_trapdoored(base, &data.train, &registry, &training_config(&config)).unwrap();
        let sources = data.eval.filter_label_ne(1);
        let trapdoor = &registry.get(1).unwrap().trapdoors[0];
        let injected = inject(&sources.inputs, trapdoor).unwrap();
        let preds = model.predict(&injected).unwrap();
        let results: Vec<crate::attack::AdversarialResult> = (0..sources.len())
            .map(|i| crate::attack::AdversarialResult {
                x_adv: injected.row(i),
                success: preds[i] == 1,
                query_count: 1,
                final_loss: 0.0,
                perturbation_norms: Default::default(),
            })
            .collect();
        let outcome = AttackOutcome {
            x_adv: injected,
            results,
        };
        let report = theorem_check(&model, &registry, 1, &sources, &outcome, "trapdoored images as attacks").unwrap();
        assert!(report.sigma_hat >= 0.99, "sigma {}", report.sigma_hat);
        assert!(
            (report.nu_hat - report.mu_hat).abs() <= 0.02,
            "nu {} vs mu {}",
            report.nu_hat,
            report.mu_hat
        );
        assert!(report.bound_satisfied);
    }

    #[test]
    fn sweep_neuron_fraction_runs_each_point() {
        let mut config = blob_config();
        // lighten: one attack only
        config.attacks.truncate(1);
        let reports = sweep(SweepKind::NeuronFraction, &[0.25, 1.0], &config).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].task_id, "neuron_fraction=0.25");
        for r in &reports {
            r.validate().unwrap();
        }
    }

    #[test]
    fn sweep_rejects_empty_grid() {
        let config = blob_config();
        assert!(matches!(
            sweep(SweepKind::InjectionRatio, &[], &config),
            Err(EvalError::Invalid(_))
        ));
    }

    #[test]
    fn distribution_csv_long_format() {
        let rows = vec![SimilarityDistribution {
            tag: "benign".into(),
            n: 100,
            quantiles: QuantileSummary {
                p5: 0.1,
                p25: 0.2,
                p50: 0.3,
                p75: 0.4,
                p95: 0.5,
            },
        }];
        let csv = distribution_csv(&rows);
        assert!(csv.starts_with("tag,percentile,value\n"));
        assert!(csv.contains("benign,5,0.1"));
        assert!(csv.contains("benign,95,0.5"));
    }
}
