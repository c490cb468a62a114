//! Targeted adversarial attacks: gradient-based (FGSM, PGD, BPDA),
//! optimization-based (CW-L2, Elastic Net), gradient-free (SPSA), and two
//! signature-aware adaptive attacks (oracle signature, trapdoor vault).
//!
//! All attacks operate on batches, are deterministic given the config seed,
//! and always return inputs inside [0,1]. The L-inf family additionally
//! stays inside the eps box around the original input.

mod adaptive;
mod gradient;
mod optimization;
mod spsa;

pub use adaptive::{kmeans, oracle_signature_attack, vault_attack, VaultOutcome};
pub use gradient::{bpda, fgsm, pgd, Preproc, PreprocModel};
pub use optimization::{cw_l2, elastic_net};
pub use spsa::spsa;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::DetectError;
use crate::model::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("degenerate clustering: {vectors} distinct vectors for {clusters} clusters")]
    DegenerateClustering { vectors: usize, clusters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Cw,
    ElasticNet,
    Spsa,
    Bpda,
    OracleSig,
    Vault,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Cw => "cw",
            AttackMethod::ElasticNet => "elastic_net",
            AttackMethod::Spsa => "spsa",
            AttackMethod::Bpda => "bpda",
            AttackMethod::OracleSig => "oracle_sig",
            AttackMethod::Vault => "vault",
        }
    }

    pub fn parse(s: &str) -> Option<AttackMethod> {
        match s {
            "fgsm" => Some(AttackMethod::Fgsm),
            "pgd" => Some(AttackMethod::Pgd),
            "cw" => Some(AttackMethod::Cw),
            "elastic_net" | "en" => Some(AttackMethod::ElasticNet),
            "spsa" => Some(AttackMethod::Spsa),
            "bpda" => Some(AttackMethod::Bpda),
            "oracle_sig" | "oracle" => Some(AttackMethod::OracleSig),
            "vault" => Some(AttackMethod::Vault),
            _ => None,
        }
    }

    /// The six standard static attacks.
    pub fn standard_suite() -> [AttackMethod; 6] {
        [
            AttackMethod::Fgsm,
            AttackMethod::Pgd,
            AttackMethod::Cw,
            AttackMethod::ElasticNet,
            AttackMethod::Spsa,
            AttackMethod::Bpda,
        ]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CwParams {
    pub binary_steps: usize,
    pub lr: f32,
    pub confidence: f32,
    pub abort_early: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnParams {
    pub beta: f32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpsaParams {
    pub lr: f32,
    pub perturbation_size: f32,
    /// Probe pairs averaged per gradient estimate.
    pub probes: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdaptiveParams {
    /// Weight on the signature-distance term of the joint objective.
    pub distance_weight: f32,
    /// Probe inputs used by the vault attack to estimate signatures.
    pub probe_count: usize,
}

/// Full attack configuration. `eps` and `step_size` are in normalized pixel
/// units ([0,1] scale); presets follow the 0-255 conventions divided by 255.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub eps: f32,
    pub iterations: usize,
    pub step_size: f32,
    pub cw: CwParams,
    pub en: EnParams,
    pub spsa: SpsaParams,
    pub adaptive: AdaptiveParams,
    pub seed: u64,
}

pub const DEFAULT_EPS: f32 = 8.0 / 255.0;

impl AttackConfig {
    /// Reference defaults per method (eps 8/255; PGD/BPDA 100 iterations
    /// with step 0.1*eps; CW 9x1000 at lr 0.05; EN 20x1000 at lr 0.5 with
    /// beta 1e-2; SPSA 500 iterations at lr 0.1).
    pub fn preset(method: AttackMethod, seed: u64) -> AttackConfig {
        let eps = DEFAULT_EPS;
        let mut cfg = AttackConfig {
            method,
            eps,
            iterations: 100,
            step_size: 0.1 * eps,
            cw: CwParams {
                binary_steps: 9,
                lr: 0.05,
                confidence: 0.0,
                abort_early: true,
            },
            en: EnParams { beta: 1e-2 },
            spsa: SpsaParams {
                lr: 0.1,
                perturbation_size: 0.01,
                probes: 8,
            },
            adaptive: AdaptiveParams {
                distance_weight: 1.0,
                probe_count: 20,
            },
            seed,
        };
        match method {
            AttackMethod::Fgsm => cfg.iterations = 1,
            AttackMethod::Pgd | AttackMethod::Bpda => {}
            AttackMethod::Cw => cfg.iterations = 1000,
            AttackMethod::ElasticNet => {
                cfg.iterations = 1000;
                cfg.cw.binary_steps = 20;
                cfg.cw.lr = 0.5;
            }
            AttackMethod::Spsa => cfg.iterations = 500,
            AttackMethod::OracleSig | AttackMethod::Vault => cfg.iterations = 400,
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.eps <= 0.0 {
            return Err(AttackError::InvalidConfig("eps must be > 0".into()));
        }
        if self.iterations < 1 {
            return Err(AttackError::InvalidConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PerturbationNorms {
    pub l1: f32,
    pub l2: f32,
    pub linf: f32,
}

/// Per-input attack outcome.
#[derive(Debug, Clone)]
pub struct AdversarialResult {
    /// The adversarial image, [C,H,W], values in [0,1].
    pub x_adv: Tensor,
    /// Whether the target model classifies x_adv as the target label.
    pub success: bool,
    /// Forward passes spent on this input (shared passes are attributed to
    /// every input of the batch).
    pub query_count: usize,
    pub final_loss: f32,
    pub perturbation_norms: PerturbationNorms,
}

/// Batch attack outcome: stacked adversarial inputs plus per-input records.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub results: Vec<AdversarialResult>,
}

impl AttackOutcome {
    pub fn success_rate(&self) -> f32 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().filter(|r| r.success).count() as f32 / self.results.len() as f32
    }

    /// Row indices of the successful attacks.
    pub fn successful_indices(&self) -> Vec<usize> {
        self.results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.success)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Models an attack can query: anything that maps a batch to logits while
/// recording gradients. The preprocessing wrapper used for BPDA also
/// implements this.
pub trait TargetModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError>;

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(self.logits(&x.detach(false))?.argmax_rows())
    }
}

impl TargetModel for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.forward(x)
    }
}

// ── shared attack plumbing ──────────────────────────────────────────

/// Clamp `data` into the eps box around `origin` intersected with [0,1].
pub(crate) fn project_box(data: &mut [f32], origin: &[f32], eps: f32) {
    for (v, &o) in data.iter_mut().zip(origin) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

pub(crate) fn norms_of(delta: impl Iterator<Item = f32>) -> PerturbationNorms {
    let mut n = PerturbationNorms::default();
    for d in delta {
        n.l1 += d.abs();
        n.l2 += d * d;
        n.linf = n.linf.max(d.abs());
    }
    n.l2 = n.l2.sqrt();
    n
}

/// Assemble an [`AttackOutcome`] from final adversarial data, evaluating
/// success on the target model.
pub(crate) fn finish_outcome<M: TargetModel>(
    model: &M,
    x_orig: &Tensor,
    x_adv_data: Vec<f32>,
    y_target: usize,
    query_count: usize,
    final_losses: &[f32],
) -> Result<AttackOutcome, AttackError> {
    let x_adv = Tensor::new(x_orig.shape(), x_adv_data).unwrap();
    let preds = model.predict(&x_adv)?;
    let n = x_orig.shape()[0];
    let row: usize = x_orig.shape()[1..].iter().product();
    let orig = x_orig.data();
    let advd = x_adv.data();
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let delta = orig[i * row..(i + 1) * row]
            .iter()
            .zip(&advd[i * row..(i + 1) * row])
            .map(|(&a, &b)| b - a);
        results.push(AdversarialResult {
            x_adv: Tensor::new(
                &x_orig.shape()[1..],
                advd[i * row..(i + 1) * row].to_vec(),
            )
            .unwrap(),
            success: preds[i] == y_target,
            query_count,
            final_loss: final_losses.get(i).copied().unwrap_or(f32::NAN),
            perturbation_norms: norms_of(delta),
        });
    }
    drop(orig);
    drop(advd);
    Ok(AttackOutcome { x_adv, results })
}

/// Quantization levels of the preprocessing stage BPDA is evaluated
/// against. Any uniform quantizer zeroes the true gradient almost
/// everywhere (which is what defeats plain PGD); the level count is chosen
/// so one quantization step is reachable within the default eps budget and
/// model accuracy stays intact.
pub const BPDA_QUANT_LEVELS: u32 = 32;

/// Dispatch one of the six standard attacks by config. BPDA runs against
/// the model wrapped with the standard quantization stage.
pub fn run_standard_attack(
    model: &Model,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    match config.method {
        AttackMethod::Fgsm => fgsm(model, x, y_target, config.eps),
        AttackMethod::Pgd => pgd(model, x, y_target, config),
        AttackMethod::Cw => cw_l2(model, x, y_target, config),
        AttackMethod::ElasticNet => elastic_net(model, x, y_target, config),
        AttackMethod::Spsa => spsa(model, x, y_target, config),
        AttackMethod::Bpda => {
            let wrapped = PreprocModel {
                model,
                preproc: Preproc::Quantize(BPDA_QUANT_LEVELS),
            };
            bpda(&wrapped, x, y_target, config)
        }
        other => Err(AttackError::InvalidConfig(format!(
            "{} is not a standard attack; call its dedicated entry point",
            other.name()
        ))),
    }
}
