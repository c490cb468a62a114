//! Signed-gradient attacks: FGSM, PGD, and BPDA through a
//! non-differentiable preprocessing stage.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

use super::{finish_outcome, project_box, AttackConfig, AttackError, AttackOutcome, TargetModel};

/// Single signed-gradient step of magnitude eps, descending the
/// target-label loss, clipped to [0,1].
pub fn fgsm<M: TargetModel>(
    model: &M,
    x: &Tensor,
    y_target: usize,
    eps: f32,
) -> Result<AttackOutcome, AttackError> {
    if eps < 0.0 {
        return Err(AttackError::InvalidConfig("eps must be >= 0".into()));
    }
    let n = x.shape()[0];
    let orig = x.to_vec();
    let (step, losses) = target_loss_grad(model, x, &orig, y_target)?;
    let mut data = orig.clone();
    for (v, g) in data.iter_mut().zip(&step) {
        *v -= eps * g.signum_or_zero();
    }
    project_box(&mut data, &orig, eps);
    let _ = n;
    finish_outcome(model, x, data, y_target, 2, &losses)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f32;
}

impl SignumOrZero for &f32 {
    fn signum_or_zero(self) -> f32 {
        if *self > 0.0 {
            1.0
        } else if *self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Iterated signed steps with per-pixel projection onto the eps box around
/// x (intersected with [0,1]) after every step, starting from a random
/// point inside the box.
pub fn pgd<M: TargetModel>(
    model: &M,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    if config.step_size > config.eps {
        return Err(AttackError::InvalidConfig(format!(
            "step_size {} exceeds eps {}",
            config.step_size, config.eps
        )));
    }
    pgd_loop(model, x, y_target, config, true)
}

pub(crate) fn pgd_loop<M: TargetModel>(
    model: &M,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
    random_start: bool,
) -> Result<AttackOutcome, AttackError> {
    let orig = x.to_vec();
    let mut data = orig.clone();
    if random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for v in &mut data {
            *v += rng.random_range(-config.eps..config.eps);
        }
        project_box(&mut data, &orig, config.eps);
    }
    let mut losses = vec![f32::NAN; x.shape()[0]];
    let mut queries = 0usize;
    for _ in 0..config.iterations {
        let cur = Tensor::new(x.shape(), data.clone()).unwrap();
        let (grad, step_losses) = target_loss_grad(model, &cur, &data, y_target)?;
        losses = step_losses;
        queries += 2;
        for (v, g) in data.iter_mut().zip(&grad) {
            *v -= config.step_size * g.signum_or_zero();
        }
        project_box(&mut data, &orig, config.eps);
    }
    finish_outcome(model, x, data, y_target, queries, &losses)
}

/// Gradient of the summed target cross entropy with respect to the input,
/// plus the per-sample losses.
fn target_loss_grad<M: TargetModel>(
    model: &M,
    x: &Tensor,
    data: &[f32],
    y_target: usize,
) -> Result<(Vec<f32>, Vec<f32>), AttackError> {
    let leaf = Tensor::leaf(x.shape(), data.to_vec(), true).unwrap();
    let logits = model.logits(&leaf)?;
    let n = x.shape()[0];
    let per_sample = logits.cross_entropy_with_logits(&vec![y_target; n])?;
    let losses = per_sample.to_vec();
    let loss = per_sample.sum_all();
    loss.backward()?;
    Ok((leaf.grad().expect("input gradient"), losses))
}

/// Input preprocessing stage in front of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preproc {
    Identity,
    /// Uniform pixel quantization to this many levels; the true gradient is
    /// zero almost everywhere.
    Quantize(u32),
}

impl Preproc {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Preproc::Identity => x.clone(),
            Preproc::Quantize(levels) => x.quantize(*levels),
        }
    }
}

/// A model behind a (possibly non-differentiable) preprocessing stage.
/// Forward applies the true preprocessing, so plain gradient attacks see
/// the stage's almost-everywhere-zero Jacobian.
pub struct PreprocModel<'a> {
    pub model: &'a Model,
    pub preproc: Preproc,
}

impl TargetModel for PreprocModel<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.model.forward(&self.preproc.apply(x))
    }
}

/// PGD where the backward pass approximates the preprocessing Jacobian as
/// identity: each step evaluates the true preprocessed forward, but the
/// gradient at the preprocessed point is applied to the raw input.
pub fn bpda(
    preproc: &PreprocModel<'_>,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    let orig = x.to_vec();
    let mut data = orig.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for v in &mut data {
        *v += rng.random_range(-config.eps..config.eps);
    }
    project_box(&mut data, &orig, config.eps);
    let n = x.shape()[0];
    let mut losses = vec![f32::NAN; n];
    let mut queries = 0usize;
    for _ in 0..config.iterations {
        // true forward through the preprocessing, gradient taken at the
        // preprocessed point as if the stage were identity
        let processed = preproc
            .preproc
            .apply(&Tensor::new(x.shape(), data.clone()).unwrap());
        let leaf = Tensor::leaf(x.shape(), processed.to_vec(), true).unwrap();
        let logits = preproc.model.forward(&leaf)?;
        let per_sample = logits.cross_entropy_with_logits(&vec![y_target; n])?;
        losses = per_sample.to_vec();
        per_sample.sum_all().backward()?;
        let grad = leaf.grad().expect("input gradient");
        queries += 2;
        for (v, g) in data.iter_mut().zip(&grad) {
            *v -= config.step_size * g.signum_or_zero();
        }
        project_box(&mut data, &orig, config.eps);
    }
    finish_outcome(preproc, x, data, y_target, queries, &losses)
}
