//! Gradient-free attack by simultaneous perturbation stochastic
//! approximation: paired Rademacher probes estimate the loss gradient from
//! forward passes only.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

use super::{finish_outcome, project_box, AttackConfig, AttackError, AttackOutcome, TargetModel};

/// Estimate the gradient of the per-sample (unclamped) target margin loss
/// at `data` from `probes` antithetic probe pairs: for Rademacher v,
/// g ~= (l(x + c v) - l(x - c v)) / (2c) * v  (1/v_i = v_i for +-1 entries).
pub(crate) fn spsa_gradient<M: TargetModel>(
    model: &M,
    shape: &[usize],
    data: &[f32],
    y_target: usize,
    c: f32,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<f32>, usize), AttackError> {
    let n = shape[0];
    let row: usize = shape[1..].iter().product();
    let targets = vec![y_target; n];
    let mut grad = vec![0.0f32; data.len()];
    let mut losses = vec![0.0f32; n];
    let mut queries = 0usize;
    for _ in 0..probes {
        let v: Vec<f32> = (0..data.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let plus: Vec<f32> = data.iter().zip(&v).map(|(&x, &vi)| x + c * vi).collect();
        let minus: Vec<f32> = data.iter().zip(&v).map(|(&x, &vi)| x - c * vi).collect();
        let lp = model
            .logits(&Tensor::new(shape, plus).unwrap())?
            .margin_loss(&targets, f32::INFINITY)?
            .to_vec();
        let lm = model
            .logits(&Tensor::new(shape, minus).unwrap())?
            .margin_loss(&targets, f32::INFINITY)?
            .to_vec();
        queries += 2;
        for i in 0..n {
            let scale = (lp[i] - lm[i]) / (2.0 * c);
            for j in 0..row {
                grad[i * row + j] += scale * v[i * row + j];
            }
            losses[i] += 0.5 * (lp[i] + lm[i]);
        }
    }
    let inv = 1.0 / probes as f32;
    for g in &mut grad {
        *g *= inv;
    }
    for l in &mut losses {
        *l *= inv;
    }
    Ok((grad, losses, queries))
}

/// SPSA descent with Adam updates and L-inf projection. Uses only forward
/// passes; `query_count` reports them per input.
pub fn spsa<M: TargetModel>(
    model: &M,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    if config.spsa.perturbation_size <= 0.0 {
        return Err(AttackError::InvalidConfig(
            "spsa.perturbation_size must be > 0".into(),
        ));
    }
    if config.spsa.probes == 0 {
        return Err(AttackError::InvalidConfig("spsa.probes must be >= 1".into()));
    }
    let orig = x.to_vec();
    let adv = Tensor::leaf(x.shape(), orig.clone(), true).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.spsa.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = vec![f32::NAN; x.shape()[0]];
    let mut queries = 0usize;
    for _ in 0..config.iterations {
        let data = adv.to_vec();
        let (grad, step_losses, q) = spsa_gradient(
            model,
            x.shape(),
            &data,
            y_target,
            config.spsa.perturbation_size,
            config.spsa.probes,
            &mut rng,
        )?;
        losses = step_losses;
        queries += q;
        adv.accumulate_grad(&grad);
        opt.step([("x", &adv)])?;
        let mut data = adv.to_vec();
        project_box(&mut data, &orig, config.eps);
        adv.set_data(data);
    }
    finish_outcome(model, x, adv.to_vec(), y_target, queries, &losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackMethod;
    use crate::model::{mlp_spec, Model};
    use crate::tensor::dot;

    fn linear_model(w: [f32; 4]) -> Model {
        let model = Model::build(mlp_spec(4, &[4], 2), 1).unwrap();
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        model.params.get("layer1.weight").unwrap().set_data(eye);
        let mut w2 = vec![0.0f32; 8];
        for (i, &wi) in w.iter().enumerate() {
            w2[i * 2 + 1] = wi;
        }
        model.params.get("layer2.weight").unwrap().set_data(w2);
        model
    }

    #[test]
    fn estimate_correlates_with_true_gradient() {
        // Margin loss for the linear toy is z_0 - z_1 = -w.x, so the true
        // input gradient is -w. Averaging 100 probe pairs should align the
        // estimate with it.
        let w = [1.0f32, -0.6, 0.3, 0.8];
        let model = linear_model(w);
        let x = vec![0.4f32, 0.5, 0.6, 0.5];
        let truth: Vec<f32> = w.iter().map(|&wi| -wi).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (g, _, _) =
            spsa_gradient(&model, &[1, 1, 1, 4], &x, 1, 0.01, 100, &mut rng).unwrap();
        let cos =
            dot(&g, &truth) / (dot(&g, &g).sqrt() * dot(&truth, &truth).sqrt()).max(1e-12);
        assert!(
            cos > 0.5,
            "100-probe SPSA estimate should correlate with the true gradient, got {cos}"
        );
    }

    #[test]
    fn zero_iterations_rejected_but_identity_preserved_via_budget() {
        let model = linear_model([1.0, 1.0, 1.0, 1.0]);
        let x = Tensor::new(&[1, 1, 1, 4], vec![0.5; 4]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::Spsa, 1);
        cfg.iterations = 0;
        // iterations = 0 violates the config contract
        assert!(spsa(&model, &x, 1, &cfg).is_err());
    }

    #[test]
    fn spsa_respects_eps_box_and_counts_queries() {
        let model = linear_model([2.0, -1.0, 0.5, 1.5]);
        let x = Tensor::new(&[2, 1, 1, 4], vec![0.5; 8]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::Spsa, 21);
        cfg.iterations = 10;
        cfg.spsa.probes = 2;
        let out = spsa(&model, &x, 1, &cfg).unwrap();
        for (a, o) in out.x_adv.to_vec().iter().zip(&x.to_vec()[..]) {
            assert!((a - o).abs() <= cfg.eps + 1e-6);
        }
        // 10 iterations x 2 probes x 2 sides, plus the final success check
        assert_eq!(out.results[0].query_count, 40);
    }

    #[test]
    fn spsa_is_seed_deterministic() {
        let model = linear_model([1.0, -1.0, 2.0, 0.1]);
        let x = Tensor::new(&[1, 1, 1, 4], vec![0.4, 0.6, 0.5, 0.5]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::Spsa, 77);
        cfg.iterations = 5;
        let a = spsa(&model, &x, 1, &cfg).unwrap();
        let b = spsa(&model, &x, 1, &cfg).unwrap();
        assert_eq!(a.x_adv.to_vec(), b.x_adv.to_vec());
    }
}
