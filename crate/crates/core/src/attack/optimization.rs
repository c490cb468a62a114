//! Optimization-based attacks: CW-L2 with tanh change-of-variable and
//! binary search over the loss trade-off constant, and the L1+L2 Elastic
//! Net variant solved by iterative shrinkage-thresholding.

use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

use super::{finish_outcome, AttackConfig, AttackError, AttackOutcome, TargetModel};

const ABORT_CHECK_EVERY: usize = 10;
const ABORT_WINDOW: usize = 50;
const ABORT_MIN_IMPROVEMENT: f32 = 1e-4;
const C_INIT: f32 = 1.0;
const C_MAX: f32 = 1e6;

/// Minimize ||x'-x||_2^2 + c * margin(x') per sample, with x' kept in box
/// by x' = (tanh(w)+1)/2 and c found by per-sample binary search. Returns
/// the lowest-distortion successful example seen; failures report the last
/// iterate with success=false.
pub fn cw_l2<M: TargetModel>(
    model: &M,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    if config.cw.binary_steps < 1 {
        return Err(AttackError::InvalidConfig(
            "cw.binary_steps must be >= 1".into(),
        ));
    }
    let objective = DistanceObjective::L2;
    binary_search_attack(model, x, y_target, config, objective)
}

/// Elastic Net attack: c * margin + beta ||eps||_1 + ||eps||_2^2, the L1
/// term handled by an ISTA shrinkage step each iteration. With beta = 0 the
/// objective collapses to the CW-L2 form.
pub fn elastic_net<M: TargetModel>(
    model: &M,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    if config.en.beta < 0.0 {
        return Err(AttackError::InvalidConfig("en.beta must be >= 0".into()));
    }
    if config.cw.binary_steps < 1 {
        return Err(AttackError::InvalidConfig(
            "cw.binary_steps must be >= 1".into(),
        ));
    }
    let objective = DistanceObjective::ElasticNet {
        beta: config.en.beta,
    };
    binary_search_attack(model, x, y_target, config, objective)
}

enum DistanceObjective {
    L2,
    ElasticNet { beta: f32 },
}

struct PerSample {
    c: f32,
    c_low: f32,
    c_high: f32,
    ever_succeeded: bool,
    best_dist: f32,
    best_x: Option<Vec<f32>>,
    last_loss: f32,
}

fn binary_search_attack<M: TargetModel>(
    model: &M,
    x: &Tensor,
    y_target: usize,
    config: &AttackConfig,
    objective: DistanceObjective,
) -> Result<AttackOutcome, AttackError> {
    let n = x.shape()[0];
    let row: usize = x.shape()[1..].iter().product();
    let orig = x.to_vec();
    let confidence = config.cw.confidence;

    let mut state: Vec<PerSample> = (0..n)
        .map(|_| PerSample {
            c: C_INIT,
            c_low: 0.0,
            c_high: C_MAX,
            ever_succeeded: false,
            best_dist: f32::INFINITY,
            best_x: None,
            last_loss: f32::NAN,
        })
        .collect();
    let mut last_iterate = orig.clone();
    let mut queries = 0usize;

    for _outer in 0..config.cw.binary_steps {
        let mut success_this_round = vec![false; n];
        match objective {
            DistanceObjective::L2 => {
                // tanh-space Adam descent
                let w0: Vec<f32> = orig.iter().map(|&v| atanh(v * 2.0 - 1.0)).collect();
                let w = Tensor::leaf(x.shape(), w0, true).unwrap();
                let mut opt = Optimizer::new(OptimizerConfig::adam(config.cw.lr));
                let mut best_obj = f32::INFINITY;
                let mut stall = 0usize;
                for iter in 0..config.iterations {
                    let x_adv = w.tanh().add_scalar(1.0).scale(0.5);
                    let delta = x_adv.sub(&x.detach(false))?;
                    let dist = delta.mul(&delta)?.sum_rows()?;
                    let logits = model.logits(&x_adv)?;
                    let margins = logits.margin_loss(&vec![y_target; n], confidence)?;
                    let raw = raw_margins(&logits.to_vec(), n, y_target);
                    let c_vec = Tensor::new(&[n], state.iter().map(|s| s.c).collect()).unwrap();
                    let weighted = margins.mul(&c_vec)?;
                    let total = dist.add(&weighted)?.sum_all();
                    total.backward()?;
                    opt.step([("w", &w)])?;
                    queries += 2;

                    record_progress(
                        &mut state,
                        &mut success_this_round,
                        &mut last_iterate,
                        &x_adv.to_vec(),
                        &dist.to_vec(),
                        &raw,
                        confidence,
                        row,
                    );
                    if config.cw.abort_early && iter % ABORT_CHECK_EVERY == 0 {
                        let obj = total.item();
                        if obj + ABORT_MIN_IMPROVEMENT < best_obj {
                            best_obj = obj;
                            stall = 0;
                        } else {
                            stall += ABORT_CHECK_EVERY;
                            if stall >= ABORT_WINDOW {
                                break;
                            }
                        }
                    }
                }
            }
            DistanceObjective::ElasticNet { beta } => {
                // ISTA: gradient step on c*margin + ||eps||_2^2, then
                // soft-threshold the perturbation by lr*beta, then box clip.
                let mut cur = orig.clone();
                let lr = config.cw.lr;
                let mut best_obj = f32::INFINITY;
                let mut stall = 0usize;
                for iter in 0..config.iterations {
                    let leaf = Tensor::leaf(x.shape(), cur.clone(), true).unwrap();
                    let delta = leaf.sub(&x.detach(false))?;
                    let dist2 = delta.mul(&delta)?.sum_rows()?;
                    let logits = model.logits(&leaf)?;
                    let margins = logits.margin_loss(&vec![y_target; n], confidence)?;
                    let raw = raw_margins(&logits.to_vec(), n, y_target);
                    let c_vec = Tensor::new(&[n], state.iter().map(|s| s.c).collect()).unwrap();
                    let weighted = margins.mul(&c_vec)?;
                    let total = dist2.add(&weighted)?.sum_all();
                    total.backward()?;
                    let grad = leaf.grad().expect("input gradient");
                    queries += 2;

                    // book-keep the evaluated point before stepping away
                    let mut dist = vec![0.0f32; n];
                    for i in 0..n {
                        let (mut l1, mut l2) = (0.0f32, 0.0f32);
                        for j in 0..row {
                            let d = cur[i * row + j] - orig[i * row + j];
                            l1 += d.abs();
                            l2 += d * d;
                        }
                        dist[i] = beta * l1 + l2;
                    }
                    record_progress(
                        &mut state,
                        &mut success_this_round,
                        &mut last_iterate,
                        &cur,
                        &dist,
                        &raw,
                        confidence,
                        row,
                    );

                    for i in 0..cur.len() {
                        let z = cur[i] - lr * grad[i];
                        // shrink toward the original pixel
                        let d = z - orig[i];
                        let shrunk = d.signum() * (d.abs() - lr * beta).max(0.0);
                        cur[i] = (orig[i] + shrunk).clamp(0.0, 1.0);
                    }
                    if config.cw.abort_early && iter % ABORT_CHECK_EVERY == 0 {
                        let obj = total.item();
                        if obj + ABORT_MIN_IMPROVEMENT < best_obj {
                            best_obj = obj;
                            stall = 0;
                        } else {
                            stall += ABORT_CHECK_EVERY;
                            if stall >= ABORT_WINDOW {
                                break;
                            }
                        }
                    }
                }
            }
        }

        // binary search per sample: success -> lower c (less attack weight);
        // failure -> raise c
        for (i, s) in state.iter_mut().enumerate() {
            if success_this_round[i] {
                s.ever_succeeded = true;
                s.c_high = s.c;
                s.c = 0.5 * (s.c_low + s.c_high);
            } else {
                s.c_low = s.c;
                s.c = if s.c_high >= C_MAX {
                    (s.c * 10.0).min(C_MAX)
                } else {
                    0.5 * (s.c_low + s.c_high)
                };
            }
        }
    }

    // best successful iterate per sample, else the last iterate
    let mut final_data = last_iterate;
    for (i, s) in state.iter().enumerate() {
        if let Some(best) = &s.best_x {
            final_data[i * row..(i + 1) * row].copy_from_slice(best);
        }
    }
    let losses: Vec<f32> = state.iter().map(|s| s.last_loss).collect();
    finish_outcome(model, x, final_data, y_target, queries, &losses)
}

/// Unclamped per-sample margin max_{j != t} z_j - z_t, for bookkeeping.
fn raw_margins(logits: &[f32], n: usize, target: usize) -> Vec<f32> {
    let k = logits.len() / n;
    (0..n)
        .map(|i| {
            let row = &logits[i * k..(i + 1) * k];
            let best_other = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != target)
                .map(|(_, &z)| z)
                .fold(f32::NEG_INFINITY, f32::max);
            best_other - row[target]
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn record_progress(
    state: &mut [PerSample],
    success_this_round: &mut [bool],
    last_iterate: &mut [f32],
    x_adv: &[f32],
    dist: &[f32],
    raw_margins: &[f32],
    confidence: f32,
    row: usize,
) {
    last_iterate.copy_from_slice(x_adv);
    for (i, s) in state.iter_mut().enumerate() {
        s.last_loss = raw_margins[i];
        // strictly past the demanded margin: the target label wins
        let succeeded = raw_margins[i] < -confidence;
        if succeeded {
            success_this_round[i] = true;
            if dist[i] < s.best_dist {
                s.best_dist = dist[i];
                s.best_x = Some(x_adv[i * row..(i + 1) * row].to_vec());
            }
        }
    }
}

fn atanh(v: f32) -> f32 {
    // clamp away from the asymptotes
    let v = v.clamp(-0.999_999, 0.999_999);
    0.5 * ((1.0 + v) / (1.0 - v)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackMethod;
    use crate::model::{mlp_spec, Model};

    /// Two-class linear model on 2-d inputs: logits = [0, w.x + b].
    fn linear_two_class(w: [f32; 2], b: f32) -> Model {
        let model = Model::build(mlp_spec(2, &[2], 2), 1).unwrap();
        model
            .params
            .get("layer1.weight")
            .unwrap()
            .set_data(vec![1.0, 0.0, 0.0, 1.0]);
        model
            .params
            .get("layer2.weight")
            .unwrap()
            .set_data(vec![0.0, w[0], 0.0, w[1]]);
        model
            .params
            .get("layer2.bias")
            .unwrap()
            .set_data(vec![0.0, b]);
        model
    }

    #[test]
    fn cw_finds_near_minimal_hyperplane_projection() {
        // Decision boundary w.x + b = 0 with w = (2, 1), b = -1.2.
        // From x = (0.3, 0.2): distance to hyperplane = |w.x+b|/|w| =
        // |0.6+0.2-1.2|/sqrt(5) = 0.4/2.2360 = 0.17889.
        let model = linear_two_class([2.0, 1.0], -1.2);
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.3, 0.2]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::Cw, 3);
        cfg.iterations = 300;
        cfg.cw.binary_steps = 8;
        cfg.cw.lr = 0.01;
        let out = cw_l2(&model, &x, 1, &cfg).unwrap();
        assert!(out.results[0].success);
        let l2 = out.results[0].perturbation_norms.l2;
        let analytic = 0.4 / 5.0f32.sqrt();
        assert!(
            l2 <= analytic * 1.10 + 1e-3,
            "l2 {l2} should be within 10% of analytic {analytic}"
        );
    }

    #[test]
    fn cw_confidence_shifts_the_margin() {
        let model = linear_two_class([2.0, 1.0], -1.2);
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.3, 0.2]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::Cw, 3);
        cfg.iterations = 400;
        cfg.cw.binary_steps = 6;
        cfg.cw.lr = 0.02;
        cfg.cw.confidence = 0.5;
        let out = cw_l2(&model, &x, 1, &cfg).unwrap();
        assert!(out.results[0].success);
        let logits = model.forward(&out.x_adv).unwrap().to_vec();
        let margin = logits[1] - logits[0];
        assert!(
            margin >= 0.5 - 1e-2,
            "confidence=0.5 requires logit margin >= 0.5, got {margin}"
        );
    }

    #[test]
    fn elastic_net_beta_zero_matches_cw_objective() {
        let model = linear_two_class([1.5, -0.5], -0.4);
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.25, 0.6]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::ElasticNet, 7);
        cfg.iterations = 300;
        cfg.cw.binary_steps = 6;
        cfg.cw.lr = 0.02;
        cfg.en.beta = 0.0;
        let en = elastic_net(&model, &x, 1, &cfg).unwrap();
        let mut cw_cfg = cfg;
        cw_cfg.cw.lr = 0.01;
        let cw = cw_l2(&model, &x, 1, &cw_cfg).unwrap();
        assert!(en.results[0].success && cw.results[0].success);
        let d = (en.results[0].perturbation_norms.l2 - cw.results[0].perturbation_norms.l2).abs();
        assert!(
            d <= 0.05,
            "beta=0 elastic net should land near CW-L2 ({} vs {})",
            en.results[0].perturbation_norms.l2,
            cw.results[0].perturbation_norms.l2
        );
    }

    #[test]
    fn elastic_net_large_beta_is_sparser() {
        // 4-d problem where only one coordinate matters; large beta should
        // zero out the irrelevant coordinates.
        let model = Model::build(mlp_spec(4, &[4], 2), 1).unwrap();
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        model.params.get("layer1.weight").unwrap().set_data(eye);
        model
            .params
            .get("layer2.weight")
            .unwrap()
            .set_data(vec![0.0, 3.0, 0.0, 0.1, 0.0, 0.1, 0.0, 0.1]);
        model
            .params
            .get("layer2.bias")
            .unwrap()
            .set_data(vec![0.0, -1.0]);
        let x = Tensor::new(&[1, 1, 1, 4], vec![0.2, 0.2, 0.2, 0.2]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::ElasticNet, 5);
        cfg.iterations = 400;
        cfg.cw.binary_steps = 5;
        cfg.cw.lr = 0.02;

        let sparse_count = |out: &AttackOutcome| {
            let adv = out.x_adv.to_vec();
            adv.iter()
                .zip(&x.to_vec()[..])
                .filter(|(a, o)| (*a - *o).abs() > 1e-4)
                .count()
        };
        cfg.en.beta = 0.0;
        let dense = elastic_net(&model, &x, 1, &cfg).unwrap();
        cfg.en.beta = 0.05;
        let sparse = elastic_net(&model, &x, 1, &cfg).unwrap();
        assert!(dense.results[0].success && sparse.results[0].success);
        assert!(
            sparse_count(&sparse) < sparse_count(&dense),
            "beta 0.05 perturbs {} coords, beta 0 perturbs {}",
            sparse_count(&sparse),
            sparse_count(&dense)
        );
    }

    #[test]
    fn results_stay_in_unit_box() {
        let model = linear_two_class([5.0, 5.0], -0.2);
        let x = Tensor::new(&[2, 1, 1, 2], vec![0.01, 0.99, 0.5, 0.5]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::Cw, 2);
        cfg.iterations = 100;
        cfg.cw.binary_steps = 3;
        for out in [
            cw_l2(&model, &x, 1, &cfg).unwrap(),
            elastic_net(&model, &x, 1, &cfg).unwrap(),
        ] {
            assert!(out.x_adv.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
