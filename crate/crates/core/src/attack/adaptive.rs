//! Signature-aware adaptive attacks: the oracle signature attack (attacker
//! knows the defender's trapdoor signatures exactly) and the trapdoor vault
//! attack (attacker estimates them by clustering the features of probe
//! attacks), both optimizing a joint objective that trades target-label
//! loss against cosine similarity to the known or estimated signatures.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{features_at, LayerKey, TrapdoorSignature};
use crate::model::{Dataset, Model};
use crate::tensor::Tensor;

use super::{
    finish_outcome, pgd, project_box, AttackConfig, AttackError, AttackMethod, AttackOutcome,
};

/// Joint PGD-style descent on ce(F(x'), y_t) + w * sum_s cos(g(x'), S_s).
/// The signatures must cover the full width of one shared layer (the oracle
/// assumption). With w = 0 this is exactly PGD.
pub fn oracle_signature_attack(
    model: &Model,
    x: &Tensor,
    y_target: usize,
    known_sigs: &[TrapdoorSignature],
    config: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    if known_sigs.is_empty() {
        return Err(AttackError::InvalidConfig(
            "oracle attack needs at least one signature".into(),
        ));
    }
    let layer = known_sigs[0].layer.clone();
    let width = layer.width(model)?;
    for sig in known_sigs {
        if sig.layer != layer {
            return Err(AttackError::InvalidConfig(
                "oracle signatures must share one layer".into(),
            ));
        }
        if sig.neuron_indices.len() != width {
            return Err(AttackError::InvalidConfig(
                "oracle signatures must cover the full layer".into(),
            ));
        }
    }
    let weight = config.adaptive.distance_weight;
    let n = x.shape()[0];
    let row: usize = x.shape()[1..].iter().product();
    let orig = x.to_vec();
    let mut data = orig.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for v in &mut data {
        *v += rng.random_range(-config.eps..config.eps);
    }
    project_box(&mut data, &orig, config.eps);

    let sig_tensors: Vec<Tensor> = known_sigs
        .iter()
        .map(|s| Tensor::new(&[width], s.vector.clone()).unwrap())
        .collect();

    // best iterate per sample: successful with the lowest mean similarity
    let mut best: Vec<Option<(f32, Vec<f32>)>> = vec![None; n];
    let mut losses = vec![f32::NAN; n];
    let mut queries = 0usize;
    for _ in 0..config.iterations {
        let leaf = Tensor::leaf(x.shape(), data.clone(), true).unwrap();
        let acts = model.forward_activations(&leaf)?;
        let logits = acts.last().unwrap().clone();
        let ce = logits.cross_entropy_with_logits(&vec![y_target; n])?;
        losses = ce.to_vec();
        let joint = if weight != 0.0 {
            let feats = features_graph_from_acts(&acts, &layer)?;
            let mut cos_sum: Option<Tensor> = None;
            for sig in &sig_tensors {
                let c = feats.cosine_rows(sig)?;
                cos_sum = Some(match cos_sum {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
            let cos_sum = cos_sum.unwrap();
            // bookkeeping: keep the successful iterate with the lowest
            // similarity seen so far
            let preds = logits.argmax_rows();
            let mean_cos = cos_sum.to_vec();
            for i in 0..n {
                if preds[i] == y_target {
                    let score = mean_cos[i] / known_sigs.len() as f32;
                    let better = match &best[i] {
                        Some((s, _)) => score < *s,
                        None => true,
                    };
                    if better {
                        best[i] = Some((score, data[i * row..(i + 1) * row].to_vec()));
                    }
                }
            }
            ce.add(&cos_sum.scale(weight))?.sum_all()
        } else {
            ce.sum_all()
        };
        joint.backward()?;
        let grad = leaf.grad().expect("input gradient");
        queries += 2;
        for (v, g) in data.iter_mut().zip(&grad) {
            *v -= config.step_size
                * if *g > 0.0 {
                    1.0
                } else if *g < 0.0 {
                    -1.0
                } else {
                    0.0
                };
        }
        project_box(&mut data, &orig, config.eps);
    }
    if weight != 0.0 {
        for (i, b) in best.iter().enumerate() {
            if let Some((_, d)) = b {
                data[i * row..(i + 1) * row].copy_from_slice(d);
            }
        }
    }
    finish_outcome(model, x, data, y_target, queries, &losses)
}

fn features_graph_from_acts(acts: &[Tensor], layer: &LayerKey) -> Result<Tensor, AttackError> {
    match layer {
        LayerKey::Single(i) => Ok(acts[*i].flatten()?),
        LayerKey::Concat(ids) => {
            let mut out = acts[ids[0]].flatten()?;
            for &i in &ids[1..] {
                out = out.concat_cols(&acts[i].flatten()?)?;
            }
            Ok(out)
        }
    }
}

/// Vault attack result: the adversarial outcome plus the estimated
/// signature centroids for diagnostics.
pub struct VaultOutcome {
    pub outcome: AttackOutcome,
    pub centroids: Vec<Vec<f32>>,
}

/// Estimate trapdoor signatures by attacking probe inputs with PGD,
/// clustering the feature vectors of the successful probes into
/// `n_trapdoors_known` centroids, then running the oracle attack against
/// the estimated centroids.
pub fn vault_attack(
    model: &Model,
    probe_set: &Dataset,
    x: &Tensor,
    y_target: usize,
    n_trapdoors_known: usize,
    config: &AttackConfig,
) -> Result<VaultOutcome, AttackError> {
    config.validate()?;
    if probe_set.len() < 10 {
        return Err(AttackError::InvalidConfig(format!(
            "vault attack needs >= 10 probe inputs, got {}",
            probe_set.len()
        )));
    }
    if n_trapdoors_known == 0 {
        return Err(AttackError::InvalidConfig(
            "n_trapdoors_known must be >= 1".into(),
        ));
    }
    // base attack on the probes
    let mut probe_cfg = AttackConfig::preset(AttackMethod::Pgd, config.seed ^ 0x9e3779b97f4a7c15);
    probe_cfg.eps = config.eps;
    probe_cfg.step_size = config.step_size;
    let probe_out = pgd(model, &probe_set.inputs, y_target, &probe_cfg)?;
    let successes = probe_out.successful_indices();
    if successes.len() < n_trapdoors_known {
        return Err(AttackError::DegenerateClustering {
            vectors: successes.len(),
            clusters: n_trapdoors_known,
        });
    }
    let layer = LayerKey::Single(model.spec.default_feature_layer());
    let width = layer.width(model)?;
    let feats = features_at(model, &probe_out.x_adv, &layer)?;
    // normalized feature rows of successful probes (cosine geometry)
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(successes.len());
    for &i in &successes {
        let mut row = feats[i * width..(i + 1) * width].to_vec();
        let nrm = crate::tensor::norm(&row);
        if nrm > 0.0 {
            for v in &mut row {
                *v /= nrm;
            }
            rows.push(row);
        }
    }
    let mut distinct = rows.clone();
    distinct.dedup_by(|a, b| a == b);
    if distinct.len() < n_trapdoors_known {
        return Err(AttackError::DegenerateClustering {
            vectors: distinct.len(),
            clusters: n_trapdoors_known,
        });
    }
    let centroids = kmeans(&rows, n_trapdoors_known, 10, 50, config.seed);
    let sigs: Vec<TrapdoorSignature> = centroids
        .iter()
        .map(|c| TrapdoorSignature {
            label: y_target,
            layer: layer.clone(),
            neuron_indices: (0..width).collect(),
            vector: c.clone(),
            n_samples: rows.len(),
        })
        .collect();
    let outcome = oracle_signature_attack(model, x, y_target, &sigs, config)?;
    Ok(VaultOutcome { outcome, centroids })
}

/// Seeded Lloyd's algorithm with random restarts; returns the best-inertia
/// centroid set. Empty clusters keep their previous centroid.
pub fn kmeans(rows: &[Vec<f32>], k: usize, restarts: usize, iters: usize, seed: u64) -> Vec<Vec<f32>> {
    assert!(!rows.is_empty() && k >= 1 && k <= rows.len());
    let dim = rows[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: (f32, Vec<Vec<f32>>) = (f32::INFINITY, Vec::new());
    for _ in 0..restarts.max(1) {
        // init from distinct random points
        let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < k {
            let i = rng.random_range(0..rows.len());
            if !picked.contains(&i) {
                picked.push(i);
                centroids.push(rows[i].clone());
            }
        }
        let mut assign = vec![0usize; rows.len()];
        for _ in 0..iters {
            let mut changed = false;
            for (ri, row) in rows.iter().enumerate() {
                let mut bi = 0;
                let mut bd = f32::INFINITY;
                for (ci, c) in centroids.iter().enumerate() {
                    let d = sq_dist(row, c);
                    if d < bd {
                        bd = d;
                        bi = ci;
                    }
                }
                if assign[ri] != bi {
                    assign[ri] = bi;
                    changed = true;
                }
            }
            for (ci, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vec<f32>> =
                    rows.iter().zip(&assign).filter(|(_, &a)| a == ci).map(|(r, _)| r).collect();
                if members.is_empty() {
                    continue;
                }
                let mut mean = vec![0.0f32; dim];
                for m in &members {
                    for (s, v) in mean.iter_mut().zip(m.iter()) {
                        *s += v;
                    }
                }
                for s in &mut mean {
                    *s /= members.len() as f32;
                }
                *centroid = mean;
            }
            if !changed {
                break;
            }
        }
        let inertia: f32 = rows
            .iter()
            .zip(&assign)
            .map(|(r, &a)| sq_dist(r, &centroids[a]))
            .sum();
        if inertia < best.0 {
            best = (inertia, centroids);
        }
    }
    best.1
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mlp_spec, Model};

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let eps = (i % 5) as f32 * 0.01;
            rows.push(vec![1.0 + eps, 0.0]);
            rows.push(vec![0.0, 1.0 + eps]);
        }
        let centroids = kmeans(&rows, 2, 5, 50, 3);
        let mut xs: Vec<f32> = centroids.iter().map(|c| c[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(xs[0] < 0.1 && xs[1] > 0.9);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let rows: Vec<Vec<f32>> = (0..30)
            .map(|i| vec![(i as f32 * 0.37).sin(), (i as f32 * 0.71).cos()])
            .collect();
        let a = kmeans(&rows, 3, 10, 50, 42);
        let b = kmeans(&rows, 3, 10, 50, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_zero_weight_equals_pgd() {
        let model = Model::build(mlp_spec(4, &[8], 3), 5).unwrap();
        let x = Tensor::new(&[2, 1, 1, 4], vec![0.4, 0.6, 0.3, 0.7, 0.2, 0.5, 0.8, 0.1]).unwrap();
        let mut cfg = AttackConfig::preset(AttackMethod::OracleSig, 17);
        cfg.iterations = 8;
        cfg.adaptive.distance_weight = 0.0;
        let layer = LayerKey::Single(model.spec.default_feature_layer());
        let width = layer.width(&model).unwrap();
        let sig = TrapdoorSignature {
            label: 1,
            layer,
            neuron_indices: (0..width).collect(),
            vector: vec![0.5; width],
            n_samples: 30,
        };
        let a = oracle_signature_attack(&model, &x, 1, &[sig], &cfg).unwrap();
        let mut pgd_cfg = cfg;
        pgd_cfg.method = AttackMethod::Pgd;
        let b = pgd(&model, &x, 1, &pgd_cfg).unwrap();
        assert_eq!(a.x_adv.to_vec(), b.x_adv.to_vec());
    }

    #[test]
    fn oracle_rejects_partial_signatures() {
        let model = Model::build(mlp_spec(4, &[8], 3), 5).unwrap();
        let x = Tensor::new(&[1, 1, 1, 4], vec![0.5; 4]).unwrap();
        let cfg = AttackConfig::preset(AttackMethod::OracleSig, 1);
        let sig = TrapdoorSignature {
            label: 1,
            layer: LayerKey::Single(model.spec.default_feature_layer()),
            neuron_indices: vec![0, 1, 2],
            vector: vec![0.5; 3],
            n_samples: 30,
        };
        assert!(oracle_signature_attack(&model, &x, 1, &[sig], &cfg).is_err());
    }

    #[test]
    fn vault_rejects_tiny_probe_sets() {
        let model = Model::build(mlp_spec(4, &[8], 3), 5).unwrap();
        let probes = crate::io::synth::synth_blobs(3, 4, 2, 1).unwrap();
        let x = Tensor::new(&[1, 1, 1, 4], vec![0.5; 4]).unwrap();
        let cfg = AttackConfig::preset(AttackMethod::Vault, 1);
        let err = vault_attack(&model, &probes, &x, 1, 1, &cfg);
        assert!(err.is_err());
    }
}
