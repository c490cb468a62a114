//! Detection metrics: ROC/AUC by rank statistics, detection rate at a fixed
//! false-positive rate, and quantile summaries of similarity distributions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{max_similarities, threshold_from_pool, DetectError, Detector};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("similarity_distribution needs >= {need} inputs, got {got}")]
    TooFewInputs { got: usize, need: usize },
}

/// AUC via the Mann-Whitney rank-sum formulation; ties count half. Benign
/// scores are the negatives, adversarial the positives.
pub fn roc_auc(similarities_benign: &[f32], similarities_adv: &[f32]) -> Result<f32, MetricsError> {
    if similarities_benign.is_empty() {
        return Err(MetricsError::EmptySet("benign"));
    }
    if similarities_adv.is_empty() {
        return Err(MetricsError::EmptySet("adversarial"));
    }
    let mut all: Vec<(f32, bool)> = similarities_benign
        .iter()
        .map(|&s| (s, false))
        .chain(similarities_adv.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // average ranks over tie groups (1-indexed)
    let n = all.len();
    let mut rank_sum_adv = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_adv += avg_rank;
            }
        }
        i = j;
    }
    let pos = similarities_adv.len() as f64;
    let neg = similarities_benign.len() as f64;
    let u = rank_sum_adv - pos * (pos + 1.0) / 2.0;
    Ok((u / (pos * neg)) as f32)
}

/// ROC curve points (fpr, tpr) swept over every distinct threshold, for
/// plotting.
pub fn roc_curve(similarities_benign: &[f32], similarities_adv: &[f32]) -> Vec<(f32, f32)> {
    let mut thresholds: Vec<f32> = similarities_benign
        .iter()
        .chain(similarities_adv)
        .cloned()
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let fpr = similarities_benign.iter().filter(|&&s| s > t).count() as f32
            / similarities_benign.len().max(1) as f32;
        let tpr = similarities_adv.iter().filter(|&&s| s > t).count() as f32
            / similarities_adv.len().max(1) as f32;
        points.push((fpr, tpr));
    }
    points.push((1.0, 1.0));
    points
}

/// Fraction of the (successful) adversarial inputs flagged at per-label
/// thresholds realizing `fpr` on `benign`. Thresholds are recomputed from
/// the detector's signatures against the supplied benign set, which must be
/// disjoint from the calibration data.
pub fn detection_rate_at_fpr(
    detector: &Detector,
    model: &Model,
    adversarial: &Tensor,
    benign: &Tensor,
    fpr: f32,
) -> Result<f32, MetricsError> {
    if adversarial.shape()[0] == 0 {
        return Err(MetricsError::EmptySet("adversarial"));
    }
    if benign.shape()[0] == 0 {
        return Err(MetricsError::EmptySet("benign"));
    }
    let preds = model.predict(adversarial).map_err(DetectError::Model)?;
    let mut flagged = 0usize;
    for (&label, sigs) in &detector.signatures {
        let rows: Vec<usize> = (0..preds.len()).filter(|&i| preds[i] == label).collect();
        if rows.is_empty() {
            continue;
        }
        let benign_sims = max_similarities(sigs, model, benign)?;
        let phi = threshold_from_pool(&benign_sims, fpr);
        let sub = subset_rows(adversarial, &rows);
        let sims = max_similarities(sigs, model, &sub)?;
        flagged += sims.iter().filter(|&&s| s > phi).count();
    }
    Ok(flagged as f32 / preds.len() as f32)
}

/// Five-point nearest-rank quantile summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub p5: f32,
    pub p25: f32,
    pub p50: f32,
    pub p75: f32,
    pub p95: f32,
}

/// Nearest-rank quantile of an unsorted sample.
pub fn nearest_rank_quantile(values: &[f32], q: f32) -> f32 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let rank = ((q as f64 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn quantile_summary(values: &[f32]) -> QuantileSummary {
    QuantileSummary {
        p5: nearest_rank_quantile(values, 0.05),
        p25: nearest_rank_quantile(values, 0.25),
        p50: nearest_rank_quantile(values, 0.50),
        p75: nearest_rank_quantile(values, 0.75),
        p95: nearest_rank_quantile(values, 0.95),
    }
}

/// Quantiles of the max similarity over every signature the detector holds,
/// tagged for plot-ready output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub tag: String,
    pub n: usize,
    pub quantiles: QuantileSummary,
}

pub const MIN_DISTRIBUTION_INPUTS: usize = 20;

pub fn similarity_distribution(
    detector: &Detector,
    model: &Model,
    inputs: &Tensor,
    tag: &str,
) -> Result<SimilarityDistribution, MetricsError> {
    let n = inputs.shape()[0];
    if n < MIN_DISTRIBUTION_INPUTS {
        return Err(MetricsError::TooFewInputs {
            got: n,
            need: MIN_DISTRIBUTION_INPUTS,
        });
    }
    let mut best = vec![f32::NEG_INFINITY; n];
    for sigs in detector.signatures.values() {
        let sims = max_similarities(sigs, model, inputs)?;
        for (b, s) in best.iter_mut().zip(sims) {
            *b = b.max(s);
        }
    }
    Ok(SimilarityDistribution {
        tag: tag.to_string(),
        n,
        quantiles: quantile_summary(&best),
    })
}

fn subset_rows(x: &Tensor, rows: &[usize]) -> Tensor {
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

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force AUC oracle: average over all (benign, adv) pairs of
    /// 1[adv > benign] + 0.5 * 1[tie].
    pub fn auc_pairwise_oracle(benign: &[f32], adv: &[f32]) -> f32 {
        let mut total = 0.0f64;
        for &b in benign {
            for &a in adv {
                total += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        (total / (benign.len() as f64 * adv.len() as f64)) as f32
    }

    #[test]
    fn auc_perfect_separation() {
        let auc = roc_auc(&[0.1, 0.2, 0.3], &[0.5, 0.6]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_identical_pools_is_half() {
        let auc = roc_auc(&[0.4, 0.4, 0.4], &[0.4, 0.4]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn auc_hand_case_three_quarters() {
        // benign {0.1, 0.2}, adv {0.15, 0.3}: pairs (0.15>0.1)=1,
        // (0.15>0.2)=0, (0.3>0.1)=1, (0.3>0.2)=1 -> 3/4
        let auc = roc_auc(&[0.1, 0.2], &[0.15, 0.3]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(auc_pairwise_oracle(&[0.1, 0.2], &[0.15, 0.3]), 0.75);
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let benign: Vec<f32> = (0..40).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
        let adv: Vec<f32> = (0..25).map(|i| ((i * 5) % 11) as f32 / 11.0 + 0.1).collect();
        let fast = roc_auc(&benign, &adv).unwrap();
        let slow = auc_pairwise_oracle(&benign, &adv);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn auc_rejects_empty() {
        assert!(roc_auc(&[], &[0.5]).is_err());
        assert!(roc_auc(&[0.5], &[]).is_err());
    }

    #[test]
    fn quantiles_constant_input() {
        let q = quantile_summary(&[0.3; 50]);
        assert_eq!(
            (q.p5, q.p25, q.p50, q.p75, q.p95),
            (0.3, 0.3, 0.3, 0.3, 0.3)
        );
    }

    #[test]
    fn quantiles_uniform_grid() {
        // 101 points 0.00..=1.00: nearest-rank q-th = value at
        // ceil(q*101)-1; e.g. p5 -> index 5 -> 0.05
        let grid: Vec<f32> = (0..=100).map(|i| i as f32 / 100.0).collect();
        let q = quantile_summary(&grid);
        assert_eq!(q.p5, 0.05);
        assert_eq!(q.p25, 0.25);
        assert_eq!(q.p50, 0.50);
        assert_eq!(q.p75, 0.75);
        assert_eq!(q.p95, 0.95);
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&[0.1, 0.5], &[0.4, 0.9]);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }
}
