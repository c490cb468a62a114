//! Trapdoor construction, dataset poisoning, and trapdoored training.
//!
//! A trapdoor is a masked perturbation (mask M in {0, kappa}, pattern delta,
//! target label) injected into training data under the target label so the
//! model learns it as a universal shortcut. Injection blends pattern into
//! image elementwise: x' = (1 - m) * x + m * delta.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::seed::derive_seed;
use crate::model::{train, Dataset, Model, ModelError, TrainConfig, TrainLog};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrapdoorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trapdoor shape {trapdoor:?} does not match input shape {input:?}")]
    ShapeMismatch {
        trapdoor: Vec<usize>,
        input: Vec<usize>,
    },
    #[error("invalid trapdoor: {0}")]
    Invalid(String),
    #[error("could not place {squares} non-overlapping squares after {retries} retries")]
    PlacementFailed { squares: usize, retries: usize },
    #[error("no eligible samples for target label {0}")]
    NoEligibleSamples(usize),
    #[error("registry has no defended labels")]
    EmptyRegistry,
}

/// One honeypot perturbation for a target label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trapdoor {
    /// C, H, W
    pub shape: [usize; 3],
    /// Flattened mask, each element exactly 0 or kappa.
    pub mask: Vec<f32>,
    /// Flattened pattern, values in [0,1].
    pub pattern: Vec<f32>,
    pub kappa: f32,
    pub target_label: usize,
}

impl Trapdoor {
    pub fn validate(&self) -> Result<(), TrapdoorError> {
        let numel = self.shape.iter().product::<usize>();
        if self.mask.len() != numel || self.pattern.len() != numel {
            return Err(TrapdoorError::Invalid(format!(
                "mask/pattern length {} / {} does not fill shape {:?}",
                self.mask.len(),
                self.pattern.len(),
                self.shape
            )));
        }
        if !(0.0 < self.kappa && self.kappa <= 1.0) {
            return Err(TrapdoorError::Invalid(format!(
                "kappa {} outside (0, 1]",
                self.kappa
            )));
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != self.kappa) {
            return Err(TrapdoorError::Invalid(
                "mask elements must be exactly 0 or kappa".into(),
            ));
        }
        if self.pattern.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(TrapdoorError::Invalid("pattern values outside [0,1]".into()));
        }
        Ok(())
    }

    /// Count of nonzero mask positions.
    pub fn masked_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

/// Blend a trapdoor into a batch ([N,C,H,W]) or single image ([C,H,W]).
/// Pixels with mask 0 pass through untouched; output stays in [0,1].
pub fn inject(x: &Tensor, trapdoor: &Trapdoor) -> Result<Tensor, TrapdoorError> {
    let numel: usize = trapdoor.shape.iter().product();
    let per_image: usize = match x.shape() {
        [c, h, w] if [*c, *h, *w] == trapdoor.shape => numel,
        [_, c, h, w] if [*c, *h, *w] == trapdoor.shape => numel,
        _ => {
            return Err(TrapdoorError::ShapeMismatch {
                trapdoor: trapdoor.shape.to_vec(),
                input: x.shape().to_vec(),
            })
        }
    };
    let src = x.to_vec();
    let mut out = Vec::with_capacity(src.len());
    for (i, &v) in src.iter().enumerate() {
        let j = i % per_image;
        let m = trapdoor.mask[j];
        out.push(((1.0 - m) * v + m * trapdoor.pattern[j]).clamp(0.0, 1.0));
    }
    Ok(Tensor::new(x.shape(), out).unwrap())
}

/// Single square trapdoor at the bottom-right corner, noise-filled pattern.
pub fn make_single_square(
    shape: [usize; 3],
    side: usize,
    kappa: f32,
    target_label: usize,
    seed: u64,
) -> Result<Trapdoor, TrapdoorError> {
    let [c, h, w] = shape;
    if side == 0 || side > h || side > w {
        return Err(TrapdoorError::Invalid(format!(
            "square side {side} does not fit {h}x{w} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = c * h * w;
    let pattern: Vec<f32> = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut mask = vec![0.0f32; numel];
    for ch in 0..c {
        for y in h - side..h {
            for x in w - side..w {
                mask[(ch * h + y) * w + x] = kappa;
            }
        }
    }
    let t = Trapdoor {
        shape,
        mask,
        pattern,
        kappa,
        target_label,
    };
    t.validate()?;
    Ok(t)
}

const PLACEMENT_RETRIES: usize = 1000;

/// Trapdoor made of `n_squares` non-overlapping random squares, each filled
/// with one intensity drawn from Normal(mu, sigma) clipped to [0,1].
#[allow(clippy::too_many_arguments)]
pub fn make_multi_square(
    shape: [usize; 3],
    n_squares: usize,
    square: usize,
    kappa: f32,
    mu_intensity: f32,
    sigma_intensity: f32,
    target_label: usize,
    seed: u64,
) -> Result<Trapdoor, TrapdoorError> {
    make_multi_square_avoiding(
        shape,
        n_squares,
        square,
        kappa,
        mu_intensity,
        sigma_intensity,
        target_label,
        seed,
        &mut Vec::new(),
    )
}

/// Like [`make_multi_square`] but also keeping clear of `occupied` squares
/// (and appending its own placements), so a registry can keep trapdoors of
/// different labels from interfering.
#[allow(clippy::too_many_arguments)]
pub fn make_multi_square_avoiding(
    shape: [usize; 3],
    n_squares: usize,
    square: usize,
    kappa: f32,
    mu_intensity: f32,
    sigma_intensity: f32,
    target_label: usize,
    seed: u64,
    occupied: &mut Vec<(usize, usize)>,
) -> Result<Trapdoor, TrapdoorError> {
    let [c, h, w] = shape;
    if square == 0 || square > h || square > w {
        return Err(TrapdoorError::Invalid(format!(
            "square side {square} does not fit {h}x{w} image"
        )));
    }
    if !(0.0..=1.0).contains(&mu_intensity) {
        return Err(TrapdoorError::Invalid(format!(
            "mu_intensity {mu_intensity} outside [0,1] (pixel scale is normalized)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = c * h * w;
    let mut mask = vec![0.0f32; numel];
    let mut pattern = vec![0.0f32; numel];
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(n_squares);
    let normal = if sigma_intensity > 0.0 {
        Some(Normal::new(mu_intensity, sigma_intensity).unwrap())
    } else {
        None
    };
    for _ in 0..n_squares {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let y = rng.random_range(0..=h - square);
            let x = rng.random_range(0..=w - square);
            let overlaps = placed
                .iter()
                .chain(occupied.iter())
                .any(|&(py, px)| {
                    y < py + square && py < y + square && x < px + square && px < x + square
                });
            if overlaps {
                continue;
            }
            let intensity = match &normal {
                Some(n) => n.sample(&mut rng).clamp(0.0, 1.0),
                None => mu_intensity,
            };
            for ch in 0..c {
                for dy in 0..square {
                    for dx in 0..square {
                        let idx = (ch * h + y + dy) * w + x + dx;
                        mask[idx] = kappa;
                        pattern[idx] = intensity;
                    }
                }
            }
            placed.push((y, x));
            ok = true;
            break;
        }
        if !ok {
            return Err(TrapdoorError::PlacementFailed {
                squares: n_squares,
                retries: PLACEMENT_RETRIES,
            });
        }
    }
    occupied.extend_from_slice(&placed);
    let t = Trapdoor {
        shape,
        mask,
        pattern,
        kappa,
        target_label,
    };
    t.validate()?;
    Ok(t)
}

/// Which attribute distinguishes the members of a multi-trapdoor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetVariant {
    /// Same square content, distinct non-overlapping locations.
    Locations,
    /// Fixed bottom-right placement, distinct uniform intensities.
    Intensities,
}

/// N trapdoors sharing one target label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrapdoorSet {
    pub trapdoors: Vec<Trapdoor>,
}

impl TrapdoorSet {
    pub fn single(trapdoor: Trapdoor) -> Self {
        TrapdoorSet {
            trapdoors: vec![trapdoor],
        }
    }

    pub fn target_label(&self) -> usize {
        self.trapdoors[0].target_label
    }

    pub fn len(&self) -> usize {
        self.trapdoors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trapdoors.is_empty()
    }

    pub fn validate(&self) -> Result<(), TrapdoorError> {
        if self.trapdoors.is_empty() {
            return Err(TrapdoorError::Invalid("empty trapdoor set".into()));
        }
        let target = self.trapdoors[0].target_label;
        for t in &self.trapdoors {
            t.validate()?;
            if t.target_label != target {
                return Err(TrapdoorError::Invalid(
                    "trapdoor set members must share one target label".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Base geometry for [`make_trapdoor_set`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SetBaseConfig {
    pub shape: [usize; 3],
    pub side: usize,
    pub kappa: f32,
    pub target_label: usize,
}

/// Build an N-member set varying only the requested attribute.
pub fn make_trapdoor_set(
    base: &SetBaseConfig,
    n: usize,
    variant: SetVariant,
    seed: u64,
) -> Result<TrapdoorSet, TrapdoorError> {
    if n == 0 {
        return Err(TrapdoorError::Invalid("set size must be >= 1".into()));
    }
    let [c, h, w] = base.shape;
    if base.side == 0 || base.side > h || base.side > w {
        return Err(TrapdoorError::Invalid(format!(
            "square side {} does not fit {h}x{w} image",
            base.side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = c * h * w;
    let side = base.side;
    let mut trapdoors = Vec::with_capacity(n);
    match variant {
        SetVariant::Locations => {
            // one shared noise patch stamped at n disjoint locations
            let patch: Vec<f32> = (0..c * side * side)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            if n == 1 {
                // singleton set keeps the canonical bottom-right placement
                let mut mask = vec![0.0f32; numel];
                let mut pattern = vec![0.0f32; numel];
                stamp(&mut mask, &mut pattern, &patch, base, h - side, w - side);
                trapdoors.push(finish(base, mask, pattern)?);
            } else {
                let mut placed: Vec<(usize, usize)> = Vec::new();
                for _ in 0..n {
                    let mut ok = false;
                    for _ in 0..PLACEMENT_RETRIES {
                        let y = rng.random_range(0..=h - side);
                        let x = rng.random_range(0..=w - side);
                        let overlaps = placed.iter().any(|&(py, px)| {
                            y < py + side && py < y + side && x < px + side && px < x + side
                        });
                        if overlaps {
                            continue;
                        }
                        let mut mask = vec![0.0f32; numel];
                        let mut pattern = vec![0.0f32; numel];
                        stamp(&mut mask, &mut pattern, &patch, base, y, x);
                        trapdoors.push(finish(base, mask, pattern)?);
                        placed.push((y, x));
                        ok = true;
                        break;
                    }
                    if !ok {
                        return Err(TrapdoorError::PlacementFailed {
                            squares: n,
                            retries: PLACEMENT_RETRIES,
                        });
                    }
                }
            }
        }
        SetVariant::Intensities => {
            for _ in 0..n {
                let intensity: f32 = rng.random_range(0.0..1.0);
                let mut mask = vec![0.0f32; numel];
                let mut pattern = vec![0.0f32; numel];
                let patch = vec![intensity; c * side * side];
                stamp(&mut mask, &mut pattern, &patch, base, h - side, w - side);
                trapdoors.push(finish(base, mask, pattern)?);
            }
        }
    }
    let set = TrapdoorSet { trapdoors };
    set.validate()?;
    Ok(set)
}

fn stamp(
    mask: &mut [f32],
    pattern: &mut [f32],
    patch: &[f32],
    base: &SetBaseConfig,
    y0: usize,
    x0: usize,
) {
    let [c, h, w] = base.shape;
    let side = base.side;
    for ch in 0..c {
        for dy in 0..side {
            for dx in 0..side {
                let idx = (ch * h + y0 + dy) * w + x0 + dx;
                mask[idx] = base.kappa;
                pattern[idx] = patch[(ch * side + dy) * side + dx];
            }
        }
    }
}

fn finish(base: &SetBaseConfig, mask: Vec<f32>, pattern: Vec<f32>) -> Result<Trapdoor, TrapdoorError> {
    let t = Trapdoor {
        shape: base.shape,
        mask,
        pattern,
        kappa: base.kappa,
        target_label: base.target_label,
    };
    t.validate()?;
    Ok(t)
}

/// Per-label trapdoor sets plus the generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrapdoorRegistry {
    pub sets: BTreeMap<usize, TrapdoorSet>,
    pub seed: u64,
    pub mu_intensity: f32,
    pub sigma_intensity: f32,
}

impl TrapdoorRegistry {
    pub fn new(seed: u64, mu_intensity: f32, sigma_intensity: f32) -> Self {
        TrapdoorRegistry {
            sets: BTreeMap::new(),
            seed,
            mu_intensity,
            sigma_intensity,
        }
    }

    /// Insert a set, replacing any existing defense of the same label.
    pub fn insert(&mut self, set: TrapdoorSet) -> Result<(), TrapdoorError> {
        set.validate()?;
        self.sets.insert(set.target_label(), set);
        Ok(())
    }

    pub fn defended_labels(&self) -> Vec<usize> {
        self.sets.keys().copied().collect()
    }

    pub fn get(&self, label: usize) -> Option<&TrapdoorSet> {
        self.sets.get(&label)
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Single-label defense: one bottom-right noise square.
    pub fn single_label(
        shape: [usize; 3],
        label: usize,
        side: usize,
        kappa: f32,
        seed: u64,
    ) -> Result<Self, TrapdoorError> {
        let mut reg = TrapdoorRegistry::new(seed, 0.5, 0.5);
        let tseed = derive_seed(seed, "trapdoor", &format!("single:{label}"));
        reg.insert(TrapdoorSet::single(make_single_square(
            shape, side, kappa, label, tseed,
        )?))?;
        Ok(reg)
    }

    /// All-label defense: per label, five non-overlapping 3x3 squares with
    /// per-trapdoor intensity statistics drawn from the registry seed.
    /// Intensity means are kept high-contrast against mostly-dark inputs;
    /// with kappa << 1 a near-background mean yields an unlearnable trapdoor.
    pub fn all_labels(
        shape: [usize; 3],
        num_classes: usize,
        kappa: f32,
        seed: u64,
    ) -> Result<Self, TrapdoorError> {
        let mut reg = TrapdoorRegistry::new(seed, 0.8, 0.2);
        let mut meta_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "trapdoor", "intensity-params"));
        // squares stay disjoint across labels: overlapping trapdoors
        // interfere, dragging down both injection success and accuracy
        let mut occupied: Vec<(usize, usize)> = Vec::new();
        for label in 0..num_classes {
            // distinct mean/sigma per trapdoor, normalized pixel scale; the
            // wide sigma spreads square intensities across dark and bright
            // so every square keeps contrast against both background and
            // strokes after the kappa blend
            let mu: f32 = meta_rng.random_range(0.4..0.6);
            let sigma: f32 = meta_rng.random_range(0.4..0.55);
            let tseed = derive_seed(seed, "trapdoor", &format!("multi:{label}"));
            reg.insert(TrapdoorSet::single(make_multi_square_avoiding(
                shape, 5, 3, kappa, mu, sigma, label, tseed, &mut occupied,
            )?))?;
        }
        Ok(reg)
    }
}

/// Weighting of the trapdoor objective realized through dataset poisoning:
/// `injection_ratio` is the global poisoned-to-clean ratio, split evenly
/// across defended labels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub injection_ratio: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn standard(seed: u64) -> Self {
        TrainingConfig {
            injection_ratio: 0.5,
            epochs: 5,
            batch_size: 32,
            lr: 0.001,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrapdoorError> {
        if !(0.0 < self.injection_ratio && self.injection_ratio < 1.0) {
            return Err(TrapdoorError::Invalid(format!(
                "injection_ratio {} outside (0,1)",
                self.injection_ratio
            )));
        }
        Ok(())
    }
}

/// Augment `clean` with poisoned samples: per defended label t,
/// ceil(ratio * N / num_defended) samples drawn from inputs whose true label
/// differs from t, injected with a uniformly chosen member trapdoor and
/// relabeled to t. Clean samples are returned untouched.
pub fn poison_dataset(
    clean: &Dataset,
    registry: &TrapdoorRegistry,
    injection_ratio: f32,
) -> Result<Dataset, TrapdoorError> {
    if clean.is_empty() {
        return Err(TrapdoorError::Invalid("empty clean dataset".into()));
    }
    if registry.is_empty() {
        return Err(TrapdoorError::EmptyRegistry);
    }
    if !(0.0 < injection_ratio && injection_ratio < 1.0) {
        return Err(TrapdoorError::Invalid(format!(
            "injection_ratio {injection_ratio} outside (0,1)"
        )));
    }
    let labels = registry.defended_labels();
    let per_label =
        ((injection_ratio as f64 * clean.len() as f64) / labels.len() as f64).ceil() as usize;
    let per_label = per_label.max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(registry.seed, "trapdoor", "poison"));
    let mut poisoned = clean.clone();
    for &target in &labels {
        let set = registry.get(target).unwrap();
        let eligible: Vec<usize> = (0..clean.len())
            .filter(|&i| clean.labels[i] != target)
            .collect();
        if eligible.is_empty() {
            return Err(TrapdoorError::NoEligibleSamples(target));
        }
        let picks: Vec<usize> = (0..per_label)
            .map(|_| eligible[rng.random_range(0..eligible.len())])
            .collect();
        let base = clean.subset(&picks);
        // uniform member choice per poisoned sample
        let member: Vec<usize> = (0..per_label)
            .map(|_| rng.random_range(0..set.len()))
            .collect();
        let row: usize = base.inputs.shape()[1..].iter().product();
        let mut data = base.inputs.to_vec();
        for (i, &m) in member.iter().enumerate() {
            let img = Tensor::new(
                &base.inputs.shape()[1..],
                data[i * row..(i + 1) * row].to_vec(),
            )
            .unwrap();
            let injected = inject(&img, &set.trapdoors[m])?;
            data[i * row..(i + 1) * row].copy_from_slice(&injected.data());
        }
        let mut shape = vec![per_label];
        shape.extend_from_slice(&base.inputs.shape()[1..]);
        let block = Dataset::new(
            Tensor::new(&shape, data).unwrap(),
            vec![target; per_label],
            clean.num_classes,
        )?;
        poisoned = poisoned.concat(&block)?;
    }
    Ok(poisoned)
}

/// Train the joint objective (normal classification plus trapdoor mapping)
/// by cross-entropy over the poisoned dataset.
pub fn train_trapdoored(
    mut model: Model,
    clean: &Dataset,
    registry: &TrapdoorRegistry,
    config: &TrainingConfig,
) -> Result<(Model, TrainLog), TrapdoorError> {
    config.validate()?;
    if registry.is_empty() {
        return Err(TrapdoorError::EmptyRegistry);
    }
    let poisoned = poison_dataset(clean, registry, config.injection_ratio)?;
    let train_config = TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        optimizer: crate::optim::OptimizerConfig::adam(config.lr),
        seed: derive_seed(config.seed, "trapdoor", "train"),
    };
    let log = train(&mut model, &poisoned, &train_config)?;
    Ok((model, log))
}

/// Fraction of injected held-out inputs classified to the target, per
/// defended label. Inputs already of the target class are excluded; for
/// multi-trapdoor sets the rate is averaged over members.
pub fn injection_success_rate(
    model: &Model,
    test: &Dataset,
    registry: &TrapdoorRegistry,
) -> Result<BTreeMap<usize, f32>, TrapdoorError> {
    if registry.is_empty() {
        return Err(TrapdoorError::EmptyRegistry);
    }
    let mut rates = BTreeMap::new();
    for &target in &registry.defended_labels() {
        let set = registry.get(target).unwrap();
        let eligible = test.filter_label_ne(target);
        if eligible.is_empty() {
            return Err(TrapdoorError::NoEligibleSamples(target));
        }
        let mut hit = 0usize;
        let mut total = 0usize;
        for trapdoor in &set.trapdoors {
            let injected = inject(&eligible.inputs, trapdoor)?;
            let preds = model.predict(&injected)?;
            hit += preds.iter().filter(|&&p| p == target).count();
            total += preds.len();
        }
        rates.insert(target, hit as f32 / total as f32);
    }
    Ok(rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::synth_blobs;
    use crate::model::mlp_spec;

    const SHAPE: [usize; 3] = [1, 28, 28];

    #[test]
    fn inject_zero_mask_is_identity() {
        let t = Trapdoor {
            shape: [1, 2, 2],
            mask: vec![0.0; 4],
            pattern: vec![0.9; 4],
            kappa: 0.5,
            target_label: 0,
        };
        let x = Tensor::new(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(inject(&x, &t).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn inject_full_mask_returns_pattern() {
        let t = Trapdoor {
            shape: [1, 2, 2],
            mask: vec![1.0; 4],
            pattern: vec![0.7, 0.1, 0.5, 0.9],
            kappa: 1.0,
            target_label: 0,
        };
        let x = Tensor::new(&[1, 2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(inject(&x, &t).unwrap().to_vec(), t.pattern);
    }

    #[test]
    fn inject_blend_arithmetic() {
        // kappa=0.1, x=0.5, delta=1.0 -> 0.9*0.5 + 0.1*1.0 = 0.55
        let t = Trapdoor {
            shape: [1, 1, 1],
            mask: vec![0.1],
            pattern: vec![1.0],
            kappa: 0.1,
            target_label: 0,
        };
        let x = Tensor::new(&[1, 1, 1], vec![0.5]).unwrap();
        let out = inject(&x, &t).unwrap().to_vec()[0];
        assert!((out - 0.55).abs() < 1e-6);
    }

    #[test]
    fn inject_shape_mismatch() {
        let t = make_single_square(SHAPE, 6, 0.1, 0, 1).unwrap();
        let x = Tensor::zeros(&[1, 10, 10]);
        assert!(matches!(
            inject(&x, &t),
            Err(TrapdoorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn inject_geometric_convergence_toward_pattern() {
        // |inject^2(x) - delta| <= (1-kappa)^2 |x - delta| on masked pixels
        let t = make_single_square(SHAPE, 6, 0.3, 0, 5).unwrap();
        let x = Tensor::filled(&[1, 28, 28], 0.25);
        let once = inject(&x, &t).unwrap();
        let twice = inject(&once, &t).unwrap();
        let x0 = x.to_vec();
        let x2 = twice.to_vec();
        for i in 0..t.mask.len() {
            if t.mask[i] != 0.0 {
                let lhs = (x2[i] - t.pattern[i]).abs();
                let rhs = (1.0 - t.kappa).powi(2) * (x0[i] - t.pattern[i]).abs();
                assert!(lhs <= rhs + 1e-6, "pixel {i}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn single_square_masks_exactly_side_squared() {
        let t = make_single_square(SHAPE, 6, 0.1, 3, 7).unwrap();
        assert_eq!(t.masked_positions(), 36);
        // bottom-right corner masked, top-left untouched
        assert_eq!(t.mask[27 * 28 + 27], 0.1);
        assert_eq!(t.mask[0], 0.0);
    }

    #[test]
    fn single_square_full_width_masks_everything() {
        let t = make_single_square([1, 8, 8], 8, 0.2, 1, 9).unwrap();
        assert_eq!(t.masked_positions(), 64);
    }

    #[test]
    fn single_square_is_seed_deterministic() {
        let a = make_single_square(SHAPE, 6, 0.1, 2, 42).unwrap();
        let b = make_single_square(SHAPE, 6, 0.1, 2, 42).unwrap();
        assert_eq!(a.pattern, b.pattern);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn single_square_rejects_oversized_side() {
        assert!(make_single_square(SHAPE, 29, 0.1, 0, 1).is_err());
    }

    #[test]
    fn multi_square_masks_45_positions() {
        let t = make_multi_square(SHAPE, 5, 3, 0.1, 0.5, 0.2, 4, 11).unwrap();
        assert_eq!(t.masked_positions(), 45);
    }

    #[test]
    fn multi_square_sigma_zero_is_constant_intensity() {
        let t = make_multi_square(SHAPE, 5, 3, 0.1, 0.4, 0.0, 0, 13).unwrap();
        for i in 0..t.mask.len() {
            if t.mask[i] != 0.0 {
                assert_eq!(t.pattern[i], 0.4);
            }
        }
    }

    #[test]
    fn multi_square_distinct_seeds_distinct_locations() {
        // Probability of two independent draws of 5 squares landing
        // identically is vanishingly small; check over 100 seed pairs.
        let mut collisions = 0;
        for s in 0..100u64 {
            let a = make_multi_square(SHAPE, 5, 3, 0.1, 0.5, 0.1, 0, s).unwrap();
            let b = make_multi_square(SHAPE, 5, 3, 0.1, 0.5, 0.1, 0, 1000 + s).unwrap();
            if a.mask == b.mask {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn multi_square_impossible_placement_errors() {
        // 10 non-overlapping 3x3 squares cannot fit in a 4x4 image
        let err = make_multi_square([1, 4, 4], 10, 3, 0.1, 0.5, 0.0, 0, 1).unwrap_err();
        assert!(matches!(err, TrapdoorError::PlacementFailed { .. }));
    }

    #[test]
    fn trapdoor_set_locations_variant() {
        let base = SetBaseConfig {
            shape: SHAPE,
            side: 6,
            kappa: 0.1,
            target_label: 5,
        };
        let set = make_trapdoor_set(&base, 2, SetVariant::Locations, 3).unwrap();
        assert_eq!(set.len(), 2);
        let (a, b) = (&set.trapdoors[0], &set.trapdoors[1]);
        // disjoint masks
        assert!(a
            .mask
            .iter()
            .zip(&b.mask)
            .all(|(&x, &y)| x == 0.0 || y == 0.0));
        // identical pattern content modulo location
        let nonzero = |t: &Trapdoor| -> Vec<f32> {
            t.mask
                .iter()
                .zip(&t.pattern)
                .filter(|(&m, _)| m != 0.0)
                .map(|(_, &p)| p)
                .collect()
        };
        assert_eq!(nonzero(a), nonzero(b));
    }

    #[test]
    fn trapdoor_set_singleton_equals_base() {
        let base = SetBaseConfig {
            shape: SHAPE,
            side: 6,
            kappa: 0.1,
            target_label: 1,
        };
        let set = make_trapdoor_set(&base, 1, SetVariant::Locations, 8).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.trapdoors[0].masked_positions(), 36);
        // canonical bottom-right placement
        assert_eq!(set.trapdoors[0].mask[27 * 28 + 27], 0.1);
    }

    #[test]
    fn trapdoor_set_intensities_variant() {
        let base = SetBaseConfig {
            shape: SHAPE,
            side: 6,
            kappa: 0.1,
            target_label: 0,
        };
        let set = make_trapdoor_set(&base, 3, SetVariant::Intensities, 21).unwrap();
        let masks: Vec<&Vec<f32>> = set.trapdoors.iter().map(|t| &t.mask).collect();
        assert_eq!(masks[0], masks[1]);
        assert_eq!(masks[1], masks[2]);
        let intensity =
            |t: &Trapdoor| t.pattern[27 * 28 + 27];
        let (i0, i1, i2) = (
            intensity(&set.trapdoors[0]),
            intensity(&set.trapdoors[1]),
            intensity(&set.trapdoors[2]),
        );
        assert!(i0 != i1 && i1 != i2 && i0 != i2);
    }

    fn image_blobs(n: usize, seed: u64) -> Dataset {
        // blobs reshaped into small images so square trapdoors apply
        let d = synth_blobs(4, 16, n, seed).unwrap();
        Dataset::new(
            d.inputs.reshape(&[d.len(), 1, 4, 4]).unwrap(),
            d.labels.clone(),
            4,
        )
        .unwrap()
    }

    #[test]
    fn poison_counts_single_label() {
        // ratio 0.5, 100 clean, one defended label -> 150 total
        let clean = image_blobs(25, 3);
        let reg = TrapdoorRegistry::single_label([1, 4, 4], 0, 2, 0.1, 77).unwrap();
        let poisoned = poison_dataset(&clean, &reg, 0.5).unwrap();
        assert_eq!(poisoned.len(), 150);
        assert_eq!(clean.len(), 100);
    }

    #[test]
    fn poison_tiny_ratio_still_poisons_one() {
        let clean = image_blobs(3, 4); // 12 samples
        let reg = TrapdoorRegistry::single_label([1, 4, 4], 1, 2, 0.1, 5).unwrap();
        let poisoned = poison_dataset(&clean, &reg, 0.01).unwrap();
        assert_eq!(poisoned.len(), 13);
    }

    #[test]
    fn poison_keeps_clean_prefix_untouched_and_labels_target() {
        let clean = image_blobs(10, 6);
        let reg = TrapdoorRegistry::single_label([1, 4, 4], 2, 2, 0.1, 9).unwrap();
        let poisoned = poison_dataset(&clean, &reg, 0.25).unwrap();
        let n = clean.len();
        assert_eq!(poisoned.inputs.to_vec()[..n * 16], clean.inputs.to_vec()[..]);
        assert_eq!(poisoned.labels[..n], clean.labels[..]);
        for &l in &poisoned.labels[n..] {
            assert_eq!(l, 2);
        }
    }

    #[test]
    fn poison_split_across_defended_labels() {
        let clean = image_blobs(25, 8); // 100 samples
        let mut reg = TrapdoorRegistry::new(3, 0.5, 0.2);
        for label in 0..4 {
            reg.insert(TrapdoorSet::single(
                make_single_square([1, 4, 4], 2, 0.1, label, label as u64).unwrap(),
            ))
            .unwrap();
        }
        let poisoned = poison_dataset(&clean, &reg, 0.5).unwrap();
        // ceil(0.5 * 100 / 4) = 13 per label
        assert_eq!(poisoned.len(), 100 + 4 * 13);
    }

    #[test]
    fn untrained_injection_success_is_chance() {
        let clean = image_blobs(30, 10);
        let reg = TrapdoorRegistry::single_label([1, 4, 4], 0, 2, 0.1, 15).unwrap();
        let model = Model::build(mlp_spec(16, &[12], 4), 31).unwrap();
        let model = Model {
            spec: {
                let mut s = model.spec.clone();
                s.input_shape = [1, 4, 4];
                s
            },
            params: model.params,
            trained_epochs: 0,
        };
        let rates = injection_success_rate(&model, &clean, &reg).unwrap();
        let r = rates[&0];
        assert!(r < 0.8, "untrained model should not track the trapdoor, got {r}");
    }

    #[test]
    fn injection_excludes_target_class_samples() {
        let clean = image_blobs(10, 12);
        let reg = TrapdoorRegistry::single_label([1, 4, 4], 3, 2, 0.1, 2).unwrap();
        // all-target dataset has no eligible samples
        let only_target: Vec<usize> = (0..clean.len())
            .filter(|&i| clean.labels[i] == 3)
            .collect();
        let target_only = clean.subset(&only_target);
        assert!(matches!(
            injection_success_rate(
                &Model::build(
                    {
                        let mut s = mlp_spec(16, &[8], 4);
                        s.input_shape = [1, 4, 4];
                        s
                    },
                    1
                )
                .unwrap(),
                &target_only,
                &reg
            ),
            Err(TrapdoorError::NoEligibleSamples(3))
        ));
    }
}
