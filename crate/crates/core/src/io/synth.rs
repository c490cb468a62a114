//! Seeded synthetic datasets.
//!
//! `synth_blobs` gives fast separable point clouds for property tests.
//! `synth_digits` renders a 10-class 28x28 grayscale digit dataset in MNIST
//! layout: stroke glyphs with random affine jitter, thickness variation, and
//! pixel noise. It is the desk-scale stand-in used when no IDX files are
//! available.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{Dataset, ModelError};
use crate::tensor::Tensor;

/// Gaussian class clusters in [0,1]^dim, labels balanced, order shuffled.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset, ModelError> {
    if dim < 2 {
        return Err(ModelError::InvalidDataset(
            "synth_blobs needs dim >= 2".into(),
        ));
    }
    if num_classes == 0 || n_per_class == 0 {
        return Err(ModelError::InvalidDataset(
            "synth_blobs needs at least one class and one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.04f32;
    // Means kept >= 5 sigma apart so the classes are separable by design.
    let min_sep = 5.0 * sigma;
    let mut means: Vec<Vec<f32>> = Vec::with_capacity(num_classes);
    'outer: for _ in 0..num_classes {
        for _ in 0..10_000 {
            let cand: Vec<f32> = (0..dim).map(|_| rng.random_range(0.15..0.85)).collect();
            let ok = means.iter().all(|m| {
                let d2: f32 = m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_sep
            });
            if ok {
                means.push(cand);
                continue 'outer;
            }
        }
        return Err(ModelError::InvalidDataset(format!(
            "could not place {num_classes} separated clusters in {dim} dims"
        )));
    }
    let normal = Normal::new(0.0f32, sigma).unwrap();
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for _ in 0..n_per_class {
            for d in 0..dim {
                data.push((means[c][d] + normal.sample(&mut rng)).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut sdata = Vec::with_capacity(n * dim);
    let mut slabels = Vec::with_capacity(n);
    for &i in &order {
        sdata.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        slabels.push(labels[i]);
    }
    Dataset::new(
        Tensor::new(&[n, 1, 1, dim], sdata).unwrap(),
        slabels,
        num_classes,
    )
}

const IMG: usize = 28;

/// Balanced 10-class stroke-digit dataset, shape [n, 1, 28, 28].
pub fn synth_digits(n: usize, seed: u64) -> Result<Dataset, ModelError> {
    if n == 0 {
        return Err(ModelError::InvalidDataset("synth_digits needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glyphs = glyph_table();
    let noise = Normal::new(0.0f32, 0.06).unwrap();
    let mut data = Vec::with_capacity(n * IMG * IMG);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let img = render_digit(&glyphs[class], &mut rng, &noise);
        data.extend_from_slice(&img);
        labels.push(class);
    }
    // balanced by construction; shuffle presentation order
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut sdata = Vec::with_capacity(n * IMG * IMG);
    let mut slabels = Vec::with_capacity(n);
    for &i in &order {
        sdata.extend_from_slice(&data[i * IMG * IMG..(i + 1) * IMG * IMG]);
        slabels.push(labels[i]);
    }
    Dataset::new(
        Tensor::new(&[n, 1, IMG, IMG], sdata).unwrap(),
        slabels,
        10,
    )
}

type Polyline = Vec<(f32, f32)>;

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, a0: f32, a1: f32, steps: usize) -> Polyline {
    (0..=steps)
        .map(|i| {
            let t = a0 + (a1 - a0) * i as f32 / steps as f32;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeletons for the ten digit classes in unit coordinates
/// (x right, y down).
fn glyph_table() -> Vec<Vec<Polyline>> {
    use std::f32::consts::PI;
    vec![
        // 0
        vec![arc(0.5, 0.5, 0.26, 0.38, 0.0, 2.0 * PI, 24)],
        // 1
        vec![vec![(0.34, 0.28), (0.54, 0.10), (0.54, 0.90)]],
        // 2
        vec![{
            let mut p = arc(0.5, 0.30, 0.24, 0.22, PI, 2.0 * PI, 12);
            p.push((0.26, 0.88));
            p.push((0.78, 0.88));
            p
        }],
        // 3
        vec![
            arc(0.46, 0.30, 0.24, 0.21, 0.75 * PI, 2.25 * PI, 12),
            arc(0.46, 0.70, 0.26, 0.22, 1.75 * PI, 3.25 * PI, 12),
        ],
        // 4
        vec![
            vec![(0.62, 0.10), (0.24, 0.62), (0.82, 0.62)],
            vec![(0.62, 0.34), (0.62, 0.92)],
        ],
        // 5
        vec![{
            let mut p = vec![(0.76, 0.12), (0.32, 0.12), (0.30, 0.48)];
            p.extend(arc(0.48, 0.66, 0.26, 0.23, 1.35 * PI, 2.85 * PI, 12));
            p
        }],
        // 6
        vec![{
            let mut p = vec![(0.66, 0.10), (0.38, 0.42)];
            p.extend(arc(0.50, 0.68, 0.22, 0.23, 1.1 * PI, 3.1 * PI, 16));
            p
        }],
        // 7 (with crossbar)
        vec![
            vec![(0.24, 0.14), (0.78, 0.14), (0.44, 0.90)],
            vec![(0.36, 0.52), (0.68, 0.52)],
        ],
        // 8
        vec![
            arc(0.5, 0.30, 0.20, 0.18, 0.0, 2.0 * PI, 16),
            arc(0.5, 0.68, 0.24, 0.21, 0.0, 2.0 * PI, 16),
        ],
        // 9
        vec![{
            let mut p = arc(0.52, 0.32, 0.22, 0.21, -0.1 * PI, 1.9 * PI, 16);
            p.push((0.73, 0.34));
            p.push((0.62, 0.90));
            p
        }],
    ]
}

fn render_digit(glyph: &[Polyline], rng: &mut ChaCha8Rng, noise: &Normal<f32>) -> Vec<f32> {
    // Random affine jitter: rotation, anisotropic scale, translation.
    let angle = rng.random_range(-0.38f32..0.38);
    let sx = rng.random_range(0.62f32..1.20);
    let sy = rng.random_range(0.62f32..1.20);
    let tx = rng.random_range(-0.12f32..0.12);
    let ty = rng.random_range(-0.12f32..0.12);
    let shear = rng.random_range(-0.28f32..0.28);
    let thickness = rng.random_range(0.030f32..0.072);
    let brightness = rng.random_range(0.7f32..1.0);
    let (cosa, sina) = (angle.cos(), angle.sin());
    let transform = |(x, y): (f32, f32)| {
        let (cx, cy) = (x - 0.5, y - 0.5);
        let cx = cx + shear * cy;
        let (rx, ry) = (cx * cosa - cy * sina, cx * sina + cy * cosa);
        (rx * sx + 0.5 + tx, ry * sy + 0.5 + ty)
    };
    let strokes: Vec<Polyline> = glyph
        .iter()
        .map(|p| p.iter().map(|&pt| transform(pt)).collect())
        .collect();

    let mut img = vec![0.0f32; IMG * IMG];
    for py in 0..IMG {
        for px in 0..IMG {
            let x = (px as f32 + 0.5) / IMG as f32;
            let y = (py as f32 + 0.5) / IMG as f32;
            let mut d = f32::INFINITY;
            for poly in &strokes {
                for seg in poly.windows(2) {
                    d = d.min(dist_to_segment((x, y), seg[0], seg[1]));
                }
            }
            // smooth falloff from stroke center
            let v = 1.0 - ((d - thickness * 0.45) / (thickness * 0.55)).clamp(0.0, 1.0);
            let v = v * v * (3.0 - 2.0 * v);
            img[py * IMG + px] = brightness * v;
        }
    }
    // distractor scratches on half the images keep per-class features from
    // collapsing onto one mode
    if rng.random::<bool>() {
        let count = rng.random_range(1..=2);
        for _ in 0..count {
            let a = (rng.random_range(0.05f32..0.95), rng.random_range(0.05f32..0.95));
            let b = (
                (a.0 + rng.random_range(-0.35f32..0.35)).clamp(0.0, 1.0),
                (a.1 + rng.random_range(-0.35f32..0.35)).clamp(0.0, 1.0),
            );
            let th = rng.random_range(0.018f32..0.034);
            let intensity = rng.random_range(0.3f32..0.7);
            for py in 0..IMG {
                for px in 0..IMG {
                    let x = (px as f32 + 0.5) / IMG as f32;
                    let y = (py as f32 + 0.5) / IMG as f32;
                    let d = dist_to_segment((x, y), a, b);
                    let v = 1.0 - ((d - th * 0.45) / (th * 0.55)).clamp(0.0, 1.0);
                    let v = intensity * v * v * (3.0 - 2.0 * v);
                    let cell = &mut img[py * IMG + px];
                    *cell = cell.max(v);
                }
            }
        }
    }
    for v in &mut img {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

fn dist_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - (a.0 + t * abx), p.1 - (a.1 + t * aby));
    (dx * dx + dy * dy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(3, 4, 10, 42).unwrap();
        let b = synth_blobs(3, 4, 10, 42).unwrap();
        assert_eq!(a.inputs.to_vec(), b.inputs.to_vec());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn blobs_single_sample_per_class() {
        let d = synth_blobs(4, 2, 1, 7).unwrap();
        assert_eq!(d.len(), 4);
        let mut sorted = d.labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn blobs_reject_dim_one() {
        assert!(synth_blobs(2, 1, 5, 1).is_err());
    }

    #[test]
    fn digits_are_deterministic_and_balanced() {
        let a = synth_digits(50, 9).unwrap();
        let b = synth_digits(50, 9).unwrap();
        assert_eq!(a.inputs.to_vec(), b.inputs.to_vec());
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [5; 10]);
    }

    #[test]
    fn digits_are_proper_images() {
        let d = synth_digits(20, 3).unwrap();
        assert_eq!(d.inputs.shape(), &[20, 1, 28, 28]);
        let data = d.inputs.to_vec();
        assert!(data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // strokes exist: a good share of bright pixels per image
        let bright = data.iter().filter(|&&v| v > 0.5).count();
        assert!(bright > 20 * 30, "expected visible strokes, got {bright}");
    }
}
