use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{to_bytes, Dataset, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, tag};
use crate::vit::Image;

/// Class-conditioned shape images: the class picks the silhouette, while
/// position, size, colors and noise are random.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Std of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 200,
            image_size: 32,
            noise: 0.08,
            seed: 0,
        }
    }
}

const SHAPES: usize = 8;

/// Membership test in shape-local coordinates scaled so the shape spans `[-1, 1]`.
fn inside(shape: usize, x: f64, y: f64) -> bool {
    let (ax, ay) = (x.abs(), y.abs());
    match shape {
        0 => ax.max(ay) <= 0.85,
        1 => x * x + y * y <= 1.0,
        2 => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
        3 => (-0.9..=0.8).contains(&y) && ax <= (y + 0.9) / 1.7,
        4 => (0.3..=1.0).contains(&(x * x + y * y)),
        5 => ax + ay <= 1.0,
        6 => ax <= 1.0 && (0.3..=0.8).contains(&ay),
        _ => (ax - ay).abs() <= 0.3 && ax.max(ay) <= 1.0,
    }
}

fn render(class: usize, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let shape = class % SHAPES;
    // classes beyond the base shapes reuse them rotated
    let angle = (class / SHAPES) as f64 * 0.4;
    let (sin, cos) = angle.sin_cos();
    let cx = rng.gen_range(0.3..0.7) * s;
    let cy = rng.gen_range(0.3..0.7) * s;
    let r = rng.gen_range(0.18..0.32) * s;
    // foreground tends brighter than background so class means differ by silhouette
    let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.4..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.6));
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut img = Image::zeros(size, size, 3);
    for py in 0..size {
        for px in 0..size {
            let dx = (px as f64 + 0.5 - cx) / r;
            let dy = (py as f64 + 0.5 - cy) / r;
            let (lx, ly) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let color = if inside(shape, lx, ly) { &fg } else { &bg };
            for c in 0..3 {
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                img.set(py, px, c, (color[c] + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Renders `classes × per_class` images, class-major; every image has its
/// own stream derived from `(seed, split, class, index)`.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.image_size < 4 || !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate synthetic spec {spec:?}")));
    }
    let split_tag = tag(match split {
        Split::Train => "train",
        Split::Test => "test",
    });
    let size = spec.image_size;
    let mut pixels = Vec::with_capacity(spec.classes * spec.per_class * size * size * 3);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[split_tag, class as u64, i as u64]));
            pixels.extend(to_bytes(&render(class, size, spec.noise, &mut rng)));
            labels.push(class);
        }
    }
    Dataset::new(size, size, 3, spec.classes, split, pixels, labels)
}

/// Accuracy on `test` of classifying raw pixels by the nearest class mean of `train`.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> Result<f64> {
    let dim = train.height * train.width * train.channels;
    let labels = train.labels()?;
    let mut sums = vec![vec![0.0f64; dim]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &b) in sums[l].iter_mut().zip(train.raw(i)) {
            *s += f64::from(b);
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let test_labels = test.labels()?;
    let mut correct = 0;
    for (i, &truth) in test_labels.iter().enumerate() {
        let x = test.raw(i);
        let best = (0..train.num_classes)
            .filter(|&k| counts[k] > 0)
            .min_by(|&a, &b| {
                let da: f64 = sums[a].iter().zip(x).map(|(m, &v)| (m - f64::from(v)).powi(2)).sum();
                let db: f64 = sums[b].iter().zip(x).map(|(m, &v)| (m - f64::from(v)).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap_or(0);
        correct += usize::from(best == truth);
    }
    Ok(correct as f64 / test_labels.len().max(1) as f64)
}
