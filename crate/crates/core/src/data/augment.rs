use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::perspective::{sample_bilinear, Border};
use crate::error::{Error, Result};
use crate::vit::Image;

/// One stage of the training augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Crop of random area fraction and aspect ratio, resized back to the input size.
    RandomResizedCrop { scale: (f64, f64), ratio: (f64, f64) },
    HorizontalFlip { p: f64 },
    /// `n` ops drawn with replacement from brightness, contrast, rotate,
    /// translate and posterize, each applied with probability `p` at a
    /// magnitude drawn from `N(magnitude, magnitude_std)` on a 0..10 scale.
    RandAugment { n: usize, magnitude: f64, magnitude_std: f64, p: f64 },
    /// Fills one random rectangle with uniform per-pixel noise.
    RandomErasing { p: f64, area: (f64, f64), aspect: (f64, f64) },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPipeline {
    pub transforms: Vec<Transform>,
}

impl AugmentationPipeline {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Crop (0.08, 1) x (3/4, 4/3), flip 0.5, RandAugment n=2 m=9 std 0.5,
    /// erasing 0.25.
    pub fn standard() -> Self {
        Self {
            transforms: vec![
                Transform::RandomResizedCrop {
                    scale: (0.08, 1.0),
                    ratio: (0.75, 4.0 / 3.0),
                },
                Transform::HorizontalFlip { p: 0.5 },
                Transform::RandAugment {
                    n: 2,
                    magnitude: 9.0,
                    magnitude_std: 0.5,
                    p: 0.5,
                },
                Transform::RandomErasing {
                    p: 0.25,
                    area: (0.02, 1.0 / 3.0),
                    aspect: (0.3, 1.0 / 0.3),
                },
            ],
        }
    }
}

/// Applies the pipeline in order; output has the input's dimensions and
/// stays in `[0, 1]`.
pub fn augment<R: Rng>(image: &Image, pipeline: &AugmentationPipeline, rng: &mut R) -> Image {
    let mut img = image.clone();
    for t in &pipeline.transforms {
        img = match *t {
            Transform::RandomResizedCrop { scale, ratio } => random_resized_crop(&img, scale, ratio, rng),
            Transform::HorizontalFlip { p } => {
                if rng.gen::<f64>() < p {
                    hflip(&img)
                } else {
                    img
                }
            }
            Transform::RandAugment {
                n,
                magnitude,
                magnitude_std,
                p,
            } => rand_augment(&img, n, magnitude, magnitude_std, p, rng),
            Transform::RandomErasing { p, area, aspect } => {
                if rng.gen::<f64>() < p {
                    random_erasing(&mut img, area, aspect, rng);
                }
                img
            }
        };
    }
    img
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.at(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

/// Bilinear resize of the `ch x cw` window at `(top, left)` to the full frame.
fn resize_window(img: &Image, top: f64, left: f64, ch: f64, cw: f64) -> Image {
    let mut out = Image::zeros(img.height, img.width, img.channels);
    out.label = img.label;
    let sy = ch / img.height as f64;
    let sx = cw / img.width as f64;
    for y in 0..img.height {
        let v = top + (y as f64 + 0.5) * sy - 0.5;
        for x in 0..img.width {
            let u = left + (x as f64 + 0.5) * sx - 0.5;
            for c in 0..img.channels {
                out.set(y, x, c, sample_bilinear(img, u, v, c, Border::Clamp).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

fn random_resized_crop<R: Rng>(img: &Image, scale: (f64, f64), ratio: (f64, f64), rng: &mut R) -> Image {
    let (h, w) = (img.height as f64, img.width as f64);
    let area = h * w;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=(h - ch) as usize) as f64;
            let left = rng.gen_range(0..=(w - cw) as usize) as f64;
            return resize_window(img, top, left, ch, cw);
        }
    }
    // fall back to a centered crop at the clamped aspect ratio
    let in_ratio = w / h;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, (w / ratio.0).round())
    } else if in_ratio > ratio.1 {
        ((h * ratio.1).round(), h)
    } else {
        (w, h)
    };
    resize_window(img, ((h - ch) / 2.0).floor(), ((w - cw) / 2.0).floor(), ch, cw)
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Fills one rectangle of area fraction within `area` and aspect within
/// `aspect` with uniform noise; `None` when no draw fits in 10 attempts.
pub fn random_erasing<R: Rng>(img: &mut Image, area: (f64, f64), aspect: (f64, f64), rng: &mut R) -> Option<Rect> {
    let total = (img.height * img.width) as f64;
    let (la, lb) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..10 {
        let target = total * rng.gen_range(area.0..=area.1);
        let ar = rng.gen_range(la..=lb).exp();
        let h = (target * ar).sqrt().round() as usize;
        let w = (target / ar).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= img.height || w >= img.width {
            continue;
        }
        let top = rng.gen_range(0..=img.height - h);
        let left = rng.gen_range(0..=img.width - w);
        for y in top..top + h {
            for x in left..left + w {
                for c in 0..img.channels {
                    img.set(y, x, c, rng.gen::<f32>());
                }
            }
        }
        return Some(Rect {
            top,
            left,
            height: h,
            width: w,
        });
    }
    None
}

#[derive(Clone, Copy, Debug)]
enum RandOp {
    Brightness,
    Contrast,
    Rotate,
    Translate,
    Posterize,
}

const RAND_OPS: [RandOp; 5] = [
    RandOp::Brightness,
    RandOp::Contrast,
    RandOp::Rotate,
    RandOp::Translate,
    RandOp::Posterize,
];

/// Samples at `(u, v) = f(x, y)` with a grey fill outside the frame.
fn remap(img: &Image, f: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut out = img.clone();
    let (w, h) = (img.width as f64, img.height as f64);
    for y in 0..img.height {
        for x in 0..img.width {
            let (u, v) = f(x as f64, y as f64);
            let outside = u < -0.5 || v < -0.5 || u > w - 0.5 || v > h - 0.5;
            for c in 0..img.channels {
                let val = if outside {
                    0.5
                } else {
                    sample_bilinear(img, u, v, c, Border::Clamp)
                };
                out.set(y, x, c, val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

fn apply_rand_op<R: Rng>(img: &Image, op: RandOp, level: f64, rng: &mut R) -> Image {
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let frac = level / 10.0;
    match op {
        RandOp::Brightness => {
            let f = 1.0 + sign * 0.9 * frac;
            let mut out = img.clone();
            out.pixels.iter_mut().for_each(|p| *p = (*p as f64 * f).clamp(0.0, 1.0) as f32);
            out
        }
        RandOp::Contrast => {
            let f = 1.0 + sign * 0.9 * frac;
            let mean = img.pixels.iter().map(|&p| p as f64).sum::<f64>() / img.pixels.len() as f64;
            let mut out = img.clone();
            out.pixels
                .iter_mut()
                .for_each(|p| *p = (mean + (*p as f64 - mean) * f).clamp(0.0, 1.0) as f32);
            out
        }
        RandOp::Rotate => {
            let angle = (sign * 30.0 * frac).to_radians();
            let (s, c) = angle.sin_cos();
            let cx = (img.width as f64 - 1.0) / 2.0;
            let cy = (img.height as f64 - 1.0) / 2.0;
            remap(img, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx + s * dy, cy - s * dx + c * dy)
            })
        }
        RandOp::Translate => {
            let shift = sign * 0.45 * frac;
            if rng.gen::<bool>() {
                let d = shift * img.width as f64;
                remap(img, |x, y| (x - d, y))
            } else {
                let d = shift * img.height as f64;
                remap(img, |x, y| (x, y - d))
            }
        }
        RandOp::Posterize => {
            let bits = 4 - ((frac * 4.0) as i32).min(4);
            let levels = f64::from(1u32 << bits.max(0));
            let mut out = img.clone();
            out.pixels.iter_mut().for_each(|p| {
                let byte = (*p as f64 * 255.0).round();
                let kept = (byte / 256.0 * levels).floor() * (256.0 / levels);
                *p = (kept / 255.0).clamp(0.0, 1.0) as f32;
            });
            out
        }
    }
}

fn rand_augment<R: Rng>(img: &Image, n: usize, magnitude: f64, std: f64, p: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    for _ in 0..n {
        let op = *RAND_OPS.choose(rng).expect("op list is not empty");
        if rng.gen::<f64>() >= p {
            continue;
        }
        let level = if std > 0.0 {
            Normal::new(magnitude, std).expect("positive std").sample(rng)
        } else {
            magnitude
        };
        out = apply_rand_op(&out, op, level.clamp(0.0, 10.0), rng);
    }
    out
}

/// A mixed batch: `targets` is `[B, K]` row-major soft labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<Image>,
    pub targets: Vec<f64>,
    pub lambda: f64,
    /// Sample `i` was mixed with sample `pairing[i]`.
    pub pairing: Vec<usize>,
}

/// `λ·a + (1 − λ)·b` for pixels and one-hot labels against `pairing`.
pub fn mixup_with(images: &[Image], labels: &[usize], num_classes: usize, lambda: f64, pairing: &[usize]) -> Result<MixedBatch> {
    let b = images.len();
    if labels.len() != b || pairing.len() != b || pairing.iter().any(|&j| j >= b) {
        return Err(Error::InvalidArgument("mixup batch, labels and pairing differ in length".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup weight {lambda} not in [0, 1]")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let mut mixed = Vec::with_capacity(b);
    let mut targets = vec![0.0; b * num_classes];
    for i in 0..b {
        let (x, y) = (&images[i], &images[pairing[i]]);
        if x.pixels.len() != y.pixels.len() {
            return Err(Error::InvalidArgument("mixup images differ in size".into()));
        }
        let mut img = x.clone();
        if lambda < 1.0 {
            for (p, &q) in img.pixels.iter_mut().zip(&y.pixels) {
                *p = (lambda * *p as f64 + (1.0 - lambda) * q as f64) as f32;
            }
        }
        mixed.push(img);
        targets[i * num_classes + labels[i]] += lambda;
        targets[i * num_classes + labels[pairing[i]]] += 1.0 - lambda;
    }
    Ok(MixedBatch {
        images: mixed,
        targets,
        lambda,
        pairing: pairing.to_vec(),
    })
}

/// Batch-mode mixup: one `λ ~ Beta(alpha, alpha)` and a random pairing.
pub fn mixup<R: Rng>(images: &[Image], labels: &[usize], num_classes: usize, alpha: f64, rng: &mut R) -> Result<MixedBatch> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("mixup alpha {alpha} must be positive")));
    }
    if images.len() < 2 {
        return Err(Error::InvalidArgument("mixup needs at least two samples".into()));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .sample(rng);
    let mut pairing: Vec<usize> = (0..images.len()).collect();
    pairing.shuffle(rng);
    mixup_with(images, labels, num_classes, lambda, &pairing)
}
