//! Datasets (CIFAR binary, raw directories, synthetic shapes), the training
//! augmentation pipeline, mixup, and the perspective perturbation used for
//! robustness evaluation.

mod augment;
mod perspective;
mod synthetic;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, hflip, mixup, mixup_with, random_erasing, AugmentationPipeline, MixedBatch, Rect, Transform};
pub use perspective::{perspective_perturb, sample_perspective, warp_perspective, Perspective};
pub use synthetic::{generate_synthetic, nearest_centroid_accuracy, SyntheticSpec};

use crate::error::{Error, Result};
use crate::vit::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Uniformly sized 8-bit images stored HWC, with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub split: Split,
    pixels: Vec<u8>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        split: Split,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::DatasetFormat(format!(
                "{} bytes for {} images of {height}x{width}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::DatasetFormat(format!("label {bad} >= class count {num_classes}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            num_classes,
            split,
            pixels,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_bytes()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn image_bytes(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Errors once labels have been stripped.
    pub fn label(&self, i: usize) -> Result<usize> {
        match &self.labels {
            Some(l) => Ok(l[i]),
            None => Err(Error::InvalidArgument("labels were withheld from this dataset".into())),
        }
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("labels were withheld from this dataset".into()))
    }

    /// Pixels scaled to `[0, 1]`; label attached when available.
    pub fn image(&self, i: usize) -> Image {
        let pixels = self.raw(i).iter().map(|&b| f32::from(b) / 255.0).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
            label: self.labels.as_ref().map(|l| l[i]),
        }
    }

    /// The same images with no way to read their labels.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_bytes());
        for &i in indices {
            pixels.extend_from_slice(self.raw(i));
        }
        Self {
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            ..self.clone()
        }
    }

    /// Class-stratified random subset keeping `round(fraction · class size)`
    /// of each class (at least one), in original order.
    pub fn stratified_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
        }
        let labels = self.labels()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            members.shuffle(&mut rng);
            let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
            keep.extend_from_slice(&members[..k]);
        }
        keep.sort_unstable();
        Ok(self.subset(&keep))
    }

    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::DatasetFormat("no datasets to join".into()))?;
        let mut out = first.clone();
        for d in &parts[1..] {
            if (d.height, d.width, d.channels, d.num_classes) != (out.height, out.width, out.channels, out.num_classes) {
                return Err(Error::DatasetFormat("datasets differ in geometry or class count".into()));
            }
            out.pixels.extend_from_slice(&d.pixels);
            match (&mut out.labels, &d.labels) {
                (Some(a), Some(b)) => a.extend_from_slice(b),
                _ => out.labels = None,
            }
        }
        Ok(out)
    }
}

/// Record layouts of the CIFAR binary distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarLayout {
    /// 1 label byte + 3072 pixel bytes.
    Cifar10,
    /// coarse label byte, fine label byte, 3072 pixel bytes; the fine label is used.
    Cifar100,
}

impl CifarLayout {
    pub fn record_size(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 3073,
            CifarLayout::Cifar100 => 3074,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100 => 100,
        }
    }
}

/// Parses CIFAR records (label bytes, then R, G, B planes of 32x32).
pub fn parse_cifar(bytes: &[u8], layout: CifarLayout, split: Split) -> Result<Dataset> {
    let rec = layout.record_size();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::DatasetFormat(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let count = bytes.len() / rec;
    let head = rec - 3072;
    let mut pixels = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for record in bytes.chunks_exact(rec) {
        let label = usize::from(record[head - 1]);
        if label >= layout.num_classes() {
            return Err(Error::DatasetFormat(format!(
                "label byte {label} >= class count {}",
                layout.num_classes()
            )));
        }
        labels.push(label);
        let planes = &record[head..];
        for p in 0..1024 {
            for c in 0..3 {
                pixels.push(planes[c * 1024 + p]);
            }
        }
    }
    Dataset::new(32, 32, 3, layout.num_classes(), split, pixels, labels)
}

pub fn load_cifar_binary(path: &Path, layout: CifarLayout, split: Split) -> Result<Dataset> {
    parse_cifar(&fs::read(path)?, layout, split)
}

/// Loads a raw image directory:
/// `header.txt` holds `height width channels num_classes`,
/// `labels.txt` one class index per line, and image `i` is `{i:05}.raw`
/// with one 8-bit plane per channel.
pub fn load_raw_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let header = fs::read_to_string(dir.join("header.txt"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::DatasetFormat(format!("header.txt: {e}")))?;
    let [h, w, c, k] = dims[..] else {
        return Err(Error::DatasetFormat("header.txt needs height width channels num_classes".into()));
    };
    let labels: Vec<usize> = fs::read_to_string(dir.join("labels.txt"))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::DatasetFormat(format!("labels.txt: {e}")))?;
    let plane = h * w;
    let mut pixels = Vec::with_capacity(labels.len() * plane * c);
    for i in 0..labels.len() {
        let raw = fs::read(dir.join(format!("{i:05}.raw")))?;
        if raw.len() != plane * c {
            return Err(Error::DatasetFormat(format!("image {i}: {} bytes, expected {}", raw.len(), plane * c)));
        }
        for p in 0..plane {
            for ch in 0..c {
                pixels.push(raw[ch * plane + p]);
            }
        }
    }
    Dataset::new(h, w, c, k, split, pixels, labels)
}

/// Quantizes a `[0, 1]` image to bytes.
pub fn to_bytes(image: &Image) -> Vec<u8> {
    image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
