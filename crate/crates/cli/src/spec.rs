use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ssat_core::data::{
    generate_synthetic, load_cifar_binary, load_raw_dir, AugmentationPipeline, CifarLayout, Dataset, Split,
    SyntheticSpec, Transform,
};
use ssat_core::diag::{DiagConfig, SpectrumConfig};
use ssat_core::train::{Mode, ModelConfigs, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Cifar10,
    Cifar100,
    /// Directory with `header.txt`, `labels.txt` and planar `.raw` images.
    RawDir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationChoice {
    Standard,
    Identity,
    /// Use `data.transforms`.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Test images per class for the synthetic source.
    pub test_per_class: usize,
    /// Stratified fraction of the training set kept.
    pub subset: f64,
    pub augmentation: AugmentationChoice,
    pub transforms: Vec<Transform>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            train_path: None,
            test_path: None,
            synthetic: SyntheticSpec::default(),
            test_per_class: 100,
            subset: 1.0,
            augmentation: AugmentationChoice::Standard,
            transforms: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Include the Hessian spectrum.
    pub spectrum: bool,
    pub slice_size: usize,
    pub batch_size: usize,
    pub spectrum_config: SpectrumConfig,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        let d = DiagConfig::default();
        Self {
            spectrum: true,
            slice_size: d.slice_size,
            batch_size: d.batch_size,
            spectrum_config: d.spectrum.unwrap_or_default(),
        }
    }
}

impl DiagnosticsSection {
    pub fn config(&self) -> DiagConfig {
        DiagConfig {
            slice_size: self.slice_size,
            batch_size: self.batch_size,
            spectrum: self.spectrum.then(|| self.spectrum_config.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub subsets: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            subsets: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Everything one run needs. Unset fields keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Run seed; copied into `train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfigs,
    pub train: TrainConfig,
    pub data: DataSection,
    pub diagnostics: DiagnosticsSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfigs::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            diagnostics: DiagnosticsSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub mask_ratio: Option<f64>,
    pub mode: Option<Mode>,
    pub epochs: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse_spec_str(text: &str, json: bool) -> Result<ExperimentSpec> {
    if json {
        Ok(serde_json::from_str(text).context("invalid JSON config")?)
    } else {
        Ok(toml::from_str(text).context("invalid TOML config")?)
    }
}

/// Reads `path` (TOML, or JSON for `.json`), applies overrides and validates.
pub fn parse_spec(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentSpec> {
    let mut spec = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let json = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            parse_spec_str(&text, json).with_context(|| format!("in {}", p.display()))?
        }
        None => ExperimentSpec::default(),
    };
    spec.apply(overrides);
    spec.validate()?;
    Ok(spec)
}

impl ExperimentSpec {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(r) = o.mask_ratio {
            self.train.mask_ratio = r;
        }
        if let Some(m) = o.mode {
            self.train.mode = m;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
            self.train.warmup_epochs = self.train.warmup_epochs.min(e);
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.encoder.validate().context("model.encoder")?;
        if self.train.mode.needs_decoder() {
            self.model.decoder.validate().context("model.decoder")?;
        }
        let d = &self.data;
        if !(d.subset > 0.0 && d.subset <= 1.0) {
            bail!("data.subset: {} not in (0, 1]", d.subset);
        }
        if d.augmentation == AugmentationChoice::Custom && d.transforms.is_empty() {
            bail!("data.transforms: custom augmentation needs at least one transform");
        }
        if d.augmentation != AugmentationChoice::Custom && !d.transforms.is_empty() {
            bail!("data.transforms: only used with augmentation = \"custom\"");
        }
        if d.kind != DataKind::Synthetic && d.train_path.is_none() {
            bail!("data.train_path: required for {:?} data", d.kind);
        }
        if d.kind == DataKind::Synthetic {
            let enc = &self.model.encoder;
            if d.synthetic.image_size != enc.image_size || enc.channels != 3 {
                bail!(
                    "data.synthetic.image_size {} does not match model.encoder.image_size {} (3 channels)",
                    d.synthetic.image_size,
                    enc.image_size
                );
            }
            if d.synthetic.classes != enc.num_classes {
                bail!(
                    "data.synthetic.classes {} does not match model.encoder.num_classes {}",
                    d.synthetic.classes,
                    enc.num_classes
                );
            }
        }
        for &l in &self.sweep.lambdas {
            if !(0.0..=1.0).contains(&l) {
                bail!("sweep.lambdas: {l} not in [0, 1]");
            }
        }
        for &s in &self.sweep.subsets {
            if !(s > 0.0 && s <= 1.0) {
                bail!("sweep.subsets: {s} not in (0, 1]");
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved spec. The output directory is not part of the
    /// experiment, so it is left out.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("spec serializes")))
    }

    pub fn augmentation(&self) -> AugmentationPipeline {
        match self.data.augmentation {
            AugmentationChoice::Standard => AugmentationPipeline::standard(),
            AugmentationChoice::Identity => AugmentationPipeline::identity(),
            AugmentationChoice::Custom => AugmentationPipeline {
                transforms: self.data.transforms.clone(),
            },
        }
    }

    /// Training and test sets, with the training subset applied.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train, test) = match d.kind {
            DataKind::Synthetic => {
                let test_spec = SyntheticSpec {
                    per_class: d.test_per_class,
                    ..d.synthetic.clone()
                };
                (
                    generate_synthetic(&d.synthetic, Split::Train)?,
                    generate_synthetic(&test_spec, Split::Test)?,
                )
            }
            DataKind::Cifar10 | DataKind::Cifar100 => {
                let layout = if d.kind == DataKind::Cifar10 {
                    CifarLayout::Cifar10
                } else {
                    CifarLayout::Cifar100
                };
                let train_path = d.train_path.as_ref().expect("validated");
                let test_path = d.test_path.as_ref().context("data.test_path: required for CIFAR data")?;
                (
                    load_cifar_binary(train_path, layout, Split::Train)?,
                    load_cifar_binary(test_path, layout, Split::Test)?,
                )
            }
            DataKind::RawDir => {
                let train_path = d.train_path.as_ref().expect("validated");
                let test_path = d.test_path.as_ref().context("data.test_path: required for raw data")?;
                (load_raw_dir(train_path, Split::Train)?, load_raw_dir(test_path, Split::Test)?)
            }
        };
        let enc = &self.model.encoder;
        if train.height != enc.image_size || train.width != enc.image_size || train.channels != enc.channels {
            bail!(
                "data is {}x{}x{}, model expects {}x{}x{}",
                train.height,
                train.width,
                train.channels,
                enc.image_size,
                enc.image_size,
                enc.channels
            );
        }
        let train = if d.subset < 1.0 {
            train.stratified_fraction(d.subset, self.seed)?
        } else {
            train
        };
        Ok((train, test))
    }
}
