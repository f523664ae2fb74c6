//! Training: configuration, AdamW with layer-wise lr decay, the warmup plus
//! cosine schedule, the scratch / reconstruction-pretraining / finetune /
//! joint regimes, evaluation, checkpoints and FLOP accounting.

mod checkpoint;
mod flops;
mod optim;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, FORMAT_VERSION,
    MAGIC,
};
pub use flops::{block_macs, classification_macs, estimate_flops, linear_macs, reconstruction_macs, FlopCount};
pub use optim::{adamw_step, layer_lr_scale, lr_schedule, AdamW, OptimizerState};

use crate::data::{augment, mixup, perspective_perturb, AugmentationPipeline, Dataset};
use crate::error::{Error, Result};
use crate::layers::{Ctx, ParamStore};
use crate::seed::{derive_seed, tag};
use crate::ssat::{
    classification_branch, masked_branch, sample_masks, scalar_of, ssat_step_forward, DecoderConfig, DecoderParams,
    DropPathSeeds, StepBatch,
};
use crate::tensor::{DType, Float, Tensor};
use crate::vit::{forward_logits, one_hot, patch_batch, EncoderConfig, Image, VitParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Classification loss only.
    Scratch,
    /// Reconstruction loss only; labels are never read.
    SslPretrain,
    /// Classification starting from a pretrained encoder, fresh head.
    Finetune,
    /// Weighted classification plus reconstruction every step.
    Ssat,
}

impl Mode {
    pub fn needs_decoder(self) -> bool {
        matches!(self, Mode::Ssat | Mode::SslPretrain)
    }

    pub fn needs_labels(self) -> bool {
        !matches!(self, Mode::SslPretrain)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::SslPretrain => "ssl_pretrain",
            Mode::Finetune => "finetune",
            Mode::Ssat => "ssat",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Mode::Scratch),
            "ssl_pretrain" => Ok(Mode::SslPretrain),
            "finetune" => Ok(Mode::Finetune),
            "ssat" => Ok(Mode::Ssat),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (scratch, ssl_pretrain, finetune, ssat)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    pub alpha: f64,
    /// Chance a batch is mixed.
    pub prob: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.8,
            prob: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub optimizer_eps: f64,
    pub layer_decay: f64,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub mixup: MixupConfig,
    pub drop_path: f64,
    pub dtype: DType,
    /// Evaluate every this many epochs (0: only after the last one).
    pub eval_every: usize,
    /// Pretrained checkpoint for finetuning.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ssat,
            epochs: 100,
            warmup_epochs: 5,
            base_lr: 1e-3,
            warmup_lr: 1e-6,
            min_lr: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            optimizer_eps: 1e-8,
            layer_decay: 0.75,
            lambda: 0.1,
            mask_ratio: 0.75,
            batch_size: 64,
            seed: 0,
            label_smoothing: 0.1,
            mixup: MixupConfig::default(),
            drop_path: 0.01,
            dtype: DType::F32,
            eval_every: 1,
            init_checkpoint: None,
        }
    }
}

fn check(ok: bool, field: &str, msg: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("train.{field}: {msg}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check(self.warmup_epochs <= self.epochs, "warmup_epochs", "exceeds epochs")?;
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_lr", self.warmup_lr),
            ("min_lr", self.min_lr),
            ("optimizer_eps", self.optimizer_eps),
        ] {
            check(v > 0.0 && v.is_finite(), name, format!("{v} must be positive"))?;
        }
        check(self.weight_decay >= 0.0, "weight_decay", "must be non-negative")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "not in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "not in [0, 1)")?;
        check(self.layer_decay > 0.0 && self.layer_decay <= 1.0, "layer_decay", "not in (0, 1]")?;
        check((0.0..=1.0).contains(&self.lambda), "lambda", format!("{} not in [0, 1]", self.lambda))?;
        check((0.0..1.0).contains(&self.mask_ratio), "mask_ratio", format!("{} not in [0, 1)", self.mask_ratio))?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check((0.0..1.0).contains(&self.label_smoothing), "label_smoothing", "not in [0, 1)")?;
        check((0.0..1.0).contains(&self.drop_path), "drop_path", "not in [0, 1)")?;
        check(!self.mixup.enabled || self.mixup.alpha > 0.0, "mixup.alpha", "must be positive")?;
        check((0.0..=1.0).contains(&self.mixup.prob), "mixup.prob", "not in [0, 1]")?;
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.optimizer_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfigs {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// SHA-256 of the JSON form of `value`.
pub fn digest_json<S: Serialize>(value: &S) -> [u8; 32] {
    let json = serde_json::to_vec(value).expect("configs serialize");
    Sha256::digest(json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters of encoder, head and (when the regime uses it) decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub vit: VitParams,
    pub decoder: Option<DecoderParams>,
}

impl<T: Float> Model<T> {
    /// Encoder and decoder draw from separate streams, so the encoder
    /// initialization does not depend on whether a decoder exists.
    pub fn init(configs: &ModelConfigs, with_decoder: bool, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag("init.encoder")]));
        let vit = VitParams::init(&mut store, &configs.encoder, &mut enc_rng)?;
        let decoder = if with_decoder {
            let mut dec_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag("init.decoder")]));
            Some(DecoderParams::init(
                &mut store,
                &configs.decoder,
                &vit,
                vit.num_layers(),
                &mut dec_rng,
            )?)
        } else {
            None
        };
        Ok(Self { store, vit, decoder })
    }

    pub fn lr_scales(&self, layer_decay: f64) -> Vec<f64> {
        let layers = self.vit.num_layers();
        self.store
            .iter()
            .map(|p| layer_lr_scale(p.layer_id, layers, layer_decay))
            .collect()
    }

    /// Overwrites every parameter with the same-named one in `source`.
    pub fn load_values(&mut self, source: &ParamStore<T>) -> Result<()> {
        if source.len() != self.store.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                source.len(),
                self.store.len()
            )));
        }
        for (dst, src) in self.store.iter_mut().zip(source.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Copies the `encoder.*` tensors of a pretrained store; head and
    /// decoder keep their values. Returns how many tensors were copied.
    pub fn load_encoder(&mut self, source: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for dst in self.store.iter_mut().filter(|p| p.name.starts_with("encoder.")) {
            let id = source
                .find(&dst.name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("pretrained weights lack {}", dst.name)))?;
            let src = &source.get(id).value;
            if src.shape() != dst.value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{}: pretrained shape {:?}, model shape {:?}",
                    dst.name,
                    src.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = src.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub l_cls: f64,
    pub l_ssat: f64,
    pub l_total: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub eval_acc: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub mode: Mode,
    pub seed: u64,
    pub config_digest: String,
    pub epochs: Vec<EpochMetrics>,
    pub flops: FlopCount,
    pub wall_seconds: f64,
    pub final_accuracy: Option<f64>,
    /// Steps whose mask hid no patch.
    pub empty_mask_steps: usize,
}

/// How a trainer's parameters start.
pub enum Init<'a, T> {
    Fresh,
    /// Encoder weights from a pretraining run; head freshly initialized.
    Pretrained(&'a ParamStore<T>),
    /// Continue an interrupted run.
    Resume(Checkpoint<T>),
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub models: ModelConfigs,
    pub augmentation: AugmentationPipeline,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub empty_mask_steps: usize,
    lr_scales: Vec<f64>,
}

struct PreparedBatch<T> {
    cls_patches: Tensor<T>,
    targets: Tensor<T>,
    recon_patches: Tensor<T>,
}

/// Steps per epoch with the last partial batch dropped; a dataset smaller
/// than the batch size forms one batch.
pub fn steps_per_epoch(len: usize, batch_size: usize) -> usize {
    (len / batch_size.min(len).max(1)).max(usize::from(len > 0))
}

impl<T: Float> Trainer<T> {
    pub fn new(
        config: &TrainConfig,
        models: &ModelConfigs,
        augmentation: &AugmentationPipeline,
        init: Init<'_, T>,
    ) -> Result<Self> {
        config.validate()?;
        models.encoder.validate()?;
        if config.mode.needs_decoder() {
            models.decoder.validate()?;
        }
        if T::DTYPE != config.dtype {
            return Err(Error::InvalidArgument(format!(
                "trainer precision {:?} differs from configured {:?}",
                T::DTYPE,
                config.dtype
            )));
        }
        let mut model = Model::init(models, config.mode.needs_decoder(), config.seed)?;
        let mut optimizer = OptimizerState::new(&model.store);
        let mut epoch = 0;
        match init {
            Init::Fresh => {
                if config.mode == Mode::Finetune {
                    return Err(Error::InvalidArgument("finetune needs pretrained weights".into()));
                }
            }
            Init::Pretrained(store) => {
                model.load_encoder(store)?;
            }
            Init::Resume(ck) => {
                if ck.config_digest != digest_json(&(models, config)) {
                    return Err(Error::CorruptCheckpoint("checkpoint was written under another configuration".into()));
                }
                model.load_values(&ck.params)?;
                optimizer = ck.optimizer;
                epoch = ck.epoch as usize;
            }
        }
        let lr_scales = model.lr_scales(config.layer_decay);
        Ok(Self {
            config: config.clone(),
            models: models.clone(),
            augmentation: augmentation.clone(),
            model,
            optimizer,
            epoch,
            history: Vec::new(),
            empty_mask_steps: 0,
            lr_scales,
        })
    }

    pub fn config_digest(&self) -> [u8; 32] {
        digest_json(&(&self.models, &self.config))
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config_digest: self.config_digest(),
            epoch: self.epoch as u64,
            seed: self.config.seed,
            params: self.model.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Learning-rate multiplier per parameter, in store order.
    pub fn lr_scales(&self) -> &[f64] {
        &self.lr_scales
    }

    fn seed(&self, purpose: &str, parts: &[u64]) -> u64 {
        let mut all = vec![tag(purpose)];
        all.extend_from_slice(parts);
        derive_seed(self.config.seed, &all)
    }

    fn prepare(&self, data: &Dataset, indices: &[usize], epoch: u64, batch: u64) -> Result<PreparedBatch<T>> {
        let grid = self.models.encoder.grid()?;
        let augmented: Vec<Image> = indices
            .iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed("augment", &[epoch, i as u64]));
                let mut img = augment(&data.image(i), &self.augmentation, &mut rng);
                img.label = None;
                img
            })
            .collect();
        let recon_patches = patch_batch(&augmented, &grid)?;
        if !self.config.mode.needs_labels() {
            return Ok(PreparedBatch {
                cls_patches: Tensor::zeros(&[0]),
                targets: Tensor::zeros(&[0]),
                recon_patches,
            });
        }
        let labels = indices.iter().map(|&i| data.label(i)).collect::<Result<Vec<_>>>()?;
        let k = self.models.encoder.num_classes;
        let mix = &self.config.mixup;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed("mixup", &[epoch, batch]));
        let (cls_patches, targets) = if mix.enabled && indices.len() >= 2 && rng.gen::<f64>() < mix.prob {
            let mixed = mixup(&augmented, &labels, k, mix.alpha, &mut rng)?;
            let t = Tensor::new(vec![indices.len(), k], mixed.targets.iter().map(|&v| T::of(v)).collect())?;
            (patch_batch(&mixed.images, &grid)?, t)
        } else {
            (recon_patches.clone(), one_hot(&labels, k)?)
        };
        Ok(PreparedBatch {
            cls_patches,
            targets,
            recon_patches,
        })
    }

    /// Trains one epoch; returns mean losses over its steps.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let blind;
        let data = if self.config.mode.needs_labels() {
            data
        } else {
            blind = data.without_labels();
            &blind
        };
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let epoch = self.epoch as u64;
        let batch_size = self.config.batch_size.min(data.len());
        let steps = steps_per_epoch(data.len(), self.config.batch_size);
        let total_steps = steps * self.config.epochs;
        let warmup_steps = steps * self.config.warmup_epochs;
        let mut order: Vec<usize> = (0..data.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed("order", &[epoch])));
        }
        let hp = self.config.optimizer();
        let mode = self.config.mode;
        let num_patches = self.models.encoder.num_patches();
        let (mut sum_cls, mut sum_ssat, mut sum_total, mut lr) = (0.0, 0.0, 0.0, 0.0);
        for step in 0..steps {
            let b = step as u64;
            let indices = &order[step * batch_size..(step + 1) * batch_size];
            let batch = self.prepare(data, indices, epoch, b)?;
            let global = self.epoch * steps + step;
            lr = lr_schedule(
                global.min(total_steps.max(1) - 1),
                total_steps.max(1),
                warmup_steps,
                self.config.base_lr,
                self.config.warmup_lr,
                self.config.min_lr,
            )?;
            let seeds = DropPathSeeds {
                rate: self.config.drop_path,
                cls: self.seed("drop_path.cls", &[epoch, b]),
                masked: self.seed("drop_path.masked", &[epoch, b]),
            };
            let mask_seed = self.seed("mask", &[epoch, b]);
            let mut ctx = Ctx::new(&self.model.store, true);
            let (loss, l_cls, l_ssat) = match mode {
                Mode::Scratch | Mode::Finetune => {
                    ctx.set_drop_path(seeds.rate, seeds.cls);
                    let l = classification_branch(
                        &mut ctx,
                        &self.model.vit,
                        &batch.cls_patches,
                        &batch.targets,
                        self.config.label_smoothing,
                    )?;
                    let v = scalar_of(&ctx, l)?;
                    (l, v, 0.0)
                }
                Mode::SslPretrain => {
                    let decoder = self.model.decoder.as_ref().expect("decoder built for this mode");
                    let masks = sample_masks(indices.len(), num_patches, self.config.mask_ratio, mask_seed)?;
                    ctx.set_drop_path(seeds.rate, seeds.masked);
                    let r = masked_branch(&mut ctx, &self.model.vit, decoder, &batch.recon_patches, &masks)?;
                    self.empty_mask_steps += usize::from(r.empty_mask);
                    let v = scalar_of(&ctx, r.loss)?;
                    (r.loss, 0.0, v)
                }
                Mode::Ssat => {
                    let decoder = self.model.decoder.as_ref().expect("decoder built for this mode");
                    let masks = sample_masks(indices.len(), num_patches, self.config.mask_ratio, mask_seed)?;
                    let step_batch = StepBatch {
                        cls_patches: &batch.cls_patches,
                        targets: &batch.targets,
                        recon_patches: &batch.recon_patches,
                        masks: &masks,
                    };
                    let out = ssat_step_forward(
                        &mut ctx,
                        &self.model.vit,
                        decoder,
                        &step_batch,
                        self.config.lambda,
                        self.config.label_smoothing,
                        seeds,
                    )?;
                    self.empty_mask_steps += usize::from(out.empty_mask);
                    (out.total, out.breakdown.l_cls, out.breakdown.l_ssat)
                }
            };
            let total = scalar_of(&ctx, loss)?;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss {total} at epoch {} step {step}", epoch + 1)));
            }
            sum_cls += l_cls;
            sum_ssat += l_ssat;
            sum_total += total;
            if !ctx.tape.requires_grad(loss) {
                // reconstruction over an empty mask: nothing to learn from
                continue;
            }
            let grads = ctx.tape.backward(loss)?;
            let grads = ctx.param_grads(&grads);
            adamw_step(&mut self.model.store, &grads, &mut self.optimizer, lr, &self.lr_scales, &hp)?;
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            l_cls: sum_cls / n,
            l_ssat: sum_ssat / n,
            l_total: sum_total / n,
            lr,
            eval_acc: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `until_epoch` epochs are complete, evaluating on `test`
    /// per `eval_every`.
    pub fn run(&mut self, train: &Dataset, test: Option<&Dataset>, until_epoch: usize) -> Result<()> {
        let until = until_epoch.min(self.config.epochs);
        while self.epoch < until {
            let mut m = self.train_epoch(train)?;
            let every = self.config.eval_every;
            let due = (every > 0 && self.epoch % every == 0) || self.epoch == self.config.epochs;
            if let (Some(test), true, true) = (test, due, self.config.mode.needs_labels()) {
                m.eval_acc = Some(evaluate(&self.model, test, &EvalOptions::default())?);
            }
            log::info!(
                "epoch {} l_cls {:.4} l_ssat {:.4} l_total {:.4} lr {:.3e} acc {:?}",
                m.epoch,
                m.l_cls,
                m.l_ssat,
                m.l_total,
                m.lr,
                m.eval_acc
            );
            self.history.push(m);
        }
        Ok(())
    }

    pub fn metrics(&self, wall_seconds: f64) -> ExperimentMetrics {
        ExperimentMetrics {
            mode: self.config.mode,
            seed: self.config.seed,
            config_digest: hex(&self.config_digest()),
            epochs: self.history.clone(),
            flops: estimate_flops(
                &self.models.encoder,
                &self.models.decoder,
                self.config.mode,
                self.config.mask_ratio,
            ),
            wall_seconds,
            final_accuracy: self.history.last().and_then(|m| m.eval_acc),
            empty_mask_steps: self.empty_mask_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Perspective strength and seed; `None` evaluates clean images.
    pub perturb: Option<(f64, u64)>,
    /// Worker threads over batches.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 128,
            perturb: None,
            threads: 1,
        }
    }
}

fn predict_batch<T: Float>(model: &Model<T>, data: &Dataset, indices: &[usize], opts: &EvalOptions) -> Result<usize> {
    let grid = model.vit.config.grid()?;
    let images = indices
        .iter()
        .map(|&i| match opts.perturb {
            Some((strength, seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag("perturb"), i as u64]));
                perspective_perturb(&data.image(i), strength, &mut rng)
            }
            None => Ok(data.image(i)),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ctx = Ctx::new(&model.store, false);
    let x = ctx.tape.constant(patch_batch::<T>(&images, &grid)?);
    let (logits, _) = forward_logits(&mut ctx, &model.vit, x)?;
    let k = model.vit.config.num_classes;
    let mut correct = 0;
    for (row, &i) in ctx.tape.value(logits).data().chunks(k).zip(indices) {
        let pred = (0..k)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
            .unwrap_or(0);
        correct += usize::from(pred == data.label(i)?);
    }
    Ok(correct)
}

/// Top-1 accuracy on `data`.
pub fn evaluate<T: Float>(model: &Model<T>, data: &Dataset, opts: &EvalOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = all.chunks(opts.batch_size.max(1)).collect();
    let threads = opts.threads.clamp(1, chunks.len());
    let correct: usize = if threads == 1 {
        chunks
            .iter()
            .map(|c| predict_batch(model, data, c, opts))
            .sum::<Result<usize>>()?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let chunks = &chunks;
                    s.spawn(move || {
                        chunks
                            .iter()
                            .skip(t)
                            .step_by(threads)
                            .map(|c| predict_batch(model, data, c, opts))
                            .sum::<Result<usize>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / data.len() as f64)
}

/// A trained model with its record.
pub struct Experiment<T> {
    pub metrics: ExperimentMetrics,
    pub trainer: Trainer<T>,
}

/// Runs one regime to completion. Finetuning loads `init_checkpoint`.
pub fn run_experiment<T: Float>(
    config: &TrainConfig,
    models: &ModelConfigs,
    augmentation: &AugmentationPipeline,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<Experiment<T>> {
    if config.mode == Mode::Finetune {
        let path = config
            .init_checkpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("train.init_checkpoint is required for finetune".into()))?;
        let ck = load_checkpoint::<T>(path)?;
        return run_with_init(config, models, augmentation, train, test, Init::Pretrained(&ck.params));
    }
    run_with_init(config, models, augmentation, train, test, Init::Fresh)
}

pub fn run_with_init<T: Float>(
    config: &TrainConfig,
    models: &ModelConfigs,
    augmentation: &AugmentationPipeline,
    train: &Dataset,
    test: Option<&Dataset>,
    init: Init<'_, T>,
) -> Result<Experiment<T>> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config, models, augmentation, init)?;
    trainer.run(train, test, config.epochs)?;
    Ok(Experiment {
        metrics: trainer.metrics(start.elapsed().as_secs_f64()),
        trainer,
    })
}

/// Sequential pretrain-then-finetune schedule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SslFtPreset {
    pub name: String,
    pub ssl_epochs: usize,
    pub ft_epochs: usize,
}

/// The four pretrain/finetune lengths compared against joint training,
/// relative to its epoch budget `e`: (e/2, e/2), (e/2, e), (e, e/2), (e, e).
pub fn ssl_ft_presets(e: usize) -> Vec<SslFtPreset> {
    let h = (e / 2).max(1);
    [(h, h), (h, e), (e, h), (e, e)]
        .into_iter()
        .enumerate()
        .map(|(i, (ssl, ft))| SslFtPreset {
            name: format!("ssl_ft_{}", i + 1),
            ssl_epochs: ssl,
            ft_epochs: ft,
        })
        .collect()
}

/// Reconstruction pretraining on unlabeled images, then finetuning with a
/// fresh head; the decoder is dropped in between.
pub fn run_ssl_ft<T: Float>(
    config: &TrainConfig,
    models: &ModelConfigs,
    augmentation: &AugmentationPipeline,
    train: &Dataset,
    test: Option<&Dataset>,
    preset: &SslFtPreset,
) -> Result<(ExperimentMetrics, ExperimentMetrics)> {
    let pre_cfg = TrainConfig {
        mode: Mode::SslPretrain,
        epochs: preset.ssl_epochs,
        warmup_epochs: config.warmup_epochs.min(preset.ssl_epochs),
        ..config.clone()
    };
    let pre = run_with_init::<T>(&pre_cfg, models, augmentation, &train.without_labels(), None, Init::Fresh)?;
    let ft_cfg = TrainConfig {
        mode: Mode::Finetune,
        epochs: preset.ft_epochs,
        warmup_epochs: config.warmup_epochs.min(preset.ft_epochs),
        ..config.clone()
    };
    let ft = run_with_init(
        &ft_cfg,
        models,
        augmentation,
        train,
        test,
        Init::Pretrained(&pre.trainer.model.store),
    )?;
    Ok((pre.metrics, ft.metrics))
}
