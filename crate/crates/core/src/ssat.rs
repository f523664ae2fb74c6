//! The masked auxiliary branch: random patch masking, a shallow decoder with
//! a learnable mask token, the per-patch normalized reconstruction loss on
//! masked patches, and the weighted joint objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    layer_norm, linear, normal, transformer_block, BlockParams, Ctx, LayerNormParams, LinearParams, ParamId,
    ParamStore, INIT_STD, LAYER_NORM_EPS,
};
use crate::tensor::{Float, Tensor, Var};
use crate::vit::{embed_patches, encode, final_norm, prepend_class_token, TokenSequence, VitParams};

pub const TARGET_NORM_EPS: f64 = 1e-6;

/// One sample's split of the patch grid into visible and masked positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub num_patches: usize,
    pub ratio: f64,
    /// Sorted.
    pub visible: Vec<usize>,
    /// Sorted.
    pub masked: Vec<usize>,
    pub seed: u64,
}

/// Number of masked patches, `round(ratio · n)` with ties away from zero.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Uniform sample without replacement of `round(ratio · n)` masked positions.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} not in [0, 1)")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask over zero patches".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, masked_count(n, ratio)) {
        hidden[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| hidden[i]);
    Ok(MaskSpec {
        num_patches: n,
        ratio,
        visible,
        masked,
        seed,
    })
}

/// Independent masks for a batch, one sub-seed per sample.
pub fn sample_masks(batch: usize, n: usize, ratio: f64, seed: u64) -> Result<Vec<MaskSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch).map(|_| sample_mask(n, ratio, rng.gen())).collect()
}

fn check_masks(masks: &[MaskSpec], batch: usize, n: usize) -> Result<()> {
    if masks.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} masks for a batch of {batch}",
            masks.len()
        )));
    }
    for m in masks {
        if m.num_patches != n {
            return Err(Error::ShapeMismatch {
                op: "mask",
                shapes: vec![vec![m.num_patches], vec![n]],
            });
        }
        if m.masked.len() != masks[0].masked.len() {
            return Err(Error::InvalidArgument("masks in a batch must hide the same count".into()));
        }
    }
    Ok(())
}

/// Keeps the visible patch tokens of each sample in original order; a
/// leading class token is kept in front.
pub fn apply_mask<T: Float>(ctx: &mut Ctx<T>, tokens: TokenSequence, masks: &[MaskSpec]) -> Result<TokenSequence> {
    let shape = ctx.tape.shape(tokens.var).to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            shapes: vec![shape],
        });
    }
    let offset = usize::from(tokens.has_class_token);
    let n = shape[1] - offset.min(shape[1]);
    check_masks(masks, shape[0], n)?;
    let indices = masks
        .iter()
        .map(|m| {
            let mut row = Vec::with_capacity(m.visible.len() + offset);
            if offset == 1 {
                row.push(0);
            }
            row.extend(m.visible.iter().map(|&i| i + offset));
            row
        })
        .collect();
    Ok(TokenSequence {
        var: ctx.tape.gather_rows(tokens.var, indices)?,
        has_class_token: tokens.has_class_token,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 128,
            heads: 16,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Divisibility(self.dim, self.heads));
        }
        Ok(())
    }
}

/// Parameter handles of the decoder `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub embed: LinearParams,
    /// `[D]`
    pub mask_token: ParamId,
    /// `[N, D]`
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub pred: LinearParams,
}

impl DecoderParams {
    /// All decoder parameters share `layer_id`; pass the encoder's layer
    /// count so they train at the undecayed rate.
    pub fn init<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        config: &DecoderConfig,
        encoder: &VitParams,
        layer_id: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let grid = encoder.config.grid()?;
        let d = config.dim;
        let embed = LinearParams::init(store, "decoder.embed", encoder.config.dim, d, layer_id, rng);
        let mask_token = store.add("decoder.mask_token", normal(&[d], INIT_STD, rng), layer_id, false);
        let pos_embed = store.add(
            "decoder.pos_embed",
            normal(&[grid.num_patches(), d], INIT_STD, rng),
            layer_id,
            false,
        );
        let blocks = (0..config.depth)
            .map(|i| {
                BlockParams::init(
                    store,
                    &format!("decoder.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    layer_id,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNormParams::init(store, "decoder.norm", d, layer_id);
        let pred = LinearParams::init(store, "decoder.pred", d, grid.patch_dim(), layer_id, rng);
        Ok(Self {
            config: config.clone(),
            num_patches: grid.num_patches(),
            patch_dim: grid.patch_dim(),
            embed,
            mask_token,
            pos_embed,
            blocks,
            norm,
            pred,
        })
    }
}

/// Predicts every patch `[B, N, P²C]` from the visible latents: project,
/// fill masked slots with the mask token, restore grid order, add decoder
/// positions, run the blocks, project to pixels.
pub fn decode<T: Float>(
    ctx: &mut Ctx<T>,
    p: &DecoderParams,
    latent: TokenSequence,
    masks: &[MaskSpec],
) -> Result<Var> {
    let shape = ctx.tape.shape(latent.var).to_vec();
    let offset = usize::from(latent.has_class_token);
    if shape.len() != 3 || shape[2] != p.embed.in_dim || shape[1] < offset {
        return Err(Error::ShapeMismatch {
            op: "decode",
            shapes: vec![shape, vec![p.embed.in_dim]],
        });
    }
    let (batch, n) = (shape[0], p.num_patches);
    check_masks(masks, batch, n)?;
    let visible = shape[1] - offset;
    if masks.iter().any(|m| m.visible.len() != visible) {
        return Err(Error::ShapeMismatch {
            op: "decode",
            shapes: vec![shape, vec![masks[0].visible.len()]],
        });
    }
    let mut x = latent.var;
    if offset == 1 {
        let keep: Vec<usize> = (1..shape[1]).collect();
        x = ctx.tape.index_select(x, 1, &keep)?;
    }
    let mut x = linear(ctx, &p.embed, x)?;
    let hidden = n - visible;
    if hidden > 0 {
        let fill = ctx.tape.expand(ctx.param(p.mask_token), &[batch, hidden])?;
        x = ctx.tape.concat(&[x, fill], 1)?;
    }
    // slot j of the concatenation holds grid position order[j]; invert it
    let restore = masks
        .iter()
        .map(|m| {
            let mut inv = vec![0; n];
            for (slot, &pos) in m.visible.iter().chain(&m.masked).enumerate() {
                inv[pos] = slot;
            }
            inv
        })
        .collect();
    let x = ctx.tape.gather_rows(x, restore)?;
    let mut x = ctx.tape.add(x, ctx.param(p.pos_embed))?;
    for block in &p.blocks {
        x = transformer_block(ctx, block, x)?.0;
    }
    let x = layer_norm(ctx, &p.norm, x, LAYER_NORM_EPS)?;
    linear(ctx, &p.pred, x)
}

/// Each patch (row of the last axis) shifted to zero mean and scaled by
/// `1 / sqrt(var + eps)`, population variance.
pub fn normalize_patches<T: Float>(target: &Tensor<T>, eps: f64) -> Tensor<T> {
    let d = *target.shape().last().unwrap_or(&1);
    let mut out = target.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = T::of((v.as_f64() - mean) * r);
        }
    }
    out
}

pub struct ReconLoss {
    pub loss: Var,
    /// No patch was masked; the loss is the constant 0.
    pub empty_mask: bool,
}

/// Mean squared error between `pred` and the per-patch normalized `target`
/// over the pixels of masked patches only.
pub fn reconstruction_loss<T: Float>(
    ctx: &mut Ctx<T>,
    pred: Var,
    target: &Tensor<T>,
    masks: &[MaskSpec],
    eps: f64,
) -> Result<ReconLoss> {
    let shape = ctx.tape.shape(pred).to_vec();
    if shape.len() != 3 || target.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            shapes: vec![shape, target.shape().to_vec()],
        });
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("normalization eps {eps} must be positive")));
    }
    check_masks(masks, shape[0], shape[1])?;
    if masks.iter().all(|m| m.masked.is_empty()) {
        log::warn!("reconstruction loss over an empty mask is defined as 0");
        return Ok(ReconLoss {
            loss: ctx.tape.constant(Tensor::scalar(T::zero())),
            empty_mask: true,
        });
    }
    let d = shape[2];
    let normalized = normalize_patches(target, eps);
    let k = masks[0].masked.len();
    let mut picked = Vec::with_capacity(shape[0] * k * d);
    for (b, m) in masks.iter().enumerate() {
        for &i in &m.masked {
            let start = (b * shape[1] + i) * d;
            picked.extend_from_slice(&normalized.data()[start..start + d]);
        }
    }
    let goal = ctx.tape.constant(Tensor::new(vec![shape[0], k, d], picked)?);
    let rows = masks.iter().map(|m| m.masked.clone()).collect();
    let guess = ctx.tape.gather_rows(pred, rows)?;
    let diff = ctx.tape.sub(guess, goal)?;
    let sq = ctx.tape.mul(diff, diff)?;
    Ok(ReconLoss {
        loss: ctx.tape.mean(sq)?,
        empty_mask: false,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_ssat: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} not in [0, 1]")));
    }
    Ok(())
}

/// `L = λ·L_cls + (1 − λ)·L_SSAT`.
pub fn joint_loss(l_cls: f64, l_ssat: f64, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    Ok(LossBreakdown {
        l_cls,
        l_ssat,
        lambda,
        total: lambda * l_cls + (1.0 - lambda) * l_ssat,
    })
}

/// The joint objective on the tape.
pub fn joint_loss_var<T: Float>(ctx: &mut Ctx<T>, l_cls: Var, l_ssat: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = ctx.tape.scale(l_cls, lambda)?;
    let b = ctx.tape.scale(l_ssat, 1.0 - lambda)?;
    ctx.tape.add(a, b)
}

/// Inputs of one joint step. `cls_patches` may be mixed; `recon_patches`
/// is the same augmented batch before mixing and doubles as the target.
pub struct StepBatch<'a, T> {
    pub cls_patches: &'a Tensor<T>,
    pub targets: &'a Tensor<T>,
    pub recon_patches: &'a Tensor<T>,
    pub masks: &'a [MaskSpec],
}

/// Stochastic-depth streams, one per branch, so the classification branch
/// draws the same values whether or not the masked branch runs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DropPathSeeds {
    pub rate: f64,
    pub cls: u64,
    pub masked: u64,
}

pub struct StepOutput {
    pub total: Var,
    pub l_cls: Var,
    pub l_ssat: Var,
    pub breakdown: LossBreakdown,
    pub empty_mask: bool,
}

/// Full tokens → encoder → head → label-smoothed cross-entropy.
pub fn classification_branch<T: Float>(
    ctx: &mut Ctx<T>,
    vit: &VitParams,
    patches: &Tensor<T>,
    targets: &Tensor<T>,
    smoothing: f64,
) -> Result<Var> {
    let x = ctx.tape.constant(patches.clone());
    let (logits, _) = crate::vit::forward_logits(ctx, vit, x)?;
    crate::vit::cross_entropy(ctx, logits, targets, smoothing)
}

/// Visible tokens → shared encoder and final norm → decoder → masked MSE.
pub fn masked_branch<T: Float>(
    ctx: &mut Ctx<T>,
    vit: &VitParams,
    decoder: &DecoderParams,
    patches: &Tensor<T>,
    masks: &[MaskSpec],
) -> Result<ReconLoss> {
    let x = ctx.tape.constant(patches.clone());
    let tokens = embed_patches(ctx, vit, x)?;
    let tokens = TokenSequence {
        var: tokens,
        has_class_token: false,
    };
    let visible = apply_mask(ctx, tokens, masks)?;
    let visible = prepend_class_token(ctx, vit, visible.var)?;
    let encoded = encode(ctx, vit, visible)?;
    let latent = final_norm(ctx, vit, encoded.tokens)?;
    let pred = decode(ctx, decoder, latent, masks)?;
    reconstruction_loss(ctx, pred, patches, masks, TARGET_NORM_EPS)
}

/// One forward of both branches through the shared encoder, combined by
/// the joint objective.
pub fn ssat_step_forward<T: Float>(
    ctx: &mut Ctx<T>,
    vit: &VitParams,
    decoder: &DecoderParams,
    batch: &StepBatch<'_, T>,
    lambda: f64,
    smoothing: f64,
    drop_path: DropPathSeeds,
) -> Result<StepOutput> {
    check_lambda(lambda)?;
    ctx.set_drop_path(drop_path.rate, drop_path.cls);
    let l_cls = classification_branch(ctx, vit, batch.cls_patches, batch.targets, smoothing)?;
    ctx.set_drop_path(drop_path.rate, drop_path.masked);
    let recon = masked_branch(ctx, vit, decoder, batch.recon_patches, batch.masks)?;
    ctx.clear_drop_path();
    let total = joint_loss_var(ctx, l_cls, recon.loss, lambda)?;
    let breakdown = joint_loss(
        scalar_of(ctx, l_cls)?,
        scalar_of(ctx, recon.loss)?,
        lambda,
    )?;
    Ok(StepOutput {
        total,
        l_cls,
        l_ssat: recon.loss,
        breakdown,
        empty_mask: recon.empty_mask,
    })
}

pub(crate) fn scalar_of<T: Float>(ctx: &Ctx<T>, v: Var) -> Result<f64> {
    let t = ctx.tape.value(v);
    t.item()
        .map(|x| x.as_f64())
        .ok_or_else(|| Error::NonScalarLoss(t.shape().to_vec()))
}
