//! Vision Transformer pieces: patch grid, patch embedding with a class token
//! and learned positions, the block stack, classifier head, and the
//! label-smoothed cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    layer_norm, linear, normal, transformer_block, AttentionRecord, BlockParams, Ctx, LayerNormParams,
    LinearParams, ParamId, ParamStore, INIT_STD, LAYER_NORM_EPS,
};
use crate::tensor::{Float, Tensor, Var};

/// An `H x W x C` image with pixel values in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub label: Option<usize>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            label: None,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
            label: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Non-overlapping `P x P` grid over an `H x W x C` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 {
            return Err(Error::Divisibility(height, patch));
        }
        if width % patch != 0 {
            return Err(Error::Divisibility(width, patch));
        }
        Ok(Self {
            height,
            width,
            channels,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// Patch count `N = (H/P)·(W/P)`.
    pub fn num_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Values per patch, `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Flattens `image` into `N` patches of `P²·C` values, patches in row-major
/// grid order, each patch ordered (row, column, channel).
pub fn patchify(image: &Image, grid: &PatchGrid) -> Result<Vec<f32>> {
    if image.height != grid.height || image.width != grid.width || image.channels != grid.channels {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            shapes: vec![
                vec![image.height, image.width, image.channels],
                vec![grid.height, grid.width, grid.channels],
            ],
        });
    }
    let p = grid.patch;
    let row_len = p * grid.channels;
    let mut out = Vec::with_capacity(image.pixels.len());
    for gy in 0..grid.rows() {
        for gx in 0..grid.cols() {
            for py in 0..p {
                let start = ((gy * p + py) * grid.width + gx * p) * grid.channels;
                out.extend_from_slice(&image.pixels[start..start + row_len]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], grid: &PatchGrid) -> Result<Image> {
    if patches.len() != grid.num_patches() * grid.patch_dim() {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            shapes: vec![vec![patches.len()], vec![grid.num_patches(), grid.patch_dim()]],
        });
    }
    let p = grid.patch;
    let row_len = p * grid.channels;
    let mut image = Image::zeros(grid.height, grid.width, grid.channels);
    let mut chunks = patches.chunks(row_len);
    for gy in 0..grid.rows() {
        for gx in 0..grid.cols() {
            for py in 0..p {
                let start = ((gy * p + py) * grid.width + gx * p) * grid.channels;
                image.pixels[start..start + row_len].copy_from_slice(chunks.next().expect("sized above"));
            }
        }
    }
    Ok(image)
}

/// Patchifies a batch into a `[B, N, P²·C]` tensor.
pub fn patch_batch<T: Float>(images: &[Image], grid: &PatchGrid) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * grid.num_patches() * grid.patch_dim());
    for image in images {
        data.extend(patchify(image, grid)?.into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::new(vec![images.len(), grid.num_patches(), grid.patch_dim()], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub use_class_token: bool,
}

impl Default for EncoderConfig {
    /// The tiny model used for desk-scale runs on 32×32 inputs.
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            num_classes: 3,
            use_class_token: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Divisibility(self.dim, self.heads));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("mlp_ratio and channels must be positive".into()));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.image_size, self.channels, self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Token count `n` seen by the blocks.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }
}

/// Per-sample token sequences `[B, n, d]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenSequence {
    pub var: Var,
    pub has_class_token: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub linear: LinearParams,
}

impl ClassifierHead {
    pub fn init<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        dim: usize,
        num_classes: usize,
        layer_id: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: LinearParams::init(store, "head", dim, num_classes, layer_id, rng),
        }
    }
}

/// Parameter handles of the encoder `f` and classifier `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct VitParams {
    pub config: EncoderConfig,
    pub patch_embed: LinearParams,
    pub cls_token: Option<ParamId>,
    /// `[N, d]`
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub head: ClassifierHead,
}

impl VitParams {
    /// Layer ids: embeddings 0, block `i` gets `i + 1`, norm and head `depth + 1`.
    pub fn init<T: Float, R: Rng>(store: &mut ParamStore<T>, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let d = config.dim;
        let patch_embed = LinearParams::init(store, "encoder.patch_embed", grid.patch_dim(), d, 0, rng);
        let cls_token = config
            .use_class_token
            .then(|| store.add("encoder.cls_token", normal(&[d], INIT_STD, rng), 0, false));
        let pos_embed = store.add(
            "encoder.pos_embed",
            normal(&[grid.num_patches(), d], INIT_STD, rng),
            0,
            false,
        );
        let blocks = (0..config.depth)
            .map(|i| {
                BlockParams::init(
                    store,
                    &format!("encoder.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    i + 1,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNormParams::init(store, "encoder.norm", d, config.depth + 1);
        let head = ClassifierHead::init(store, d, config.num_classes, config.depth + 1, rng);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    /// Depth buckets used for layer-wise lr decay (`depth + 1`).
    pub fn num_layers(&self) -> usize {
        self.config.depth + 1
    }
}

/// Output of the block stack.
pub struct Encoded<T> {
    pub tokens: TokenSequence,
    /// One record per block when capture is enabled.
    pub attention: Vec<AttentionRecord<T>>,
    /// Block outputs per layer when capture is enabled.
    pub layer_outputs: Vec<Tensor<T>>,
}

/// Projects `[B, N, P²C]` patches to tokens and adds positional embeddings.
pub fn embed_patches<T: Float>(ctx: &mut Ctx<T>, p: &VitParams, patches: Var) -> Result<Var> {
    let shape = ctx.tape.shape(patches).to_vec();
    if shape.len() != 3 || shape[2] != p.patch_embed.in_dim {
        return Err(Error::ShapeMismatch {
            op: "embed",
            shapes: vec![shape, vec![p.patch_embed.in_dim]],
        });
    }
    let tokens = linear(ctx, &p.patch_embed, patches)?;
    ctx.tape.add(tokens, ctx.param(p.pos_embed))
}

/// Prepends the class token when the model uses one.
pub fn prepend_class_token<T: Float>(ctx: &mut Ctx<T>, p: &VitParams, tokens: Var) -> Result<TokenSequence> {
    let Some(cls) = p.cls_token else {
        return Ok(TokenSequence {
            var: tokens,
            has_class_token: false,
        });
    };
    let batch = ctx.tape.shape(tokens)[0];
    let cls = ctx.tape.expand(ctx.param(cls), &[batch, 1])?;
    let var = ctx.tape.concat(&[cls, tokens], 1)?;
    Ok(TokenSequence {
        var,
        has_class_token: true,
    })
}

pub fn embed<T: Float>(ctx: &mut Ctx<T>, p: &VitParams, patches: Var) -> Result<TokenSequence> {
    let tokens = embed_patches(ctx, p, patches)?;
    prepend_class_token(ctx, p, tokens)
}

/// Runs the block stack.
pub fn encode<T: Float>(ctx: &mut Ctx<T>, p: &VitParams, tokens: TokenSequence) -> Result<Encoded<T>> {
    let shape = ctx.tape.shape(tokens.var);
    if shape.len() != 3 || shape[2] != p.config.dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            shapes: vec![shape.to_vec(), vec![p.config.dim]],
        });
    }
    let mut x = tokens.var;
    let mut attention = Vec::new();
    let mut layer_outputs = Vec::new();
    for block in &p.blocks {
        let (y, record) = transformer_block(ctx, block, x)?;
        x = y;
        if let Some(r) = record {
            attention.push(r);
        }
        if ctx.capture() {
            layer_outputs.push(ctx.tape.value(x).clone());
        }
    }
    Ok(Encoded {
        tokens: TokenSequence {
            var: x,
            has_class_token: tokens.has_class_token,
        },
        attention,
        layer_outputs,
    })
}

/// Final encoder layer norm, shared by the classification and masked branches.
pub fn final_norm<T: Float>(ctx: &mut Ctx<T>, p: &VitParams, tokens: TokenSequence) -> Result<TokenSequence> {
    Ok(TokenSequence {
        var: layer_norm(ctx, &p.norm, tokens.var, LAYER_NORM_EPS)?,
        has_class_token: tokens.has_class_token,
    })
}

/// Logits `[B, K]` from the class token, or from mean-pooled tokens without one.
pub fn classify<T: Float>(ctx: &mut Ctx<T>, head: &ClassifierHead, latent: TokenSequence) -> Result<Var> {
    let shape = ctx.tape.shape(latent.var).to_vec();
    let pooled = if latent.has_class_token {
        let cls = ctx.tape.index_select(latent.var, 1, &[0])?;
        ctx.tape.reshape(cls, &[shape[0], shape[2]])?
    } else {
        ctx.tape.mean_axis(latent.var, 1)?
    };
    linear(ctx, &head.linear, pooled)
}

/// Full classification forward: embed → blocks → norm → head.
pub fn forward_logits<T: Float>(ctx: &mut Ctx<T>, p: &VitParams, patches: Var) -> Result<(Var, Encoded<T>)> {
    let tokens = embed(ctx, p, patches)?;
    let encoded = encode(ctx, p, tokens)?;
    let latent = final_norm(ctx, p, encoded.tokens)?;
    Ok((classify(ctx, &p.head, latent)?, encoded))
}

pub fn one_hot<T: Float>(labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(Tensor::from_fn(&[labels.len(), num_classes], |i| {
        if labels[i / num_classes] == i % num_classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Mean over the batch of `-Σ t'·log softmax(logits)` with
/// `t' = (1 - smoothing)·t + smoothing / K`.
pub fn cross_entropy<T: Float>(ctx: &mut Ctx<T>, logits: Var, targets: &Tensor<T>, smoothing: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("label smoothing {smoothing} not in [0, 1)")));
    }
    let shape = ctx.tape.shape(logits).to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            shapes: vec![shape, targets.shape().to_vec()],
        });
    }
    let (batch, k) = (shape[0], shape[1]);
    for row in targets.data().chunks(k) {
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-4 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::InvalidArgument("targets must be probability distributions".into()));
        }
    }
    let off = T::of(smoothing / k as f64);
    let on = T::of(1.0 - smoothing);
    let smoothed = targets.map(|t| on * t + off);
    let log_probs = ctx.tape.log_softmax(logits)?;
    let t = ctx.tape.constant(smoothed);
    let weighted = ctx.tape.mul(log_probs, t)?;
    let total = ctx.tape.sum(weighted)?;
    ctx.tape.scale(total, -1.0 / batch as f64)
}
