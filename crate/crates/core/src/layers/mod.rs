//! Transformer building blocks expressed on the tape: affine maps, layer
//! normalization, multi-head self-attention, the GELU MLP, and the pre-norm
//! residual block.

mod context;
mod params;

use rand::Rng;

pub use context::Ctx;
pub use params::{normal, trunc_normal, Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `[out_dim, in_dim]`
    pub weight: ParamId,
    /// `[out_dim]`
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    pub fn init<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        layer_id: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(&[out_dim, in_dim], INIT_STD, rng),
            layer_id,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), layer_id, false);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn init<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, layer_id: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()), layer_id, false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), layer_id, false);
        Self { gamma, beta, dim }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn init<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        layer_id: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Divisibility(dim, heads));
        }
        Ok(Self {
            query: LinearParams::init(store, &format!("{name}.q"), dim, dim, layer_id, rng),
            key: LinearParams::init(store, &format!("{name}.k"), dim, dim, layer_id, rng),
            value: LinearParams::init(store, &format!("{name}.v"), dim, dim, layer_id, rng),
            output: LinearParams::init(store, &format!("{name}.proj"), dim, dim, layer_id, rng),
            heads,
            dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        layer_id: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        Ok(Self {
            norm1: LayerNormParams::init(store, &format!("{name}.norm1"), dim, layer_id),
            attn: AttentionParams::init(store, &format!("{name}.attn"), dim, heads, layer_id, rng)?,
            norm2: LayerNormParams::init(store, &format!("{name}.norm2"), dim, layer_id),
            mlp: MlpParams {
                fc1: LinearParams::init(store, &format!("{name}.mlp.fc1"), dim, hidden, layer_id, rng),
                fc2: LinearParams::init(store, &format!("{name}.mlp.fc2"), hidden, dim, layer_id, rng),
            },
        })
    }
}

/// Row-stochastic attention maps of one layer, `[batch, heads, n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub weights: Tensor<T>,
}

impl<T: Float> AttentionRecord<T> {
    pub fn batch(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[2]
    }

    /// The `heads x n x n` maps of one sample.
    pub fn sample(&self, b: usize) -> &[T] {
        let per = self.heads() * self.tokens() * self.tokens();
        &self.weights.data()[b * per..(b + 1) * per]
    }
}

/// Affine map on the last axis: `x · Wᵀ + b`.
pub fn linear<T: Float>(ctx: &mut Ctx<T>, p: &LinearParams, x: Var) -> Result<Var> {
    let last = *ctx.tape.shape(x).last().unwrap_or(&0);
    if last != p.in_dim {
        return Err(Error::ShapeMismatch {
            op: "linear",
            shapes: vec![ctx.tape.shape(x).to_vec(), vec![p.out_dim, p.in_dim]],
        });
    }
    let w = ctx.param(p.weight);
    let b = ctx.param(p.bias);
    let y = ctx.tape.matmul_nt(x, w)?;
    ctx.tape.add(y, b)
}

pub fn layer_norm<T: Float>(ctx: &mut Ctx<T>, p: &LayerNormParams, x: Var, eps: f64) -> Result<Var> {
    let n = ctx.tape.normalize(x, eps)?;
    let scaled = ctx.tape.mul(n, ctx.param(p.gamma))?;
    ctx.tape.add(scaled, ctx.param(p.beta))
}

/// Scaled dot-product self-attention over `x: [B, n, d]`.
pub fn multi_head_attention<T: Float>(
    ctx: &mut Ctx<T>,
    p: &AttentionParams,
    x: Var,
) -> Result<(Var, Option<AttentionRecord<T>>)> {
    if p.heads == 0 || p.dim % p.heads != 0 {
        return Err(Error::Divisibility(p.dim, p.heads));
    }
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != p.dim {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            shapes: vec![shape, vec![p.dim]],
        });
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let head_dim = d / p.heads;
    let split = |ctx: &mut Ctx<T>, lp: &LinearParams| -> Result<Var> {
        let y = linear(ctx, lp, x)?;
        let y = ctx.tape.reshape(y, &[b, n, p.heads, head_dim])?;
        ctx.tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(ctx, &p.query)?;
    let k = split(ctx, &p.key)?;
    let v = split(ctx, &p.value)?;
    let scores = ctx.tape.matmul_nt(q, k)?;
    let scores = ctx.tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let attn = ctx.tape.softmax(scores)?;
    let record = ctx.capture().then(|| AttentionRecord {
        weights: ctx.tape.value(attn).clone(),
    });
    let mixed = ctx.tape.matmul(attn, v)?;
    let mixed = ctx.tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = ctx.tape.reshape(mixed, &[b, n, d])?;
    Ok((linear(ctx, &p.output, mixed)?, record))
}

pub fn mlp<T: Float>(ctx: &mut Ctx<T>, p: &MlpParams, x: Var) -> Result<Var> {
    let h = linear(ctx, &p.fc1, x)?;
    let h = ctx.tape.gelu(h)?;
    linear(ctx, &p.fc2, h)
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `+ MLP(LN(·))`, with
/// stochastic depth on both residual branches.
pub fn transformer_block<T: Float>(
    ctx: &mut Ctx<T>,
    p: &BlockParams,
    x: Var,
) -> Result<(Var, Option<AttentionRecord<T>>)> {
    let h = layer_norm(ctx, &p.norm1, x, LAYER_NORM_EPS)?;
    let (a, record) = multi_head_attention(ctx, &p.attn, h)?;
    let a = ctx.drop_path(a)?;
    let x = ctx.tape.add(x, a)?;
    let h = layer_norm(ctx, &p.norm2, x, LAYER_NORM_EPS)?;
    let m = mlp(ctx, &p.mlp, h)?;
    let m = ctx.drop_path(m)?;
    Ok((ctx.tape.add(x, m)?, record))
}
