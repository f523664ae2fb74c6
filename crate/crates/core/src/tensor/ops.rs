use std::str::FromStr;

use super::gemm::{gemm, MatView};
use super::{numel_of, Float, Tensor};
use crate::error::{Error, Result};

/// Every differentiable operation the tape can record.
///
/// Elementwise binary ops (`Add`, `Sub`, `Mul`) accept equal shapes or a
/// right/left operand whose shape is a suffix of the other's (broadcast along
/// leading batch dimensions only). Row-wise ops (`Softmax`, `LogSoftmax`,
/// `Normalize`) act on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[.., m, k] x [k, n]` or batched `[.., m, k] x [.., k, n]`.
    MatMul,
    /// Like `MatMul` but with the right operand transposed: `a · bᵀ`.
    MatMulNt,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// Swap the last two axes.
    Transpose,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat { axis: usize },
    IndexSelect { axis: usize, indices: Vec<usize> },
    /// Per-batch row gather on axis 1: `[B, n, ..] -> [B, k, ..]`.
    GatherRows { indices: Vec<Vec<usize>> },
    /// Prepend broadcast axes: `[..] -> [leading.., ..]`.
    Expand(Vec<usize>),
    Softmax,
    LogSoftmax,
    /// Zero-mean, unit-variance over the last axis (layer-norm core).
    Normalize { eps: f64 },
    Gelu,
    Exp,
    Log,
    Pow(f64),
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::Permute(_) => "permute",
            OpKind::Concat { .. } => "concat",
            OpKind::IndexSelect { .. } => "index_select",
            OpKind::GatherRows { .. } => "gather_rows",
            OpKind::Expand(_) => "expand",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Normalize { .. } => "normalize",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Pow(_) => "pow",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::MeanAxis(_) => "mean_axis",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::MatMulNt | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Parses the parameter-free op kinds by name.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "matmul_nt" => OpKind::MatMulNt,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "transpose" => OpKind::Transpose,
            "softmax" => OpKind::Softmax,
            "log_softmax" => OpKind::LogSoftmax,
            "gelu" => OpKind::Gelu,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
pub fn gelu_scalar<T: Float>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

// exp-based tanh; libm's tanhf dominated the MLP cost
fn tanh<T: Float>(z: T) -> T {
    let e = (z + z).exp();
    T::one() - T::of(2.0) / (e + T::one())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// `f(a[i mod |a|], b[i mod |b|])` for `i < n`, where both lengths divide `n`.
fn zip_tiled<T: Copy>(a: &[T], b: &[T], n: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if a.len() == n {
        for ca in a.chunks(b.len()) {
            out.extend(ca.iter().zip(b).map(|(&u, &v)| f(u, v)));
        }
    } else if b.len() == n {
        for cb in b.chunks(a.len()) {
            out.extend(a.iter().zip(cb).map(|(&u, &v)| f(u, v)));
        }
    } else {
        out.extend((0..n).map(|i| f(a[i % a.len()], b[i % b.len()])));
    }
    out
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], nt: bool) -> Result<MatMulDims> {
    let op = if nt { "matmul_nt" } else { "matmul" };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch(op, &[a, b]));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (kb, n) = if nt { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(mismatch(op, &[a, b]));
    }
    let lead_a = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && lead_a != &b[..b.len() - 2] {
        return Err(mismatch(op, &[a, b]));
    }
    let mut out_shape = lead_a.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulDims {
        batch: numel_of(lead_a),
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(mismatch(op, &[a, b]))
    }
}

/// Splits a shape around `axis` into `(outer, dim, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_strides = strides_of(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let nd = out_shape.len();
        let mut idx = vec![0usize; nd];
        let mut offset = 0usize;
        let src = x.data();
        for _ in 0..n {
            out.push(src[offset]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                offset += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves numel")
}

fn row_apply<T: Float>(x: &Tensor<T>, mut f: impl FnMut(&[T], &mut [T])) -> Tensor<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = vec![T::zero(); x.numel()];
    if d > 0 {
        for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            f(src, dst);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn row_max<T: Float>(row: &[T]) -> T {
    row.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
}

/// Output plus optional per-op saved state for the backward rule.
pub(crate) struct Forward<T> {
    pub value: Tensor<T>,
    pub saved: Option<Vec<T>>,
}

impl<T> From<Tensor<T>> for Forward<T> {
    fn from(value: Tensor<T>) -> Self {
        Forward { value, saved: None }
    }
}

pub(crate) fn forward<T: Float>(kind: &OpKind, inputs: &[&Tensor<T>]) -> Result<Forward<T>> {
    if let Some(arity) = kind.arity() {
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} inputs, got {}",
                kind.name(),
                arity,
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} needs inputs", kind.name())));
    }
    let x = inputs[0];
    Ok(match kind {
        OpKind::MatMul | OpKind::MatMulNt => {
            let nt = matches!(kind, OpKind::MatMulNt);
            let b = inputs[1];
            let d = matmul_dims(x.shape(), b.shape(), nt)?;
            let mut out = vec![T::zero(); numel_of(&d.out_shape)];
            let (b_rows, b_cols) = if nt { (d.n, d.k) } else { (d.k, d.n) };
            let view_b = |data| {
                let v = MatView::new(data, b_rows, b_cols);
                if nt {
                    v.t()
                } else {
                    v
                }
            };
            if d.shared_rhs {
                let rows = d.batch * d.m;
                gemm(MatView::new(x.data(), rows, d.k), view_b(b.data()), T::zero(), &mut out);
            } else {
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for i in 0..d.batch {
                    gemm(
                        MatView::new(&x.data()[i * sa..(i + 1) * sa], d.m, d.k),
                        view_b(&b.data()[i * sb..(i + 1) * sb]),
                        T::zero(),
                        &mut out[i * sc..(i + 1) * sc],
                    );
                }
            }
            Tensor::new(d.out_shape, out)?.into()
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b = inputs[1];
            let shape = broadcast_shape(kind.name(), x.shape(), b.shape())?;
            let n = numel_of(&shape);
            let (ad, bd) = (x.data(), b.data());
            let data: Vec<T> = match kind {
                OpKind::Add => zip_tiled(ad, bd, n, |u, v| u + v),
                OpKind::Sub => zip_tiled(ad, bd, n, |u, v| u - v),
                _ => zip_tiled(ad, bd, n, |u, v| u * v),
            };
            Tensor::new(shape, data)?.into()
        }
        OpKind::Scale(c) => {
            let c = T::of(*c);
            x.map(|v| v * c).into()
        }
        OpKind::AddScalar(c) => {
            let c = T::of(*c);
            x.map(|v| v + c).into()
        }
        OpKind::Transpose => {
            let nd = x.ndim();
            if nd < 2 {
                return Err(mismatch("transpose", &[x.shape()]));
            }
            let mut axes: Vec<usize> = (0..nd).collect();
            axes.swap(nd - 2, nd - 1);
            permute_data(x, &axes).into()
        }
        OpKind::Reshape(shape) => {
            if numel_of(shape) != x.numel() {
                return Err(mismatch("reshape", &[x.shape(), shape]));
            }
            Tensor::new(shape.clone(), x.data().to_vec())?.into()
        }
        OpKind::Permute(axes) => {
            let mut seen = vec![false; x.ndim()];
            let valid = axes.len() == x.ndim()
                && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(mismatch("permute", &[x.shape(), axes]));
            }
            permute_data(x, axes).into()
        }
        OpKind::Concat { axis } => {
            let axis = *axis;
            let first = x.shape();
            if axis >= first.len() {
                return Err(mismatch("concat", &[first]));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
                    return Err(mismatch("concat", &shapes));
                }
                total += s[axis];
            }
            let mut shape = first.to_vec();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(numel_of(&shape));
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(shape, data)?.into()
        }
        OpKind::IndexSelect { axis, indices } => {
            let axis = *axis;
            if axis >= x.ndim() || indices.iter().any(|&i| i >= x.shape()[axis]) {
                return Err(mismatch("index_select", &[x.shape(), indices]));
            }
            let (outer, dim, inner) = axis_split(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape[axis] = indices.len();
            let mut data = Vec::with_capacity(numel_of(&shape));
            for o in 0..outer {
                for &i in indices {
                    let start = (o * dim + i) * inner;
                    data.extend_from_slice(&x.data()[start..start + inner]);
                }
            }
            Tensor::new(shape, data)?.into()
        }
        OpKind::GatherRows { indices } => {
            let s = x.shape();
            let k = indices.first().map_or(0, Vec::len);
            let valid = s.len() >= 2
                && indices.len() == s[0]
                && indices.iter().all(|row| row.len() == k && row.iter().all(|&i| i < s[1]));
            if !valid {
                return Err(mismatch("gather_rows", &[s]));
            }
            let inner = numel_of(&s[2..]);
            let mut shape = s.to_vec();
            shape[1] = k;
            let mut data = Vec::with_capacity(numel_of(&shape));
            for (b, row) in indices.iter().enumerate() {
                for &i in row {
                    let start = (b * s[1] + i) * inner;
                    data.extend_from_slice(&x.data()[start..start + inner]);
                }
            }
            Tensor::new(shape, data)?.into()
        }
        OpKind::Expand(leading) => {
            let reps = numel_of(leading);
            let mut shape = leading.clone();
            shape.extend_from_slice(x.shape());
            let mut data = Vec::with_capacity(reps * x.numel());
            for _ in 0..reps {
                data.extend_from_slice(x.data());
            }
            Tensor::new(shape, data)?.into()
        }
        OpKind::Softmax => {
            check_rows("softmax", x)?;
            row_apply(x, |src, dst| {
                let m = row_max(src);
                let mut total = T::zero();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - m).exp();
                    total += *d;
                }
                for d in dst.iter_mut() {
                    *d = *d / total;
                }
            })
            .into()
        }
        OpKind::LogSoftmax => {
            check_rows("log_softmax", x)?;
            row_apply(x, |src, dst| {
                let m = row_max(src);
                let lse = m + src.iter().map(|&s| (s - m).exp()).sum::<T>().ln();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            })
            .into()
        }
        OpKind::Normalize { eps } => {
            check_rows("normalize", x)?;
            if *eps <= 0.0 {
                return Err(Error::InvalidArgument("normalize eps must be positive".into()));
            }
            let eps = T::of(*eps);
            let d = *x.shape().last().unwrap();
            let inv_d = T::one() / T::of(d as f64);
            let mut rstd = Vec::with_capacity(x.numel() / d);
            let value = row_apply(x, |src, dst| {
                let mean = src.iter().copied().sum::<T>() * inv_d;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - mean) * r;
                }
            });
            Forward {
                value,
                saved: Some(rstd),
            }
        }
        OpKind::Gelu => x.map(gelu_scalar).into(),
        OpKind::Exp => x.map(T::exp).into(),
        OpKind::Log => x.map(T::ln).into(),
        OpKind::Pow(p) => {
            let p = T::of(*p);
            x.map(|v| v.powf(p)).into()
        }
        OpKind::Sum => Tensor::scalar(x.data().iter().copied().sum()).into(),
        OpKind::Mean => {
            let n = T::of(x.numel().max(1) as f64);
            Tensor::scalar(x.data().iter().copied().sum::<T>() / n).into()
        }
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) => {
            let axis = *axis;
            if axis >= x.ndim() {
                return Err(mismatch(kind.name(), &[x.shape()]));
            }
            let (outer, dim, inner) = axis_split(x.shape(), axis);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..dim {
                    let src = &x.data()[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                    for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if matches!(kind, OpKind::MeanAxis(_)) && dim > 0 {
                let inv = T::one() / T::of(dim as f64);
                data.iter_mut().for_each(|v| *v = *v * inv);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)?.into()
        }
    })
}

fn check_rows<T: Float>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.ndim() == 0 || x.shape()[x.ndim() - 1] == 0 {
        return Err(mismatch(op, &[x.shape()]));
    }
    Ok(())
}

/// Sums `g` (of length `out_len`) down to a tiled operand of length `len`.
fn reduce_tiles<T: Float>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut acc = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    acc
}

/// Vector-Jacobian products for each input; `None` where not requested.
pub(crate) fn backward<T: Float>(
    kind: &OpKind,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: Option<&[T]>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let x = inputs[0];
    let g = grad.data();
    let same = |data: Vec<T>, like: &Tensor<T>| Tensor::new(like.shape().to_vec(), data).expect("grad shape");
    let mut out: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    match kind {
        OpKind::MatMul | OpKind::MatMulNt => {
            let nt = matches!(kind, OpKind::MatMulNt);
            let b = inputs[1];
            let d = matmul_dims(x.shape(), b.shape(), nt).expect("validated in forward");
            let (b_rows, b_cols) = if nt { (d.n, d.k) } else { (d.k, d.n) };
            if d.shared_rhs {
                let rows = d.batch * d.m;
                let gv = MatView::new(g, rows, d.n);
                if needs[0] {
                    // dA = dC · op(B)ᵀ
                    let bv = MatView::new(b.data(), b_rows, b_cols);
                    let bt = if nt { bv } else { bv.t() };
                    let mut da = vec![T::zero(); x.numel()];
                    gemm(gv, bt, T::zero(), &mut da);
                    out[0] = Some(same(da, x));
                }
                if needs[1] {
                    let av = MatView::new(x.data(), rows, d.k);
                    let mut db = vec![T::zero(); b.numel()];
                    if nt {
                        gemm(gv.t(), av, T::zero(), &mut db);
                    } else {
                        gemm(av.t(), gv, T::zero(), &mut db);
                    }
                    out[1] = Some(same(db, b));
                }
            } else {
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                let mut da = needs[0].then(|| vec![T::zero(); x.numel()]);
                let mut db = needs[1].then(|| vec![T::zero(); b.numel()]);
                for i in 0..d.batch {
                    let gv = MatView::new(&g[i * sc..(i + 1) * sc], d.m, d.n);
                    if let Some(da) = da.as_mut() {
                        let bv = MatView::new(&b.data()[i * sb..(i + 1) * sb], b_rows, b_cols);
                        let bt = if nt { bv } else { bv.t() };
                        gemm(gv, bt, T::zero(), &mut da[i * sa..(i + 1) * sa]);
                    }
                    if let Some(db) = db.as_mut() {
                        let av = MatView::new(&x.data()[i * sa..(i + 1) * sa], d.m, d.k);
                        let dst = &mut db[i * sb..(i + 1) * sb];
                        if nt {
                            gemm(gv.t(), av, T::zero(), dst);
                        } else {
                            gemm(av.t(), gv, T::zero(), dst);
                        }
                    }
                }
                out[0] = da.map(|v| same(v, x));
                out[1] = db.map(|v| same(v, b));
            }
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b = inputs[1];
            let (la, lb) = (x.numel(), b.numel());
            if needs[0] {
                let full: Vec<T> = match kind {
                    OpKind::Mul => zip_tiled(g, b.data(), g.len(), |u, v| u * v),
                    _ => g.to_vec(),
                };
                out[0] = Some(same(reduce_tiles(&full, la), x));
            }
            if needs[1] {
                let full: Vec<T> = match kind {
                    OpKind::Mul => zip_tiled(g, x.data(), g.len(), |u, v| u * v),
                    OpKind::Sub => g.iter().map(|&gi| -gi).collect(),
                    _ => g.to_vec(),
                };
                out[1] = Some(same(reduce_tiles(&full, lb), b));
            }
        }
        OpKind::Scale(c) => {
            let c = T::of(*c);
            out[0] = Some(grad.map(|v| v * c));
        }
        OpKind::AddScalar(_) => out[0] = Some(grad.clone()),
        OpKind::Transpose => {
            let nd = x.ndim();
            let mut axes: Vec<usize> = (0..nd).collect();
            axes.swap(nd - 2, nd - 1);
            out[0] = Some(permute_data(grad, &axes));
        }
        OpKind::Reshape(_) => out[0] = Some(same(g.to_vec(), x)),
        OpKind::Permute(axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            out[0] = Some(permute_data(grad, &inverse));
        }
        OpKind::Concat { axis } => {
            let (outer, _, inner) = axis_split(output.shape(), *axis);
            let total = output.shape()[*axis];
            let mut offset = 0;
            for (slot, t) in inputs.iter().enumerate() {
                let width = t.shape()[*axis];
                if needs[slot] {
                    let mut data = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        data.extend_from_slice(&g[start..start + width * inner]);
                    }
                    out[slot] = Some(same(data, t));
                }
                offset += width;
            }
        }
        OpKind::IndexSelect { axis, indices } => {
            let (outer, dim, inner) = axis_split(x.shape(), *axis);
            let mut data = vec![T::zero(); x.numel()];
            let k = indices.len();
            for o in 0..outer {
                for (j, &i) in indices.iter().enumerate() {
                    let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                    let dst = &mut data[(o * dim + i) * inner..(o * dim + i + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            out[0] = Some(same(data, x));
        }
        OpKind::GatherRows { indices } => {
            let s = x.shape();
            let inner = numel_of(&s[2..]);
            let k = indices.first().map_or(0, Vec::len);
            let mut data = vec![T::zero(); x.numel()];
            for (b, row) in indices.iter().enumerate() {
                for (j, &i) in row.iter().enumerate() {
                    let src = &g[(b * k + j) * inner..(b * k + j + 1) * inner];
                    let dst = &mut data[(b * s[1] + i) * inner..(b * s[1] + i + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            out[0] = Some(same(data, x));
        }
        OpKind::Expand(_) => out[0] = Some(same(reduce_tiles(g, x.numel()), x)),
        OpKind::Softmax => {
            let d = *x.shape().last().unwrap();
            let mut data = vec![T::zero(); x.numel()];
            for ((y, gr), dst) in output.data().chunks(d).zip(g.chunks(d)).zip(data.chunks_mut(d)) {
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            out[0] = Some(same(data, x));
        }
        OpKind::LogSoftmax => {
            let d = *x.shape().last().unwrap();
            let mut data = vec![T::zero(); x.numel()];
            for ((y, gr), dst) in output.data().chunks(d).zip(g.chunks(d)).zip(data.chunks_mut(d)) {
                let total: T = gr.iter().copied().sum();
                for ((o, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                    *o = gi - yi.exp() * total;
                }
            }
            out[0] = Some(same(data, x));
        }
        OpKind::Normalize { .. } => {
            let d = *x.shape().last().unwrap();
            let rstd = saved.expect("normalize saves rstd");
            let inv_d = T::one() / T::of(d as f64);
            let mut data = vec![T::zero(); x.numel()];
            for (((y, gr), dst), &r) in output
                .data()
                .chunks(d)
                .zip(g.chunks(d))
                .zip(data.chunks_mut(d))
                .zip(rstd)
            {
                let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                let mean_gy = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                for ((o, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                    *o = r * (gi - mean_g - yi * mean_gy);
                }
            }
            out[0] = Some(same(data, x));
        }
        OpKind::Gelu => {
            out[0] = Some(same(
                x.data().iter().zip(g).map(|(&v, &gi)| gi * gelu_grad(v)).collect(),
                x,
            ))
        }
        OpKind::Exp => {
            out[0] = Some(same(output.data().iter().zip(g).map(|(&y, &gi)| gi * y).collect(), x))
        }
        OpKind::Log => out[0] = Some(same(x.data().iter().zip(g).map(|(&v, &gi)| gi / v).collect(), x)),
        OpKind::Pow(p) => {
            let pt = T::of(*p);
            let pm1 = T::of(p - 1.0);
            out[0] = Some(same(
                x.data().iter().zip(g).map(|(&v, &gi)| gi * pt * v.powf(pm1)).collect(),
                x,
            ))
        }
        OpKind::Sum => out[0] = Some(Tensor::full(x.shape(), g[0])),
        OpKind::Mean => {
            let n = T::of(x.numel().max(1) as f64);
            out[0] = Some(Tensor::full(x.shape(), g[0] / n));
        }
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) => {
            let (outer, dim, inner) = axis_split(x.shape(), *axis);
            let scale = if matches!(kind, OpKind::MeanAxis(_)) && dim > 0 {
                T::one() / T::of(dim as f64)
            } else {
                T::one()
            };
            let mut data = Vec::with_capacity(x.numel());
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for _ in 0..dim {
                    data.extend(src.iter().map(|&v| v * scale));
                }
            }
            out[0] = Some(same(data, x));
        }
    }
    out
}
