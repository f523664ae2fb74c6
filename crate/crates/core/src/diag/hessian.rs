use crate::error::{Error, Result};
use crate::layers::{Ctx, ParamStore};
use crate::tensor::Var;

/// Largest parameter count `dense_hessian` accepts.
pub const DENSE_HESSIAN_LIMIT: usize = 2000;

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Loss over every parameter of a 64-bit store.
pub struct StoreObjective<F> {
    store: ParamStore<f64>,
    loss: F,
}

impl<F> StoreObjective<F>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    pub fn new(store: ParamStore<f64>, loss: F) -> Self {
        Self { store, loss }
    }

    pub fn params(&self) -> Vec<f64> {
        self.store.flatten()
    }
}

impl<F> Objective for StoreObjective<F>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    fn dim(&self) -> usize {
        self.store.numel()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut store = self.store.clone();
        store.set_flat(theta)?;
        let mut ctx = Ctx::new(&store, true);
        let loss = (self.loss)(&mut ctx)?;
        let value = ctx.tape.value(loss).item().ok_or_else(|| Error::NonScalarLoss(ctx.tape.shape(loss).to_vec()))?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        let grads = ctx.tape.backward(loss)?;
        let flat = ctx.param_grads(&grads).iter().flat_map(|g| g.data().to_vec()).collect();
        Ok((value, flat))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Step used for a unit direction: `fd_eps` scaled by the RMS parameter
/// magnitude (at least 1).
fn step_size(theta: &[f64], fd_eps: f64) -> f64 {
    let rms = if theta.is_empty() { 0.0 } else { norm(theta) / (theta.len() as f64).sqrt() };
    fd_eps * rms.max(1.0)
}

/// `H v` by central differences of gradients along `v / ‖v‖`, rescaled by `‖v‖`.
pub fn hessian_vector_product(obj: &dyn Objective, theta: &[f64], v: &[f64], fd_eps: f64) -> Result<Vec<f64>> {
    if theta.len() != obj.dim() || v.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            op: "hessian_vector_product",
            shapes: vec![vec![obj.dim()], vec![theta.len()], vec![v.len()]],
        });
    }
    if !(fd_eps > 0.0) {
        return Err(Error::InvalidArgument(format!("fd_eps {fd_eps} must be positive")));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = step_size(theta, fd_eps);
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sign * h * d / vn).collect() };
    let (_, gp) = obj.value_and_grad(&shifted(1.0))?;
    let (_, gm) = obj.value_and_grad(&shifted(-1.0))?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * vn / (2.0 * h)).collect())
}

/// Row-major symmetric Hessian with the asymmetry measured before
/// symmetrizing.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHessian {
    pub dim: usize,
    pub values: Vec<f64>,
    /// `max |H_ij − H_ji|` of the raw difference quotients.
    pub asymmetry: f64,
}

impl DenseHessian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, j)).collect()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.values);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Exact count of eigenvalues below `-tol`.
    pub fn negative_count(&self, tol: f64) -> usize {
        self.eigenvalues().iter().filter(|&&e| e < -tol).count()
    }
}

/// Full Hessian, one gradient-difference column per parameter.
pub fn dense_hessian(obj: &dyn Objective, theta: &[f64], fd_eps: f64) -> Result<DenseHessian> {
    let n = theta.len();
    if n > DENSE_HESSIAN_LIMIT {
        return Err(Error::HessianGuard {
            count: n,
            limit: DENSE_HESSIAN_LIMIT,
        });
    }
    let mut raw = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = hessian_vector_product(obj, theta, &e, fd_eps)?;
        e[j] = 0.0;
        for (i, c) in col.into_iter().enumerate() {
            raw[i * n + j] = c;
        }
    }
    let mut values = vec![0.0; n * n];
    let mut asymmetry = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (raw[i * n + j], raw[j * n + i]);
            asymmetry = asymmetry.max((a - b).abs());
            values[i * n + j] = 0.5 * (a + b);
        }
    }
    Ok(DenseHessian { dim: n, values, asymmetry })
}
