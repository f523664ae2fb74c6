#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssat_core::layers::{Ctx, ParamStore};
use ssat_core::tensor::{Tensor, Var};
use ssat_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Loss value and flat gradient of `f` over every parameter in `store`.
pub fn value_and_grad<F>(store: &ParamStore<f64>, f: &F) -> (f64, Vec<f64>)
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, true);
    let loss = f(&mut ctx).unwrap();
    let value = ctx.tape.value(loss).item().unwrap();
    let grads = ctx.tape.backward(loss).unwrap();
    let flat = ctx
        .param_grads(&grads)
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();
    (value, flat)
}

fn value_only<F>(store: &ParamStore<f64>, f: &F) -> f64
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, false);
    let loss = f(&mut ctx).unwrap();
    ctx.tape.value(loss).item().unwrap()
}

/// Central-difference oracle over every scalar in the store:
/// max |analytic - numeric| / max(1, |analytic|).
pub fn store_gradient_error<F>(store: &ParamStore<f64>, f: F, eps: f64) -> f64
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(store, &f);
    let base = store.flatten();
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + eps;
        probe.set_flat(&x).unwrap();
        let fp = value_only(&probe, &f);
        x[i] = base[i] - eps;
        probe.set_flat(&x).unwrap();
        let fm = value_only(&probe, &f);
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    worst
}

/// Scalar reduction through a fixed random projection.
pub fn project(ctx: &mut Ctx<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = random(ctx.tape.shape(out), &mut r);
    let w = ctx.tape.constant(w);
    let p = ctx.tape.mul(out, w)?;
    ctx.tape.sum(p)
}
