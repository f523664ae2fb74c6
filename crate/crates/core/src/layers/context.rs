use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Float, GradientMap, Tape, Tensor, Var};

struct DropPath {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Per-step forward state: the tape, every parameter bound as a leaf, and the
/// stochastic-depth stream.
pub struct Ctx<T> {
    pub tape: Tape<T>,
    params: Vec<Var>,
    drop_path: Option<DropPath>,
    capture: bool,
}

impl<T: Float> Ctx<T> {
    /// Binds every parameter of `store` onto a fresh tape.
    pub fn new(store: &ParamStore<T>, requires_grad: bool) -> Self {
        let mut tape = Tape::new();
        let params = store.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect();
        Self {
            tape,
            params,
            drop_path: None,
            capture: false,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    /// Enables stochastic depth with its own seeded stream; `rate == 0` disables it.
    pub fn set_drop_path(&mut self, rate: f64, seed: u64) {
        self.drop_path = (rate > 0.0).then(|| DropPath {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
    }

    pub fn clear_drop_path(&mut self) {
        self.drop_path = None;
    }

    /// Attention maps are copied out of forward passes only when set.
    pub fn set_capture(&mut self, capture: bool) {
        self.capture = capture;
    }

    pub fn capture(&self) -> bool {
        self.capture
    }

    /// Drops the residual branch `x` ([B, ..]) per sample with the configured
    /// rate and rescales survivors; identity when disabled.
    pub fn drop_path(&mut self, x: Var) -> Result<Var> {
        let Some(dp) = self.drop_path.as_mut() else {
            return Ok(x);
        };
        let shape = self.tape.shape(x).to_vec();
        let batch = shape[0];
        let per_sample = shape[1..].iter().product::<usize>();
        let keep = 1.0 - dp.rate;
        let factors: Vec<f64> = (0..batch)
            .map(|_| if dp.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_fn(&shape, |i| T::of(factors[i / per_sample]));
        let mask = self.tape.constant(mask);
        self.tape.mul(x, mask)
    }

    /// Gradients per parameter, in store order.
    pub fn param_grads(&self, grads: &GradientMap<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)))
            })
            .collect()
    }
}
