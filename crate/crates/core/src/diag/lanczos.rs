use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extreme Ritz values of a symmetric operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    /// Largest values, descending.
    pub top: Vec<f64>,
    /// Smallest values, ascending.
    pub bottom: Vec<f64>,
    /// Negative Ritz values. Exact when the iterations span the whole
    /// space, otherwise an estimate from the extreme spectrum.
    pub negative_count_estimate: usize,
    pub negative_mean_magnitude: f64,
    /// All Ritz values, ascending.
    pub ritz: Vec<f64>,
    pub iterations: usize,
    pub dim: usize,
    /// True when the Krylov space became invariant before `iterations`.
    pub breakdown: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lanczos with full reorthogonalization from a seeded Gaussian start.
pub fn lanczos_spectrum(
    op: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<SpectrumSummary> {
    if k == 0 || k > iterations || iterations > dim {
        return Err(Error::InvalidArgument(format!(
            "lanczos needs 0 < k ({k}) <= iterations ({iterations}) <= dim ({dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|x| *x /= n0);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(iterations);
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut breakdown = false;
    for j in 0..iterations {
        let mut w = op(&q)?;
        if w.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "lanczos_spectrum",
                shapes: vec![vec![dim], vec![w.len()]],
            });
        }
        let a = dot(&w, &q);
        alpha.push(a);
        basis.push(q);
        // two Gram-Schmidt passes against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        if j + 1 == iterations {
            break;
        }
        let b = dot(&w, &w).sqrt();
        let scale = alpha.iter().chain(&beta).fold(1e-300f64, |m, v| m.max(v.abs()));
        if b <= 1e-10 * scale {
            breakdown = true;
            break;
        }
        beta.push(b);
        q = w.into_iter().map(|x| x / b).collect();
    }

    let m = alpha.len();
    let tri = nalgebra::DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let mut ritz: Vec<f64> = tri.symmetric_eigenvalues().iter().copied().collect();
    ritz.sort_by(f64::total_cmp);
    let kk = k.min(m);
    let top = ritz.iter().rev().take(kk).copied().collect();
    let bottom = ritz.iter().take(kk).copied().collect();
    let tol = 1e-9 * ritz.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let negatives: Vec<f64> = ritz.iter().copied().filter(|&v| v < -tol).collect();
    Ok(SpectrumSummary {
        top,
        bottom,
        negative_count_estimate: negatives.len(),
        negative_mean_magnitude: if negatives.is_empty() {
            0.0
        } else {
            negatives.iter().map(|v| v.abs()).sum::<f64>() / negatives.len() as f64
        },
        ritz,
        iterations: m,
        dim,
        breakdown,
    })
}
