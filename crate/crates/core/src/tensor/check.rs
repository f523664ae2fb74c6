use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares backward gradients of `f` at `point` against central finite
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// Multi-input form of [`finite_difference_check`]; every input is perturbed.
pub fn finite_difference_check_many<F>(f: F, points: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |inputs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape
            .value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(tape.shape(out).to_vec()))?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("function value {value}")));
        }
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(out)?;
        let gs = vars
            .iter()
            .map(|&v| grads.remove(v).expect("leaf gradient present"))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(points, true)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (slot, grad) in analytic.iter().enumerate() {
        for i in 0..points[slot].numel() {
            let x0 = points[slot].data()[i];
            probe[slot].data_mut()[i] = x0 + epsilon;
            let (fp, _) = eval(&probe, false)?;
            probe[slot].data_mut()[i] = x0 - epsilon;
            let (fm, _) = eval(&probe, false)?;
            probe[slot].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
