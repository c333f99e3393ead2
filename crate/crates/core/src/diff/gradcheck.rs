//! Central finite-difference gradient verification.

use super::{backward, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compare the analytic gradient of a scalar function against central finite
/// differences, coordinate by coordinate, and return the worst relative error.
///
/// `f` must be deterministic: it is re-evaluated on a fresh tape for every
/// perturbed coordinate. The relative error uses `max(|analytic|, |numeric|,
/// 1e-8)` as denominator.
pub fn grad_check<E, F>(f: &F, inputs: &[Tensor<E>], step: f64) -> Result<f64>
where
    E: Scalar,
    F: Fn(&Tape<E>, &[Var<E>]) -> Result<Var<E>>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }

    let eval = |tensors: &[Tensor<E>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<E>> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let y = f(&tape, &vars)?;
        let v = y.item_f64()?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("grad_check function returned {v}")));
        }
        Ok(v)
    };

    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var<E>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&tape, &vars)?;
    if y.numel() != 1 {
        return Err(Error::invalid("grad_check requires a scalar function"));
    }
    if !y.item_f64()?.is_finite() {
        return Err(Error::numeric("grad_check function is non-finite at the base point"));
    }
    backward(&y)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| v.grad().to_f64_vec()).collect();

    // Central differences.
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<E>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + E::from_f64(step);
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - E::from_f64(step);
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
