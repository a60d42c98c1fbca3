//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂)` over all checked entries.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Compares reverse-mode gradients of a scalar function against central differences.
///
/// `f` rebuilds the computation on a fresh tape from leaves holding `inputs`
/// and returns the scalar output. Every input is perturbed entry by entry with
/// step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut probe = inputs.to_vec();
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let mut entries = 0;
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let orig = t.data()[k];
            probe[ti].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][k];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            entries += 1;
        }
    }
    let denom = a2.sqrt() + n2.sqrt();
    let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheck {
        rel_error,
        max_abs_error: max_abs,
        entries,
    })
}

/// `Σ out ⊙ weights`: turns a tensor-valued op into a scalar with a generic Jacobian probe.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let reshaped = if tape.value(out).shape() == weights.shape() {
        out
    } else {
        tape.reshape(out, weights.shape())?
    };
    let prod = tape.mul(reshaped, w)?;
    tape.sum(prod)
}
