//! Finite-difference gradient verification.
//!
//! `check_gradients` compares the tape's reverse-mode gradients against
//! central differences computed through gradient-free re-evaluation, so the
//! numeric side never touches the backward implementation it is checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar-valued function, over every coordinate of every input.
///
/// The function is invoked once on a recording tape for the analytic side and
/// `2 * numel` times on inference tapes for the numeric side. Relative error
/// per coordinate is `|analytic - central| / max(1, |central|)`.
pub fn check_gradients<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Usage("finite-difference step must be positive".into()));
    }

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item().map_err(|_| {
            Error::Usage("check_gradients requires a scalar-valued function".into())
        })
    };

    // Analytic gradients.
    let mut tape = Tape::recording();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Usage(
            "check_gradients requires a scalar-valued function".into(),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    // Central differences, one coordinate at a time.
    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for ci in 0..t.numel() {
            let orig = t.data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let central = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let rel = (a - central).abs() / f64::max(1.0, central.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
