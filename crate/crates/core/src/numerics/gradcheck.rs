//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Largest per-component relative error between the tape gradient of
/// `f` at `x` and a central finite difference with step `delta`:
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node. It has to be deterministic: it is evaluated `2·len(x) + 1`
/// times.
pub fn grad_check<F>(f: F, x: &Tensor, delta: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), delta)
}

/// [`grad_check`] over several input tensors at once; the error is the
/// worst over every component of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], delta: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(delta > 0.0) {
        return contract(format!("grad_check: step must be positive, got {delta}"));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(xs)
            .map(|(&v, x)| match tape.grad(v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; x.len()],
            })
            .collect()
    };
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut probe = xs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..xs.len() {
        for (i, &a) in analytic[k].iter().enumerate() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + delta;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - delta;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * delta);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
