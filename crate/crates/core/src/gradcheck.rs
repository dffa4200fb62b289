//! Central finite-difference gradient checking against the tape.

use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f(inputs)` with central
/// differences of step `h`, rebuilding the graph for every perturbation.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
        rel_errors.push(if scale == 0.0 { diff } else { diff / scale });
    }
    Ok(GradReport { rel_errors })
}

/// [`check`] over every tensor of a parameter store, in name order.
pub fn check_store<F>(store: &ParamStore, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    check(&inputs, h, |tape, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        f(tape, &bound)
    })
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}
