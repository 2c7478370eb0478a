use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::tape::{Tape, Var};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that components whose true
/// gradient is ~0 are compared absolutely at this scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn scalar_of(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check: builder must produce a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar-valued graph `build` at `x`
/// against central finite differences, component by component.
pub fn grad_check<F>(build: F, x: &Array<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = build(&mut tape, input)?;
    scalar_of(&tape, out)?;
    let seed = Array::ones(tape.shape(out));
    let grads = tape.backward(out, seed)?;
    let analytic = grads
        .get(input)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Array<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf(probe);
        let out = build(&mut tape, input)?;
        scalar_of(&tape, out)
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_index = i;
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tolerance: tol,
    })
}
