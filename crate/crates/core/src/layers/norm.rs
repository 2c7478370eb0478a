use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Array, Real, Tape, Var};

/// `gamma * (x - mean) / sqrt(var + EPS) + beta` with statistics taken over
/// `axes` (biased variance). `gamma` and `beta` broadcast against `x`.
pub fn layer_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    axes: &[usize],
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let normed = standardize(tape, x, axes)?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

/// `(x - mean) / sqrt(var + EPS)` over `axes`.
pub fn standardize<T: Real>(tape: &mut Tape<T>, x: Var, axes: &[usize]) -> Result<Var> {
    tape.standardize(x, axes)
}

/// Learnable affine pair together with the axes it normalises over.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axes: Vec<usize>,
}

impl LayerNorm {
    /// `affine_shape` must broadcast against the input; gamma starts at 1 and
    /// beta at 0.
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        name: &str,
        affine_shape: &[usize],
        axes: &[usize],
    ) -> Self {
        Self {
            gamma: params.register(format!("{name}.gamma"), Array::ones(affine_shape)),
            beta: params.register(format!("{name}.beta"), Array::zeros(affine_shape)),
            axes: axes.to_vec(),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        layer_norm(tape, x, &self.axes, p.var(self.gamma), p.var(self.beta))
    }
}
