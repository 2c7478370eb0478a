//! Lifting (Z² → p4) and group (p4 → p4) correlations.
//!
//! Both evaluate `[f ⋆ F](x) = Σ_y Σ_k f_k(y) F_k(x⁻¹ y)`. Writing the output
//! rotation as `r` and the filter offset as `δ`, output frame `r` at site `x`
//! is `Σ_{s, δ} f_{s+r}(x + R_r δ) F_s(δ)`: every frame gathers its patch in
//! the filter's own frame and multiplies the unrotated filter. A rotated input
//! therefore yields the same patch columns in permuted order, and the outputs
//! agree bit for bit.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::group::{rotate_vector, ROTATIONS};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{PatchPlan, Real, Tap, Tape, Var};

/// Whether the correlation consumes a planar or a group field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Input `[B, C, H, W]`, filter `[O, C, k, k]`.
    Plane,
    /// Input `[B, C, 4, H, W]`, filter `[O, C, 4, k, k]`.
    Group,
}

/// Offset `R_r δ` of filter tap `(a, b)` of a `k×k` filter.
fn rotated_offset(r: usize, a: usize, b: usize, k: usize) -> (isize, isize) {
    let c = (k / 2) as i64;
    let (dx, dy) = rotate_vector(r as u8, b as i64 - c, a as i64 - c);
    (dy as isize, dx as isize)
}

/// Patch plan of a lifting filter `[O, C, k, k]`.
pub fn lifting_plan(in_ch: usize, k: usize) -> PatchPlan {
    let mut taps = Vec::with_capacity(ROTATIONS * in_ch * k * k);
    for r in 0..ROTATIONS {
        for channel in 0..in_ch {
            for a in 0..k {
                for b in 0..k {
                    let (dy, dx) = rotated_offset(r, a, b, k);
                    taps.push(Tap { channel, dy, dx });
                }
            }
        }
    }
    PatchPlan::new(ROTATIONS, in_ch * k * k, taps)
}

/// Patch plan of a group filter `[O, C, 4, k, k]` over the input viewed as
/// `[B, C*4, H, W]`.
pub fn group_plan(in_ch: usize, k: usize) -> PatchPlan {
    let mut taps = Vec::with_capacity(ROTATIONS * in_ch * ROTATIONS * k * k);
    for r in 0..ROTATIONS {
        for c in 0..in_ch {
            for s in 0..ROTATIONS {
                let channel = c * ROTATIONS + (s + r) % ROTATIONS;
                for a in 0..k {
                    for b in 0..k {
                        let (dy, dx) = rotated_offset(r, a, b, k);
                        taps.push(Tap { channel, dy, dx });
                    }
                }
            }
        }
    }
    PatchPlan::new(ROTATIONS, in_ch * ROTATIONS * k * k, taps)
}

/// Correlates `input` with `weight` through `plan`.
///
/// `input` is `[B, C, H, W]` (plane) or `[B, C, 4, H, W]` (group); the result
/// is `[B, O, 4, Ho, Wo]` with `Ho = (H - 1) / stride + 1`.
#[allow(clippy::too_many_arguments)]
pub fn correlate<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    plan: &Rc<PatchPlan>,
    domain: Domain,
    stride: usize,
) -> Result<Var> {
    if stride == 0 {
        return Err(Error::invalid("correlation stride must be at least 1"));
    }
    let ws = tape.shape(weight).to_vec();
    let xs = tape.shape(input).to_vec();
    let in_ch = ws.get(1).copied().unwrap_or(0);
    let planar = match domain {
        Domain::Plane if xs.len() == 4 && ws.len() == 4 && xs[1] == in_ch => input,
        Domain::Group
            if xs.len() == 5 && ws.len() == 5 && xs[1] == in_ch && xs[2] == ROTATIONS =>
        {
            tape.reshape(input, &[xs[0], in_ch * ROTATIONS, xs[3], xs[4]])?
        }
        _ => {
            return Err(Error::ShapeMismatch {
                op: "group correlation",
                lhs: xs,
                rhs: ws,
            })
        }
    };
    let out = tape.correlate(planar, weight, plan.clone(), stride)?;
    match bias {
        Some(b) => tape.add(out, b),
        None => Ok(out),
    }
}

/// A filter bank for either correlation, with its cached patch plan.
#[derive(Debug, Clone)]
pub struct GroupConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub domain: Domain,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    plan: Rc<PatchPlan>,
}

impl GroupConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        name: &str,
        domain: Domain,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("{name}: kernel size {kernel} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid(format!("{name}: stride must be at least 1")));
        }
        let kk = kernel * kernel;
        let (shape, fan_in, plan) = match domain {
            Domain::Plane => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kk,
                lifting_plan(in_channels, kernel),
            ),
            Domain::Group => (
                vec![out_channels, in_channels, ROTATIONS, kernel, kernel],
                in_channels * ROTATIONS * kk,
                group_plan(in_channels, kernel),
            ),
        };
        let weight = params.register_normal(format!("{name}.weight"), &shape, fan_in, rng);
        let bias = bias.then(|| {
            params.register(
                format!("{name}.bias"),
                crate::tensor::Array::zeros([1, out_channels, 1, 1, 1]),
            )
        });
        Ok(Self {
            weight,
            bias,
            domain,
            in_channels,
            out_channels,
            kernel,
            stride,
            plan: Rc::new(plan),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        correlate(
            tape,
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            &self.plan,
            self.domain,
            self.stride,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Array;

    #[test]
    fn rotated_offsets_turn_counterclockwise() {
        // tap (1, 2) is δ = (+1, 0); a quarter turn moves it to δ = (0, +1)
        assert_eq!(rotated_offset(0, 1, 2, 3), (0, 1));
        assert_eq!(rotated_offset(1, 1, 2, 3), (1, 0));
        assert_eq!(rotated_offset(2, 1, 2, 3), (0, -1));
        assert_eq!(rotated_offset(1, 0, 0, 3), (-1, 1));
    }

    #[test]
    fn group_plan_cycles_the_input_rotation() {
        let plan = group_plan(2, 1);
        // row (c = 1, s = 3) in frame 2 reads rotation plane 1 of channel 1
        assert_eq!(plan.tap(2, 7), Tap { channel: 5, dy: 0, dx: 0 });
        assert_eq!(plan.channels(), 8);
    }

    #[test]
    fn one_by_one_lifting_scales_every_rotation() {
        let mut tape = Tape::<f64>::new();
        let x = Array::from_fn([1, 1, 3, 3], |i| i as f64 - 4.0);
        let xv = tape.leaf(x.clone());
        let w = tape.leaf(Array::full([1, 1, 1, 1], 2.0));
        let plan = Rc::new(lifting_plan(1, 1));
        let out = correlate(&mut tape, xv, w, None, &plan, Domain::Plane, 1).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 4, 3, 3]);
        for r in 0..4 {
            for i in 0..9 {
                assert_eq!(tape.value(out).at(&[0, 0, r, i / 3, i % 3]), 2.0 * x.data()[i]);
            }
        }
    }

    #[test]
    fn stride_zero_and_channel_mismatch_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(Array::zeros([1, 2, 4, 4]));
        let w = tape.leaf(Array::zeros([1, 3, 3, 3]));
        let plan = Rc::new(lifting_plan(3, 3));
        assert!(correlate(&mut tape, xv, w, None, &plan, Domain::Plane, 1).is_err());
        let w = tape.leaf(Array::zeros([1, 2, 3, 3]));
        let plan = Rc::new(lifting_plan(2, 3));
        assert!(correlate(&mut tape, xv, w, None, &plan, Domain::Plane, 0).is_err());
    }
}
