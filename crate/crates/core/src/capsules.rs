//! Capsule layers over p4: primary capsules, convolutional capsules with
//! normalised degree-centrality routing, and the projection head.
//!
//! Capsule fields are `[B, N, d, 4, H, W]` and prediction tensors are
//! `[B, N_l, N_{l+1}, d', 4, H, W]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{standardize, Domain, GroupConv, LayerNorm};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Array, Real, Tape, Var};

fn dims<const N: usize>(tape: &Tape<impl Real>, x: Var, op: &'static str) -> Result<[usize; N]> {
    tape.shape(x).try_into().map_err(|_| Error::ShapeMismatch {
        op,
        lhs: tape.shape(x).to_vec(),
        rhs: vec![N],
    })
}

/// `v * ‖v‖ / (1 + ‖v‖²)` along `axis`, with `‖v‖ = sqrt(Σv² + EPS)`.
pub fn squash<T: Real>(tape: &mut Tape<T>, v: Var, axis: usize) -> Result<Var> {
    let sq = tape.square(v);
    let sumsq = tape.sum(sq, &[axis])?;
    let shifted = tape.offset(sumsq, T::eps());
    let norm = tape.sqrt(shifted);
    let denom = tape.offset(sumsq, T::one());
    let factor = tape.div(norm, denom)?;
    tape.mul(v, factor)
}

/// Degree-centrality routing weights for a prediction tensor:
/// `[B, Nl, Nl1, d, 4, H, W]` to `[B, Nl, Nl1, 4, H, W]`, where
/// `c_ij(g) = softmax_i(Σ_k cos(S_ij(g), S_kj(g)))`.
pub fn degree_score<T: Real>(tape: &mut Tape<T>, s: Var) -> Result<Var> {
    dims::<7>(tape, s, "degree score")?;
    tape.degree_softmax(s)
}

/// `squash(Σ_i c_ij(g) S_ij(g))`: prediction tensor and routing weights to a
/// capsule field `[B, Nl1, d, 4, H, W]`.
pub fn route<T: Real>(tape: &mut Tape<T>, s: Var, c: Var) -> Result<Var> {
    dims::<7>(tape, s, "route")?;
    tape.route_squash(s, c)
}

/// Standardises `s` per sample and deeper type (or per sample only when
/// `per_type` is false) over shallow types, dimensions and states, then applies
/// the per-dimension affine `gamma`, `beta` of shape `[1, 1, 1, d, 1, 1, 1]`.
pub fn global_con_norm<T: Real>(
    tape: &mut Tape<T>,
    s: Var,
    gamma: Var,
    beta: Var,
    per_type: bool,
) -> Result<Var> {
    dims::<7>(tape, s, "global context norm")?;
    let axes: &[usize] = if per_type {
        &[1, 3, 4, 5, 6]
    } else {
        &[1, 2, 3, 4, 5, 6]
    };
    let normed = standardize(tape, s, axes)?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

/// Group correlation producing `types * dims` channels per sample, regrouped
/// into capsules and layer-normalised across types, dimensions and rotations.
#[derive(Debug, Clone)]
pub struct PrimaryCaps {
    pub conv: GroupConv,
    pub norm: LayerNorm,
    pub types: usize,
    pub dims: usize,
}

impl PrimaryCaps {
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        in_channels: usize,
        types: usize,
        dims: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = GroupConv::new(
            params,
            "primary.conv",
            Domain::Group,
            in_channels,
            types * dims,
            3,
            1,
            true,
            rng,
        )?;
        let norm = LayerNorm::new(params, "primary.norm", &[1, types, dims, 1, 1, 1], &[1, 2, 3]);
        Ok(Self {
            conv,
            norm,
            types,
            dims,
        })
    }

    /// `[B, C, 4, H, W]` features to `[B, N, d, 4, H, W]` capsules.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let [b, _, r, h, w] = dims::<5>(tape, y, "primary caps")?;
        let caps = tape.reshape(y, &[b, self.types, self.dims, r, h, w])?;
        self.norm.forward(tape, p, caps)
    }
}

/// One convolutional capsule layer: predict, normalise, route.
#[derive(Debug, Clone)]
pub struct ConvCaps {
    /// Shared across shallow types; `out_types * out_dims` output channels.
    pub predictor: GroupConv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub in_types: usize,
    pub out_types: usize,
    pub out_dims: usize,
    pub per_type_norm: bool,
}

/// Output of a capsule layer together with its routing weights.
#[derive(Debug, Clone, Copy)]
pub struct Routed {
    pub caps: Var,
    pub weights: Var,
}

impl ConvCaps {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        name: &str,
        in_types: usize,
        in_dims: usize,
        out_types: usize,
        out_dims: usize,
        kernel: usize,
        per_type_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let predictor = GroupConv::new(
            params,
            &format!("{name}.predictor"),
            Domain::Group,
            in_dims,
            out_types * out_dims,
            kernel,
            1,
            false,
            rng,
        )?;
        let affine = [1, 1, 1, out_dims, 1, 1, 1];
        Ok(Self {
            predictor,
            gamma: params.register(format!("{name}.gamma"), Array::ones(affine)),
            beta: params.register(format!("{name}.beta"), Array::zeros(affine)),
            in_types,
            out_types,
            out_dims,
            per_type_norm,
        })
    }

    /// Prediction tensor `[B, Nl, Nl1, d', 4, H, W]` for capsules
    /// `[B, Nl, d, 4, H, W]`.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, caps: Var) -> Result<Var> {
        let [b, nl, d, r, h, w] = dims::<6>(tape, caps, "predict")?;
        if nl != self.in_types {
            return Err(Error::ShapeMismatch {
                op: "predict",
                lhs: tape.shape(caps).to_vec(),
                rhs: vec![self.in_types],
            });
        }
        let flat = tape.reshape(caps, &[b * nl, d, r, h, w])?;
        let s = self.predictor.forward(tape, p, flat)?;
        tape.reshape(s, &[b, nl, self.out_types, self.out_dims, r, h, w])
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, caps: Var) -> Result<Routed> {
        let s = self.predict(tape, p, caps)?;
        let s = global_con_norm(
            tape,
            s,
            p.var(self.gamma),
            p.var(self.beta),
            self.per_type_norm,
        )?;
        let weights = degree_score(tape, s)?;
        let caps = route(tape, s, weights)?;
        Ok(Routed { caps, weights })
    }
}

/// How class capsules are turned into logits.
#[derive(Debug, Clone)]
pub enum Head {
    /// Shared 1×1 group correlation to one channel, maximised over states.
    Projection(GroupConv),
    /// Capsule 2-norm maximised over states.
    Norm,
}

impl Head {
    pub fn projection<T: Real>(
        params: &mut ParamStore<T>,
        dims: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = GroupConv::new(params, "projcaps", Domain::Group, dims, 1, 1, 1, true, rng)?;
        Ok(Self::Projection(conv))
    }

    /// `[B, K, d, 4, H, W]` class capsules to `[B, K]` scores.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, caps: Var) -> Result<Var> {
        let [b, k, d, r, h, w] = dims::<6>(tape, caps, "class scores")?;
        let field = match self {
            Self::Projection(conv) => {
                let flat = tape.reshape(caps, &[b * k, d, r, h, w])?;
                conv.forward(tape, p, flat)?
            }
            Self::Norm => {
                let sq = tape.square(caps);
                let sumsq = tape.sum(sq, &[2])?;
                let sumsq = tape.offset(sumsq, T::eps());
                tape.sqrt(sumsq)
            }
        };
        let states = tape.reshape(field, &[b, k, r * h * w])?;
        let best = tape.max(states, &[2])?;
        tape.reshape(best, &[b, k])
    }
}

/// Index of the largest score in every row of `[B, K]`, lowest index on ties.
pub fn predictions<T: Real>(scores: &Array<T>) -> Vec<usize> {
    let k = scores.shape()[1];
    scores
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}
