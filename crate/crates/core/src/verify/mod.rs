//! Self-verification on synthetic inputs: layer equivariance, agreement with
//! the direct reference formulas, finite-difference gradients and the routing
//! invariants.

pub mod cases;
pub mod reference;

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsules::{degree_score, global_con_norm, route, ConvCaps};
use crate::error::Result;
use crate::group::{act_on_group_field, act_on_scalar_field, GroupElement};
use crate::layers::{correlate, group_plan, lifting_plan, BlockSpec, Domain};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{grad_check, Array, PatchPlan, Real, Tape};

/// Builds the patch plan of a group filter from its input channels and
/// kernel size, as [`group_plan`] does.
pub type GroupPlanner = fn(usize, usize) -> PatchPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    fn pick(self, fast: usize, full: usize) -> usize {
        match self {
            Self::Fast => fast,
            Self::Full => full,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub level: Level,
    pub seed: u64,
    /// Plan builder used for group correlation in the equivariance checks.
    pub group_plan: GroupPlanner,
}

impl Options {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            seed: 0,
            group_plan,
        }
    }
}

/// One measured quantity. Checks without a threshold are informational and
/// always pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub threshold: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn bounded(name: impl Into<String>, error: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            error,
            threshold: Some(threshold),
            passed: error < threshold,
        }
    }

    pub fn info(name: impl Into<String>, error: f64) -> Self {
        Self {
            name: name.into(),
            error,
            threshold: None,
            passed: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub level: Level,
    pub seed: u64,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

/// Runs every check at the requested level.
pub fn run(options: &Options) -> Result<Report> {
    let start = Instant::now();
    let mut checks = Vec::new();
    checks.extend(equivariance(options)?);
    checks.extend(oracles(options)?);
    checks.extend(gradients(options.level)?);
    checks.extend(routing_invariants(options)?);
    checks.extend(model_equivariance(options)?);
    checks.extend(strided_precaps(options)?);
    Ok(Report {
        level: options.level,
        seed: options.seed,
        passed: checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    })
}

fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Array<T> {
    Array::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0)))
}

fn correlate_with<T: Real>(x: &Array<T>, w: &Array<T>, plan: PatchPlan, domain: Domain, stride: usize) -> Result<Array<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let out = correlate(&mut tape, xv, wv, None, &Rc::new(plan), domain, stride)?;
    Ok(tape.value(out).clone())
}

/// Lifting correlation of `x: [B, C, H, W]` with `w: [O, C, k, k]`.
pub fn lift<T: Real>(x: &Array<T>, w: &Array<T>, stride: usize) -> Result<Array<T>> {
    let s = w.shape();
    correlate_with(x, w, lifting_plan(s[1], s[3]), Domain::Plane, stride)
}

/// Group correlation of `x: [B, C, 4, H, W]` with `w: [O, C, 4, k, k]`
/// through the given plan builder.
pub fn group<T: Real>(x: &Array<T>, w: &Array<T>, stride: usize, planner: GroupPlanner) -> Result<Array<T>> {
    let s = w.shape();
    correlate_with(x, w, planner(s[1], s[4]), Domain::Group, stride)
}

/// Largest deviation of `f(L_g x)` from `L_g f(x)` over random inputs,
/// filters and all four rotations (32-bit), plus roto-translations of inputs
/// whose support keeps clear of the border.
pub fn equivariance(options: &Options) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let pairs = options.level.pick(20, 200);
    let (mut lift_err, mut group_err) = (0.0f64, 0.0f64);
    let (mut shift_lift, mut shift_group) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let n = rng.gen_range(2..=9);
        let (c, o) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x: Array<f32> = uniform(&mut rng, &[1, c, n, n]);
        let w: Array<f32> = uniform(&mut rng, &[o, c, k, k]);
        let xg: Array<f32> = uniform(&mut rng, &[1, c, 4, n, n]);
        let wg: Array<f32> = uniform(&mut rng, &[o, c, 4, k, k]);
        let base = lift(&x, &w, 1)?;
        let base_g = group(&xg, &wg, 1, options.group_plan)?;
        for r in 0..4 {
            let g = GroupElement::rotation(r);
            let moved = lift(&act_on_scalar_field(&g, &x), &w, 1)?;
            lift_err = lift_err.max(moved.max_abs_diff(&act_on_group_field(&g, &base)).as_f64());
            let moved = group(&act_on_group_field(&g, &xg), &wg, 1, options.group_plan)?;
            group_err = group_err.max(moved.max_abs_diff(&act_on_group_field(&g, &base_g)).as_f64());
        }

        // support in the central block, with a margin covering the shift
        // plus the filter radius so that no value crosses the border
        let shift = rng.gen_range(0..=2i64);
        let margin = shift as usize + k / 2;
        let side = rng.gen_range(1..=4) + 2 * margin;
        let inside = |i: usize| (margin..side - margin).contains(&i);
        let mask = |k: usize| inside(k / side % side) && inside(k % side);
        let plane: Array<f32> = uniform::<f32>(&mut rng, &[1, c, side, side]);
        let plane = Array::from_fn(plane.shape(), |k| if mask(k) { plane.data()[k] } else { 0.0 });
        let field: Array<f32> = uniform::<f32>(&mut rng, &[1, c, 4, side, side]);
        let field = Array::from_fn(field.shape(), |k| if mask(k) { field.data()[k] } else { 0.0 });
        let g = GroupElement::new(
            rng.gen_range(0..4),
            rng.gen_range(-shift..=shift),
            rng.gen_range(-shift..=shift),
        );
        let base = lift(&plane, &w, 1)?;
        let moved = lift(&act_on_scalar_field(&g, &plane), &w, 1)?;
        shift_lift = shift_lift.max(moved.max_abs_diff(&act_on_group_field(&g, &base)).as_f64());
        let base = group(&field, &wg, 1, options.group_plan)?;
        let moved = group(&act_on_group_field(&g, &field), &wg, 1, options.group_plan)?;
        shift_group = shift_group.max(moved.max_abs_diff(&act_on_group_field(&g, &base)).as_f64());
    }
    Ok(vec![
        Check::bounded("equivariance: lift_correlation under rotations (f32)", lift_err, 1e-5),
        Check::bounded("equivariance: group_correlation under rotations (f32)", group_err, 1e-5),
        Check::bounded("equivariance: lift_correlation under roto-translations, interior (f32)", shift_lift, 1e-5),
        Check::bounded("equivariance: group_correlation under roto-translations, interior (f32)", shift_group, 1e-5),
    ])
}

/// Agreement of both correlations and a full ConvCaps layer with the direct
/// formulas in [`reference`] on small random instances (64-bit).
pub fn oracles(options: &Options) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);
    let instances = options.level.pick(10, 100);
    let (mut lift_err, mut group_err, mut caps_err, mut weight_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let (c, o, stride) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x: Array<f64> = uniform(&mut rng, &[1, c, h, w]);
        let f: Array<f64> = uniform(&mut rng, &[o, c, k, k]);
        lift_err = lift_err.max(lift(&x, &f, stride)?.max_abs_diff(&reference::lift(&x, &f, stride)));
        let x: Array<f64> = uniform(&mut rng, &[1, c, 4, h, w]);
        let f: Array<f64> = uniform(&mut rng, &[o, c, 4, k, k]);
        let fast = group(&x, &f, stride, group_plan)?;
        group_err = group_err.max(fast.max_abs_diff(&reference::group(&x, &f, stride)));

        let (nl, dl) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
        let (nj, d) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
        let per_type = rng.gen_bool(0.5);
        let mut params = ParamStore::<f64>::new();
        let layer = ConvCaps::new(&mut params, "caps", nl, dl, nj, d, 3, per_type, &mut rng)?;
        for id in [layer.gamma, layer.beta] {
            for v in params.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let caps: Array<f64> = uniform(&mut rng, &[1, nl, dl, 4, h, w]);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(caps.clone());
        let out = layer.forward(&mut tape, &p, xv)?;
        let (want, want_c) = reference::conv_caps(
            &caps,
            &reference::CapsLayer {
                predictor: params.get(layer.predictor.weight),
                gamma: params.get(layer.gamma).data(),
                beta: params.get(layer.beta).data(),
                out_types: nj,
                out_dims: d,
                per_type,
            },
        );
        caps_err = caps_err.max(tape.value(out.caps).max_abs_diff(&want));
        weight_err = weight_err.max(tape.value(out.weights).max_abs_diff(&want_c));
    }
    Ok(vec![
        Check::bounded("oracle: lift_correlation", lift_err, 1e-6),
        Check::bounded("oracle: group_correlation", group_err, 1e-6),
        Check::bounded("oracle: conv_caps_forward capsules", caps_err, 1e-6),
        Check::bounded("oracle: conv_caps_forward routing weights", weight_err, 1e-6),
    ])
}

/// Relative tolerance of the finite-difference checks.
pub const GRAD_TOL: f64 = 1e-4;

/// Finite-difference checks of every primitive and composed layer; the full
/// level covers every parameter of the end-to-end model.
pub fn gradients(level: Level) -> Result<Vec<Check>> {
    let mut all = cases::primitives();
    all.extend(cases::layers()?);
    all.extend(cases::model(level == Level::Full)?);
    all.into_iter()
        .map(|c| {
            let report = grad_check(&c.build, &c.at, GRAD_TOL)?;
            Ok(Check::bounded(format!("gradient: {}", c.name), report.max_rel_error, GRAD_TOL))
        })
        .collect()
}

/// Simplex, squash, rescaling and normalisation invariants on random
/// prediction tensors `[1, N, M, d, 4, h, w]`. Simplex and squash also see
/// magnitudes from 1e-6 to 1e6.
pub fn routing_invariants(options: &Options) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0xca95);
    let tensors = options.level.pick(100, 1000);
    let (mut simplex, mut max_norm, mut rescale) = (0.0f64, 0.0f64, 0.0f64);
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for _ in 0..tensors {
        let (n, m, d) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=5));
        let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let shape = [1, n, m, d, 4, h, w];
        let magnitude = 10f64.powf(rng.gen_range(-6.0..6.0));
        let unit = uniform::<f64>(&mut rng, &shape);
        let s = unit.map(|v| v * magnitude);

        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let c = degree_score(&mut tape, sv)?;
        let out = route(&mut tape, sv, c)?;
        let states = 4 * h * w;
        let weights = tape.value(c).data();
        for j in 0..m {
            for st in 0..states {
                let total: f64 = (0..n).map(|i| weights[(i * m + j) * states + st]).sum();
                simplex = simplex.max((total - 1.0).abs());
            }
        }
        let caps = tape.value(out).data();
        for j in 0..m {
            for st in 0..states {
                let sq: f64 = (0..d).map(|q| caps[(j * d + q) * states + st].powi(2)).sum();
                max_norm = max_norm.max(sq.sqrt());
            }
        }

        // rescale prediction vector (i, j, state) of the unit-scale tensor by α
        let (i, j, st) = (rng.gen_range(0..n), rng.gen_range(0..m), rng.gen_range(0..states));
        let alpha = 10f64.powf(rng.gen_range(-3.0..3.0));
        let mut scaled = unit.clone();
        for q in 0..d {
            scaled.data_mut()[((i * m + j) * d + q) * states + st] *= alpha;
        }
        let weights_of = |x: Array<f64>| -> Result<Array<f64>> {
            let mut tape = Tape::new();
            let v = tape.leaf(x);
            let c = degree_score(&mut tape, v)?;
            Ok(tape.value(c).clone())
        };
        rescale = rescale.max(weights_of(scaled)?.max_abs_diff(&weights_of(unit.clone())?));

        // unit affine, statistics over (i, p, g) for each j; unit-scale
        // input since the EPS under the root shrinks tiny variances
        let uv = tape.leaf(unit);
        let gamma = tape.leaf(Array::ones([1, 1, 1, d, 1, 1, 1]));
        let beta = tape.leaf(Array::zeros([1, 1, 1, d, 1, 1, 1]));
        let normed = global_con_norm(&mut tape, uv, gamma, beta, true)?;
        let y = tape.value(normed).data();
        for j in 0..m {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| (0..d * states).map(move |k| (i * m + j) * d * states + k))
                .map(|k| y[k])
                .collect();
            let count = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            mean_err = mean_err.max(mean.abs());
            var_err = var_err.max((var - 1.0).abs());
        }
    }
    Ok(vec![
        Check::bounded("routing: |sum_i c_ij - 1|", simplex, 1e-6),
        Check::bounded("routing: squash output norm (must stay below 1)", max_norm, 1.0),
        Check::bounded("routing: degree weights under rescaling of one prediction", rescale, 1e-6),
        Check::bounded("routing: GlobalConNorm per-type mean", mean_err, 1e-5),
        Check::bounded("routing: GlobalConNorm per-type variance - 1", var_err, 1e-5),
    ])
}

fn run_model<T: Real>(model: &Model, params: &ParamStore<T>, x: &Array<T>) -> Result<(Array<T>, Vec<Array<T>>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = model.forward(&mut tape, &p, xv)?;
    let routing = out.routing.iter().map(|&r| tape.value(r).clone()).collect();
    Ok((tape.value(out.scores).clone(), routing))
}

/// Architecture with every stride 1, used for the whole-model equivariance
/// check.
pub fn unstrided_config() -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        blocks: vec![BlockSpec { channels: 4, stride: 1 }, BlockSpec { channels: 6, stride: 1 }],
        capsule_types: 3,
        capsule_dims: 4,
        conv_caps_layers: 2,
        ..ModelConfig::default()
    }
}

/// Relative change of class scores and absolute deviation of permuted
/// routing weights when the input of an unstrided model is rotated (32-bit).
pub fn model_equivariance(options: &Options) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x30de1);
    let (mut score_err, mut routing_err) = (0.0f64, 0.0f64);
    for trial in 0..options.level.pick(1, 4) {
        let config = ModelConfig {
            no_projcaps: trial % 2 == 1,
            ..unstrided_config()
        };
        let (model, params) = Model::new::<f32>(&config, 1, 5, options.seed + trial as u64)?;
        let x = uniform::<f32>(&mut rng, &[2, 1, 9, 9]).map(|v| v * 0.5 + 0.5);
        let (scores, routing) = run_model(&model, &params, &x)?;
        let scale = scores.max_abs().as_f64().max(1e-12);
        for r in 1..4 {
            let g = GroupElement::rotation(r);
            let (moved, moved_routing) = run_model(&model, &params, &act_on_scalar_field(&g, &x))?;
            score_err = score_err.max(moved.max_abs_diff(&scores).as_f64() / scale);
            for (c, c_g) in routing.iter().zip(&moved_routing) {
                routing_err = routing_err.max(c_g.max_abs_diff(&act_on_group_field(&g, c)).as_f64());
            }
        }
    }
    Ok(vec![
        Check::bounded("model: relative class score change under rotation, unstrided (f32)", score_err, 1e-4),
        Check::bounded("model: routing weight permutation under rotation, unstrided (f32)", routing_err, 1e-5),
    ])
}

/// Relative equivariance error after the stem and after each residual block
/// of the default (strided) PreCaps on a 28×28 input. Reported only: the
/// strided blocks subsample off the rotation center.
pub fn strided_precaps(options: &Options) -> Result<Vec<Check>> {
    let config = ModelConfig::default();
    let (model, params) = Model::new::<f32>(&config, 1, 10, options.seed)?;
    let crate::model::Stem::Group(pre) = &model.stem else {
        unreachable!("default config has a group stem");
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x57de);
    let x = uniform::<f32>(&mut rng, &[1, 1, 28, 28]).map(|v| v * 0.5 + 0.5);
    let stages = |image: &Array<f32>| -> Result<Vec<Array<f32>>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(image.clone());
        let h = pre.stem.forward(&mut tape, &p, xv)?;
        let h = pre.stem_norm.forward(&mut tape, &p, h)?;
        let mut h = tape.relu(h);
        let mut out = vec![tape.value(h).clone()];
        for block in &pre.blocks {
            h = block.forward(&mut tape, &p, h)?;
            out.push(tape.value(h).clone());
        }
        Ok(out)
    };
    let base = stages(&x)?;
    let mut errors = vec![0.0f64; base.len()];
    for r in 1..4 {
        let g = GroupElement::rotation(r);
        let moved = stages(&act_on_scalar_field(&g, &x))?;
        for (e, (b, m)) in errors.iter_mut().zip(base.iter().zip(&moved)) {
            let scale = b.max_abs().as_f64().max(1e-12);
            *e = e.max(m.max_abs_diff(&act_on_group_field(&g, b)).as_f64() / scale);
        }
    }
    Ok(errors
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let stage = if i == 0 {
                "stem".to_string()
            } else {
                let spec = config.blocks[i - 1];
                format!("block {} (stride {})", i - 1, spec.stride)
            };
            Check::info(format!("strided PreCaps: relative equivariance error after {stage}"), e)
        })
        .collect())
}
