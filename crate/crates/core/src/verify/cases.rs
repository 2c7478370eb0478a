//! Finite-difference cases for every tape primitive and the composed layers.
//!
//! Each case reduces its output to a scalar through a fixed pseudo-random
//! weighting so that no gradient component cancels by symmetry.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capsules::{ConvCaps, Head, PrimaryCaps};
use crate::error::Result;
use crate::layers::{BlockSpec, Domain, GroupConv, ResidualBlock};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Array, Tape, Var};
use crate::train::cross_entropy;

type Build = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// A scalar function of one array, checked at `at`.
pub struct GradCase {
    pub name: String,
    pub at: Array<f64>,
    pub build: Build,
}

/// Deterministic values spread over [-2, 2].
fn wave(shape: &[usize], phase: f64) -> Array<f64> {
    Array::from_fn(shape, |i| 2.0 * (i as f64 * 0.73 + phase).sin())
}

/// Values bounded away from zero, with distinct magnitudes.
fn separated(shape: &[usize], phase: f64) -> Array<f64> {
    Array::from_fn(shape, |i| {
        let v = 0.3 + 0.05 * i as f64 + 0.01 * phase;
        if (i as f64 * 1.3 + phase).sin() < 0.0 {
            -v
        } else {
            v
        }
    })
}

/// `Σ out ⊙ P` for a fixed weighting `P`.
fn probe(t: &mut Tape<f64>, out: Var) -> Result<Var> {
    let p = t.leaf(wave(t.shape(out), 0.41).map(|v| 0.5 * v + 0.2));
    let prod = t.mul(out, p)?;
    t.sum_all(prod)
}

fn case(
    name: impl Into<String>,
    at: Array<f64>,
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name: name.into(),
        at,
        build: Box::new(move |t, v| {
            let out = f(t, v)?;
            probe(t, out)
        }),
    }
}

type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;

/// Checks `op(x, other)` in `x` and `op(other, x)` in `x`.
fn both_sides(name: &str, op: Binary, lhs: Array<f64>, rhs: Array<f64>) -> [GradCase; 2] {
    let (l, r) = (lhs.clone(), rhs.clone());
    [
        case(format!("{name} (lhs)"), lhs, move |t, x| {
            let o = t.leaf(r.clone());
            op(t, x, o)
        }),
        case(format!("{name} (rhs)"), rhs, move |t, x| {
            let o = t.leaf(l.clone());
            op(t, o, x)
        }),
    ]
}

/// One case per tape primitive, both arguments for binary ones.
pub fn primitives() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let a = wave(&[2, 3], 0.1);
    cases.extend(both_sides("add", |t, x, y| t.add(x, y), a.clone(), wave(&[1, 3], 0.7)));
    cases.extend(both_sides("sub", |t, x, y| t.sub(x, y), wave(&[2, 1], 0.2), a.clone()));
    cases.extend(both_sides("mul", |t, x, y| t.mul(x, y), a.clone(), wave(&[2, 3], 1.9)));
    cases.extend(both_sides("div", |t, x, y| t.div(x, y), a.clone(), separated(&[2, 3], 0.5)));
    // a and b differ everywhere by 0.3, so no tie sits inside the stencil
    let b = Array::from_fn([2, 3], |i| a.data()[i] + if i % 2 == 0 { 0.3 } else { -0.3 });
    cases.extend(both_sides("maximum", |t, x, y| t.maximum(x, y), a.clone(), b));
    cases.extend(both_sides("matmul", |t, x, y| t.matmul(x, y), wave(&[2, 2, 3], 0.3), wave(&[2, 3, 4], 0.9)));

    let x = wave(&[2, 3, 4], 0.6);
    cases.push(case("scale", x.clone(), |t, v| Ok(t.scale(v, -1.7))));
    cases.push(case("neg", x.clone(), |t, v| Ok(t.neg(v))));
    cases.push(case("offset", x.clone(), |t, v| Ok(t.offset(v, 0.25))));
    cases.push(case("square", x.clone(), |t, v| Ok(t.square(v))));
    cases.push(case("exp", x.clone(), |t, v| Ok(t.exp(v))));
    cases.push(case("sqrt", x.map(|v| v.abs() + 0.2), |t, v| Ok(t.sqrt(v))));
    cases.push(case("relu", separated(&[2, 3, 4], 0.0), |t, v| Ok(t.relu(v))));
    cases.push(case("sum", x.clone(), |t, v| t.sum(v, &[0, 2])));
    cases.push(case("sum_all", x.clone(), |t, v| t.sum_all(v)));
    cases.push(case("mean", x.clone(), |t, v| t.mean(v, &[1])));
    cases.push(case("variance", x.clone(), |t, v| t.variance(v, &[0, 2])));
    cases.push(case("max", separated(&[2, 3, 4], 0.3), |t, v| t.max(v, &[2])));
    cases.push(case("permute", x.clone(), |t, v| t.permute(v, &[2, 0, 1])));
    cases.push(case("reshape", x.clone(), |t, v| t.reshape(v, &[4, 6])));
    cases.push(case("slice", x.clone(), |t, v| t.slice(v, 2, 1, 3)));
    cases.push(case("pad", x.clone(), |t, v| t.pad(v, &[(0, 0), (1, 2), (0, 1)])));
    cases.push(case("concat", x.clone(), |t, v| {
        let other = t.leaf(wave(&[2, 1, 4], 2.0));
        t.concat(&[v, other, v], 1)
    }));
    cases.push(case("softmax", x.clone(), |t, v| t.softmax(v, 1)));
    cases.push(case("log_softmax", x.clone(), |t, v| t.log_softmax(v, 2)));
    cases.push(case("standardize", x.clone(), |t, v| t.standardize(v, &[0, 2])));

    let image = wave(&[2, 2, 5, 4], 0.8);
    let filter = wave(&[3, 2, 3, 3], 1.1);
    let f = filter.clone();
    cases.push(case("conv2d (input)", image.clone(), move |t, v| {
        let w = t.leaf(f.clone());
        t.conv2d(v, w, 2, 1)
    }));
    cases.push(case("conv2d (filter)", filter, move |t, w| {
        let x = t.leaf(image.clone());
        t.conv2d(x, w, 2, 1)
    }));
    let index: Rc<[usize]> = vec![3, 0, 0, 5, 2, 3, 1, 1].into();
    cases.push(case("gather", wave(&[6], 0.4), move |t, v| {
        t.gather(v, index.clone(), &[2, 4])
    }));

    let s = wave(&[1, 3, 2, 4, 2], 0.2);
    let weights = Array::from_fn([1, 3, 2, 2], |i| 0.2 + 0.1 * (i % 5) as f64);
    cases.push(case("degree_softmax", s.clone(), |t, v| t.degree_softmax(v)));
    let w = weights.clone();
    cases.push(case("route_squash (predictions)", s.clone(), move |t, v| {
        let c = t.leaf(w.clone());
        t.route_squash(v, c)
    }));
    cases.push(case("route_squash (weights)", weights, move |t, c| {
        let v = t.leaf(s.clone());
        t.route_squash(v, c)
    }));
    cases
}

/// Cases for the input and every parameter of a layer given as a closure
/// over the bound parameters.
fn layer_cases(
    name: &str,
    params: ParamStore<f64>,
    input: Array<f64>,
    forward: impl Fn(&mut Tape<f64>, &crate::params::Bound, Var) -> Result<Var> + Clone + 'static,
) -> Vec<GradCase> {
    let params = Rc::new(params);
    let mut cases = Vec::new();
    let (p, f) = (params.clone(), forward.clone());
    cases.push(case(format!("{name} (input)"), input.clone(), move |t, x| {
        let bound = p.bind(t);
        f(t, &bound, x)
    }));
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let (p, f, x) = (params.clone(), forward.clone(), input.clone());
        let label = format!("{name} ({})", params.name(id));
        cases.push(case(label, params.get(id).clone(), move |t, v| {
            let bound = p.bind(t).substitute(id, v);
            let xv = t.leaf(x.clone());
            f(t, &bound, xv)
        }));
    }
    cases
}

/// Parameters perturbed away from their initial values, so that norm affines
/// and biases are not sitting at 1 and 0.
fn jitter(params: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.values_mut() {
        for x in v.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
}

/// Lifting and group layers, a residual block, PrimaryCaps, ConvCaps and
/// ProjCaps, each in its input and every parameter.
pub fn layers() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = Vec::new();

    let mut params = ParamStore::new();
    let lift = GroupConv::new(&mut params, "lift", Domain::Plane, 2, 2, 3, 2, true, &mut rng)?;
    jitter(&mut params, 1);
    cases.extend(layer_cases("lift_correlation", params, wave(&[1, 2, 5, 5], 0.3), move |t, p, x| {
        lift.forward(t, p, x)
    }));

    let mut params = ParamStore::new();
    let gconv = GroupConv::new(&mut params, "group", Domain::Group, 2, 2, 3, 1, true, &mut rng)?;
    jitter(&mut params, 2);
    cases.extend(layer_cases("group_correlation", params, wave(&[1, 2, 4, 3, 3], 0.5), move |t, p, x| {
        gconv.forward(t, p, x)
    }));

    let mut params = ParamStore::new();
    let spec = BlockSpec { channels: 3, stride: 2 };
    let block = ResidualBlock::new(&mut params, "block", 2, spec, &mut rng)?;
    jitter(&mut params, 3);
    cases.extend(layer_cases("residual_block", params, wave(&[1, 2, 4, 4, 4], 0.9), move |t, p, x| {
        block.forward(t, p, x)
    }));

    let mut params = ParamStore::new();
    let primary = PrimaryCaps::new(&mut params, 2, 2, 3, &mut rng)?;
    jitter(&mut params, 4);
    cases.extend(layer_cases("primary_caps", params, wave(&[1, 2, 4, 3, 3], 1.3), move |t, p, x| {
        primary.forward(t, p, x)
    }));

    for per_type in [true, false] {
        let mut params = ParamStore::new();
        let caps = ConvCaps::new(&mut params, "caps", 3, 2, 2, 3, 3, per_type, &mut rng)?;
        jitter(&mut params, 5);
        let name = if per_type { "conv_caps_forward" } else { "conv_caps_forward (pooled norm)" };
        cases.extend(layer_cases(name, params, wave(&[1, 3, 2, 4, 3, 3], 0.7), move |t, p, x| {
            Ok(caps.forward(t, p, x)?.caps)
        }));
    }

    for head in ["proj_caps", "norm_head"] {
        let mut params = ParamStore::new();
        let proj = if head == "proj_caps" {
            Head::projection(&mut params, 3, &mut rng)?
        } else {
            Head::Norm
        };
        jitter(&mut params, 6);
        cases.extend(layer_cases(head, params, separated(&[2, 2, 3, 4, 2, 2], 0.1), move |t, p, x| {
            proj.forward(t, p, x)
        }));
    }
    Ok(cases)
}

/// Cross-entropy through a tiny complete model, in the input image and in
/// every parameter (`all_params`) or in one parameter per stage.
pub fn model(all_params: bool) -> Result<Vec<GradCase>> {
    let config = ModelConfig {
        stem_channels: 2,
        blocks: vec![BlockSpec { channels: 3, stride: 2 }],
        capsule_types: 2,
        capsule_dims: 2,
        conv_caps_layers: 2,
        ..ModelConfig::default()
    };
    let (model, mut params) = Model::new::<f64>(&config, 1, 3, 3)?;
    jitter(&mut params, 7);
    let labels = [2usize, 0];
    let keep = |name: &str| {
        all_params
            || ["precaps.stem.weight", "precaps.block0.conv2.weight", "primary.conv.weight", "caps1.gamma", "projcaps.weight"]
                .contains(&name)
    };
    let params = Rc::new(params);
    let model = Rc::new(model);
    let image = wave(&[2, 1, 5, 5], 0.2).map(|v| v * 0.25 + 0.5);
    let mut cases = Vec::new();
    let (m, p) = (model.clone(), params.clone());
    cases.push(GradCase {
        name: "cross_entropy end-to-end (image)".into(),
        at: image.clone(),
        build: Box::new(move |t, x| {
            let bound = p.bind(t);
            let out = m.forward(t, &bound, x)?;
            cross_entropy(t, out.scores, &labels)
        }),
    });
    let ids: Vec<ParamId> = params.ids().filter(|&id| keep(params.name(id))).collect();
    for id in ids {
        let (m, p, x) = (model.clone(), params.clone(), image.clone());
        cases.push(GradCase {
            name: format!("cross_entropy end-to-end ({})", params.name(id)),
            at: params.get(id).clone(),
            build: Box::new(move |t, v| {
                let bound = p.bind(t).substitute(id, v);
                let xv = t.leaf(x.clone());
                let out = m.forward(t, &bound, xv)?;
                cross_entropy(t, out.scores, &labels)
            }),
        });
    }
    Ok(cases)
}
