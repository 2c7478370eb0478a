//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use proptest::prelude::*;
use robustcaps::group::{GroupElement, Point};
use robustcaps::tensor::Array;

/// Filter value at group offset `(s, δ)`, zero off the k×k support.
pub fn filter_at(w: &Array<f64>, o: usize, c: usize, s: Option<usize>, d: Point) -> f64 {
    let k = *w.shape().last().unwrap() as i64;
    let (a, b) = (d.y + k / 2, d.x + k / 2);
    if !(0..k).contains(&a) || !(0..k).contains(&b) {
        return 0.0;
    }
    match s {
        None => w.at(&[o, c, a as usize, b as usize]),
        Some(s) => w.at(&[o, c, s, a as usize, b as usize]),
    }
}

/// Σ_y Σ_c f_c(y) F_c(g⁻¹ y) evaluated pointwise over all y in the grid.
pub fn brute_lift(x: &Array<f64>, w: &Array<f64>, stride: usize) -> Array<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = Array::zeros([b, o, 4, ho, wo]);
    for bi in 0..b {
        for oi in 0..o {
            for r in 0..4 {
                for i in 0..ho {
                    for j in 0..wo {
                        let g = GroupElement::new(r as i64, (j * stride) as i64, (i * stride) as i64);
                        let g_inv = g.inverse();
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for yy in 0..h {
                                for yx in 0..wd {
                                    let d = g_inv.act_on_point(Point::new(yx as i64, yy as i64));
                                    acc += x.at(&[bi, ci, yy, yx]) * filter_at(w, oi, ci, None, d);
                                }
                            }
                        }
                        out.set(&[bi, oi, r, i, j], acc);
                    }
                }
            }
        }
    }
    out
}

/// Σ_{h ∈ p4} Σ_c f_c(h) F_c(g⁻¹ h) over all group elements with support in
/// the grid.
pub fn brute_group(x: &Array<f64>, w: &Array<f64>, stride: usize) -> Array<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[3], x.shape()[4]);
    let o = w.shape()[0];
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = Array::zeros([b, o, 4, ho, wo]);
    for bi in 0..b {
        for oi in 0..o {
            for r in 0..4 {
                for i in 0..ho {
                    for j in 0..wo {
                        let g = GroupElement::new(r as i64, (j * stride) as i64, (i * stride) as i64);
                        let g_inv = g.inverse();
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for rp in 0..4 {
                                for yy in 0..h {
                                    for yx in 0..wd {
                                        let el = GroupElement::new(rp as i64, yx as i64, yy as i64);
                                        let rel = g_inv.compose(&el);
                                        let d = Point::new(rel.u, rel.v);
                                        let f = filter_at(w, oi, ci, Some(rel.r() as usize), d);
                                        acc += x.at(&[bi, ci, rp, yy, yx]) * f;
                                    }
                                }
                            }
                        }
                        out.set(&[bi, oi, r, i, j], acc);
                    }
                }
            }
        }
    }
    out
}

pub fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

/// Random array of the given shape.
pub fn array(shape: Vec<usize>) -> impl Strategy<Value = Array<f64>> {
    let n = shape.iter().product();
    values(n).prop_map(move |v| Array::from_vec(shape.clone(), v).unwrap())
}

pub fn rotations() -> impl Strategy<Value = GroupElement> {
    (0i64..4).prop_map(GroupElement::rotation)
}


const EPS: f64 = 1e-8;

/// Capsule layer parameters for [`naive_conv_caps`].
pub struct CapsParams {
    /// `[Nl1 * d, dl, 4, k, k]`, output channel `j * d + p`.
    pub predictor: Array<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub deep: usize,
    pub dims: usize,
    pub per_type: bool,
}

/// Predict, normalise, route and squash with explicit loops for capsules
/// `[1, Nl, dl, 4, H, W]`. Returns the output capsules `[Nl1][d][4][H][W]`
/// flattened and the routing weights `[Nl][Nl1][4][H][W]` flattened.
pub fn naive_conv_caps(caps: &Array<f64>, p: &CapsParams) -> (Vec<f64>, Vec<f64>) {
    let sh = caps.shape();
    let (nl, dl, h, w) = (sh[1], sh[2], sh[4], sh[5]);
    let (nj, d) = (p.deep, p.dims);
    let states = 4 * h * w;
    // s[i][j][q][state]
    let mut s = vec![vec![vec![vec![0.0; states]; d]; nj]; nl];
    for i in 0..nl {
        let mut field = Array::zeros([1, dl, 4, h, w]);
        for c in 0..dl {
            for st in 0..states {
                field.data_mut()[c * states + st] = caps.data()[(i * dl + c) * states + st];
            }
        }
        let pred = brute_group(&field, &p.predictor, 1);
        for j in 0..nj {
            for q in 0..d {
                for st in 0..states {
                    s[i][j][q][st] = pred.data()[(j * d + q) * states + st];
                }
            }
        }
    }
    let pools: Vec<Vec<usize>> = if p.per_type {
        (0..nj).map(|j| vec![j]).collect()
    } else {
        vec![(0..nj).collect()]
    };
    for pool in pools {
        let mut vals = vec![];
        for i in 0..nl {
            for &j in &pool {
                for q in 0..d {
                    vals.extend_from_slice(&s[i][j][q]);
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for i in 0..nl {
            for &j in &pool {
                for q in 0..d {
                    for v in s[i][j][q].iter_mut() {
                        *v = p.gamma[q] * (*v - mean) / (var + EPS).sqrt() + p.beta[q];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; nj * d * states];
    let mut weights = vec![0.0; nl * nj * states];
    for j in 0..nj {
        for st in 0..states {
            let vec_of = |i: usize| -> Vec<f64> { (0..d).map(|q| s[i][j][q][st]).collect() };
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut degree = vec![0.0; nl];
            for i in 0..nl {
                for k in 0..nl {
                    let (a, b) = (vec_of(i), vec_of(k));
                    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    degree[i] += if i == k {
                        if norm(&a) > 0.0 { 1.0 } else { 0.0 }
                    } else {
                        dot / (norm(&a) * norm(&b)).max(EPS)
                    };
                }
            }
            let max = degree.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = degree.iter().map(|x| (x - max).exp()).sum();
            let mut total = vec![0.0; d];
            for i in 0..nl {
                let c = (degree[i] - max).exp() / z;
                weights[(i * nj + j) * states + st] = c;
                for (t, v) in total.iter_mut().zip(vec_of(i)) {
                    *t += c * v;
                }
            }
            let sq: f64 = total.iter().map(|x| x * x).sum();
            let factor = (sq + EPS).sqrt() / (1.0 + sq);
            for q in 0..d {
                out[(j * d + q) * states + st] = total[q] * factor;
            }
        }
    }
    (out, weights)
}
