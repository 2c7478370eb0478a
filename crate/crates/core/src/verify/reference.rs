//! Direct evaluations of the correlation and routing formulas, one output
//! element at a time. Slow, but free of the index maps and fused kernels the
//! production path relies on.

use crate::group::rotate_vector;
use crate::tensor::{Array, EPS};

/// Filter tap at offset `(dx, dy)` from the center, zero off the support.
fn tap(w: &Array<f64>, prefix: &[usize], dx: i64, dy: i64) -> f64 {
    let k = *w.shape().last().expect("filter rank") as i64;
    let (a, b) = (dy + k / 2, dx + k / 2);
    if a < 0 || b < 0 || a >= k || b >= k {
        return 0.0;
    }
    let mut index = prefix.to_vec();
    index.extend([a as usize, b as usize]);
    w.at(&index)
}

/// `out(r, t) = Σ_c Σ_y f_c(y) F_c(R₋ᵣ (y − t))` for `x: [B, C, H, W]`,
/// `w: [O, C, k, k]`.
pub fn lift(x: &Array<f64>, w: &Array<f64>, stride: usize) -> Array<f64> {
    let [b, c, h, wd]: [usize; 4] = x.shape().try_into().expect("planar input");
    let o = w.shape()[0];
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = Array::zeros([b, o, 4, ho, wo]);
    for n in 0..b {
        for oc in 0..o {
            for r in 0..4u8 {
                for i in 0..ho {
                    for j in 0..wo {
                        let (tx, ty) = ((j * stride) as i64, (i * stride) as i64);
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..wd {
                                    let (dx, dy) =
                                        rotate_vector((4 - r) % 4, xx as i64 - tx, y as i64 - ty);
                                    acc += x.at(&[n, ci, y, xx]) * tap(w, &[oc, ci], dx, dy);
                                }
                            }
                        }
                        out.set(&[n, oc, r as usize, i, j], acc);
                    }
                }
            }
        }
    }
    out
}

/// `out(r, t) = Σ_c Σ_{s, y} f_c(s, y) F_c(s − r, R₋ᵣ (y − t))` for
/// `x: [B, C, 4, H, W]`, `w: [O, C, 4, k, k]`.
pub fn group(x: &Array<f64>, w: &Array<f64>, stride: usize) -> Array<f64> {
    let [b, c, _, h, wd]: [usize; 5] = x.shape().try_into().expect("group input");
    let o = w.shape()[0];
    let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = Array::zeros([b, o, 4, ho, wo]);
    for n in 0..b {
        for oc in 0..o {
            for r in 0..4usize {
                for i in 0..ho {
                    for j in 0..wo {
                        let (tx, ty) = ((j * stride) as i64, (i * stride) as i64);
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for s in 0..4usize {
                                let plane = (s + 4 - r) % 4;
                                for y in 0..h {
                                    for xx in 0..wd {
                                        let (dx, dy) = rotate_vector(
                                            ((4 - r) % 4) as u8,
                                            xx as i64 - tx,
                                            y as i64 - ty,
                                        );
                                        acc += x.at(&[n, ci, s, y, xx])
                                            * tap(w, &[oc, ci, plane], dx, dy);
                                    }
                                }
                            }
                        }
                        out.set(&[n, oc, r, i, j], acc);
                    }
                }
            }
        }
    }
    out
}

/// One ConvCaps layer with unit-stride prediction and kernel-size padding.
pub struct CapsLayer<'a> {
    /// `[M * D, d_in, 4, k, k]`, output channel `j * D + q`.
    pub predictor: &'a Array<f64>,
    /// Per-dimension affine of the normalisation, length `D`.
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub out_types: usize,
    pub out_dims: usize,
    pub per_type: bool,
}

/// Routed capsules `[1, M, D, 4, H, W]` and weights `[1, N, M, 4, H, W]` for
/// input capsules `[1, N, d_in, 4, H, W]`.
pub fn conv_caps(caps: &Array<f64>, layer: &CapsLayer) -> (Array<f64>, Array<f64>) {
    let [_, nl, dl, _, h, w]: [usize; 6] = caps.shape().try_into().expect("capsule input");
    let (m, d) = (layer.out_types, layer.out_dims);
    let states = 4 * h * w;
    // pred[i][j * d + q][state]
    let mut pred: Vec<Vec<Vec<f64>>> = Vec::with_capacity(nl);
    for i in 0..nl {
        let field = Array::from_fn([1, dl, 4, h, w], |k| caps.data()[i * dl * states + k]);
        let s = group(&field, layer.predictor, 1);
        pred.push(s.data().chunks(states).map(<[f64]>::to_vec).collect());
    }

    let pools: Vec<Vec<usize>> = if layer.per_type {
        (0..m).map(|j| vec![j]).collect()
    } else {
        vec![(0..m).collect()]
    };
    for pool in &pools {
        let mut sum = 0.0;
        let mut count = 0.0;
        for row in &pred {
            for &j in pool {
                for q in 0..d {
                    sum += row[j * d + q].iter().sum::<f64>();
                    count += states as f64;
                }
            }
        }
        let mean = sum / count;
        let mut var = 0.0;
        for row in &pred {
            for &j in pool {
                for q in 0..d {
                    var += row[j * d + q].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                }
            }
        }
        let inv = 1.0 / (var / count + EPS).sqrt();
        for row in pred.iter_mut() {
            for &j in pool {
                for q in 0..d {
                    for v in row[j * d + q].iter_mut() {
                        *v = layer.gamma[q] * (*v - mean) * inv + layer.beta[q];
                    }
                }
            }
        }
    }

    let mut out = Array::zeros([1, m, d, 4, h, w]);
    let mut weights = Array::zeros([1, nl, m, 4, h, w]);
    for j in 0..m {
        for st in 0..states {
            let vecs: Vec<Vec<f64>> = (0..nl)
                .map(|i| (0..d).map(|q| pred[i][j * d + q][st]).collect())
                .collect();
            let norms: Vec<f64> = vecs
                .iter()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            let degree: Vec<f64> = (0..nl)
                .map(|i| {
                    (0..nl)
                        .map(|k| {
                            if k == i {
                                return if norms[i] > 0.0 { 1.0 } else { 0.0 };
                            }
                            let dot: f64 = vecs[i].iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
                            dot / (norms[i] * norms[k]).max(EPS)
                        })
                        .sum()
                })
                .collect();
            let top = degree.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = degree.iter().map(|a| (a - top).exp()).sum();
            let mut total = vec![0.0; d];
            for i in 0..nl {
                let c = (degree[i] - top).exp() / z;
                weights.data_mut()[(i * m + j) * states + st] = c;
                for (t, v) in total.iter_mut().zip(&vecs[i]) {
                    *t += c * v;
                }
            }
            let sq: f64 = total.iter().map(|v| v * v).sum();
            let factor = (sq + EPS).sqrt() / (1.0 + sq);
            for (q, t) in total.iter().enumerate() {
                out.data_mut()[(j * d + q) * states + st] = t * factor;
            }
        }
    }
    (out, weights)
}
