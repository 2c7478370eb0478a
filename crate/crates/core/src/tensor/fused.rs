//! Fused kernels for the hot normalisation and routing paths, each with its
//! hand-derived adjoint.
//!
//! Routing tensors use the layout `s[b][i][j][p][g]`: batch, shallow item `i`,
//! deeper item `j`, vector component `p`, and a flattened trailing state axis
//! `g` that is contiguous in memory, so every inner loop runs over `g`.

use crate::tensor::array::{Array, Real};
use crate::tensor::kernels;

/// Extents of a routing tensor `[B, N, M, D, G]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteDims {
    pub batch: usize,
    pub shallow: usize,
    pub deep: usize,
    pub dims: usize,
    pub states: usize,
}

impl RouteDims {
    fn s_at(&self, b: usize, i: usize, j: usize, p: usize) -> usize {
        (((b * self.shallow + i) * self.deep + j) * self.dims + p) * self.states
    }

    fn c_at(&self, b: usize, i: usize, j: usize) -> usize {
        ((b * self.shallow + i) * self.deep + j) * self.states
    }

    fn out_at(&self, b: usize, j: usize, p: usize) -> usize {
        ((b * self.deep + j) * self.dims + p) * self.states
    }

    pub fn weights_len(&self) -> usize {
        self.batch * self.shallow * self.deep * self.states
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.deep * self.dims * self.states
    }
}

/// `(x - mean) / sqrt(var + EPS)` over `axes`, plus the per-statistic
/// `1 / sqrt(var + EPS)` the adjoint needs.
pub fn standardize<T: Real>(x: &Array<T>, axes: &[usize]) -> (Array<T>, Array<T>) {
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let inv_n = T::one() / T::lit(count as f64);
    let mut mean = kernels::sum_axes(x, axes);
    mean.scale_in_place(inv_n);
    let centered = kernels::zip_broadcast("standardize", x, &mean, |a, m| a - m).expect("reduced shape");
    let sq = centered.map(|v| v * v);
    let mut var = kernels::sum_axes(&sq, axes);
    var.scale_in_place(inv_n);
    let inv_std = var.map(|v| T::one() / (v + T::eps()).sqrt());
    let y = kernels::zip_broadcast("standardize", &centered, &inv_std, |c, s| c * s).expect("reduced shape");
    (y, inv_std)
}

/// Adjoint of [`standardize`]: `inv_std * (g - mean(g) - y * mean(g * y))`.
pub fn standardize_backward<T: Real>(
    g: &Array<T>,
    y: &Array<T>,
    inv_std: &Array<T>,
    axes: &[usize],
) -> Array<T> {
    let count: usize = axes.iter().map(|&a| y.shape()[a]).product();
    let inv_n = T::one() / T::lit(count as f64);
    let mut mean_g = kernels::sum_axes(g, axes);
    mean_g.scale_in_place(inv_n);
    let gy = kernels::zip_broadcast("standardize", g, y, |a, b| a * b).expect("same shape");
    let mut mean_gy = kernels::sum_axes(&gy, axes);
    mean_gy.scale_in_place(inv_n);
    // fold the three per-statistic factors into one broadcastable pass each
    let shifted = kernels::zip_broadcast("standardize", g, &mean_g, |a, m| a - m).expect("reduced");
    let proj = kernels::zip_broadcast("standardize", y, &mean_gy, |a, m| a * m).expect("reduced");
    let diff = kernels::zip_broadcast("standardize", &shifted, &proj, |a, b| a - b).expect("same shape");
    kernels::zip_broadcast("standardize", &diff, inv_std, |a, s| a * s).expect("reduced")
}

/// Norms `n[i][g] = ‖s[b][i][j][:][g]‖`.
fn norms<T: Real>(s: &[T], d: &RouteDims, b: usize, j: usize) -> Vec<T> {
    let gs = d.states;
    let mut n = vec![T::zero(); d.shallow * gs];
    for i in 0..d.shallow {
        let row = &mut n[i * gs..][..gs];
        for p in 0..d.dims {
            let v = &s[d.s_at(b, i, j, p)..][..gs];
            for (acc, &x) in row.iter_mut().zip(v) {
                *acc += x * x;
            }
        }
        for v in row.iter_mut() {
            *v = v.sqrt();
        }
    }
    n
}

/// `dot[g] = Σ_p s_i[p][g] s_k[p][g]`.
fn dots<T: Real>(s: &[T], d: &RouteDims, b: usize, i: usize, k: usize, j: usize, out: &mut [T]) {
    out.fill(T::zero());
    for p in 0..d.dims {
        let vi = &s[d.s_at(b, i, j, p)..][..d.states];
        let vk = &s[d.s_at(b, k, j, p)..][..d.states];
        for ((o, &a), &c) in out.iter_mut().zip(vi).zip(vk) {
            *o += a * c;
        }
    }
}

/// Routing weights `c[b][i][j][g] = softmax_i(Σ_k A_ik)` with the cosine
/// agreement `A_ik = s_i·s_k / max(‖s_i‖ ‖s_k‖, EPS)` for `i ≠ k` and
/// `A_ii = 1` (0 for a zero vector). The floor keeps `A` exactly scale-free
/// above it and sends it to 0 with the norms below it.
pub fn degree_softmax<T: Real>(s: &[T], d: &RouteDims) -> Vec<T> {
    let gs = d.states;
    let mut c = vec![T::zero(); d.weights_len()];
    let mut dot = vec![T::zero(); gs];
    let mut deg = vec![T::zero(); d.shallow * gs];
    for b in 0..d.batch {
        for j in 0..d.deep {
            let n = norms(s, d, b, j);
            deg.fill(T::zero());
            for i in 0..d.shallow {
                for g in 0..gs {
                    if n[i * gs + g] > T::zero() {
                        deg[i * gs + g] += T::one();
                    }
                }
                for k in i + 1..d.shallow {
                    dots(s, d, b, i, k, j, &mut dot);
                    for g in 0..gs {
                        let a = dot[g] / (n[i * gs + g] * n[k * gs + g]).max(T::eps());
                        deg[i * gs + g] += a;
                        deg[k * gs + g] += a;
                    }
                }
            }
            for g in 0..gs {
                let max = (0..d.shallow)
                    .map(|i| deg[i * gs + g])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..d.shallow {
                    let e = (deg[i * gs + g] - max).exp();
                    c[d.c_at(b, i, j) + g] = e;
                    total += e;
                }
                for i in 0..d.shallow {
                    c[d.c_at(b, i, j) + g] /= total;
                }
            }
        }
    }
    c
}

/// Adjoint of [`degree_softmax`] given its output `c` and output gradient
/// `gc`.
pub fn degree_softmax_backward<T: Real>(s: &[T], c: &[T], gc: &[T], d: &RouteDims) -> Vec<T> {
    let gs = d.states;
    let mut gs_out = vec![T::zero(); s.len()];
    let mut dot = vec![T::zero(); gs];
    let mut gdeg = vec![T::zero(); d.shallow * gs];
    let mut w = vec![T::zero(); gs];
    let mut coef_i = vec![T::zero(); gs];
    let mut coef_k = vec![T::zero(); gs];
    for b in 0..d.batch {
        for j in 0..d.deep {
            for g in 0..gs {
                let inner: T = (0..d.shallow)
                    .map(|i| c[d.c_at(b, i, j) + g] * gc[d.c_at(b, i, j) + g])
                    .sum();
                for i in 0..d.shallow {
                    let at = d.c_at(b, i, j) + g;
                    gdeg[i * gs + g] = c[at] * (gc[at] - inner);
                }
            }
            let n = norms(s, d, b, j);
            for i in 0..d.shallow {
                for k in i + 1..d.shallow {
                    dots(s, d, b, i, k, j, &mut dot);
                    for g in 0..gs {
                        let (ni, nk) = (n[i * gs + g], n[k * gs + g]);
                        let product = ni * nk;
                        let floored = product <= T::eps();
                        let denom = if floored { T::eps() } else { product };
                        let a = dot[g] / denom;
                        let wg = (gdeg[i * gs + g] + gdeg[k * gs + g]) / denom;
                        w[g] = wg;
                        // below the floor the denominator is constant
                        coef_i[g] = if floored { T::zero() } else { wg * a * nk / ni };
                        coef_k[g] = if floored { T::zero() } else { wg * a * ni / nk };
                    }
                    for p in 0..d.dims {
                        let (oi, ok) = (d.s_at(b, i, j, p), d.s_at(b, k, j, p));
                        for g in 0..gs {
                            let (vi, vk) = (s[oi + g], s[ok + g]);
                            gs_out[oi + g] += w[g] * vk - coef_i[g] * vi;
                            gs_out[ok + g] += w[g] * vi - coef_k[g] * vk;
                        }
                    }
                }
            }
        }
    }
    gs_out
}

/// `f(σ) = sqrt(σ + EPS) / (1 + σ)` and its derivative in `σ = ‖v‖²`.
fn squash_factor<T: Real>(sumsq: T) -> (T, T) {
    let r = (sumsq + T::eps()).sqrt();
    let q = T::one() + sumsq;
    let f = r / q;
    let df = T::one() / (T::lit(2.0) * r * q) - r / (q * q);
    (f, df)
}

/// Weighted sums over the shallow axis into pre-activations `[B, M, D, G]`.
fn weighted_sums<T: Real>(s: &[T], c: &[T], d: &RouteDims) -> Vec<T> {
    let gs = d.states;
    let mut pre = vec![T::zero(); d.out_len()];
    for b in 0..d.batch {
        for i in 0..d.shallow {
            for j in 0..d.deep {
                let ci = &c[d.c_at(b, i, j)..][..gs];
                for p in 0..d.dims {
                    let v = &s[d.s_at(b, i, j, p)..][..gs];
                    let out = &mut pre[d.out_at(b, j, p)..][..gs];
                    for ((o, &x), &w) in out.iter_mut().zip(v).zip(ci) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    pre
}

/// Per-`(b, j, g)` squared norms of the pre-activations.
fn sumsq_over_dims<T: Real>(pre: &[T], d: &RouteDims) -> Vec<T> {
    let gs = d.states;
    let mut out = vec![T::zero(); d.batch * d.deep * gs];
    for bj in 0..d.batch * d.deep {
        let acc = &mut out[bj * gs..][..gs];
        for p in 0..d.dims {
            let v = &pre[(bj * d.dims + p) * gs..][..gs];
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x * x;
            }
        }
    }
    out
}

/// `out[b][j][:][g] = squash(Σ_i c[b][i][j][g] s[b][i][j][:][g])`.
pub fn route_squash<T: Real>(s: &[T], c: &[T], d: &RouteDims) -> Vec<T> {
    let gs = d.states;
    let mut out = weighted_sums(s, c, d);
    let sumsq = sumsq_over_dims(&out, d);
    let factor: Vec<T> = sumsq.iter().map(|&v| squash_factor(v).0).collect();
    for bj in 0..d.batch * d.deep {
        let f = &factor[bj * gs..][..gs];
        for p in 0..d.dims {
            for (o, &fv) in out[(bj * d.dims + p) * gs..][..gs].iter_mut().zip(f) {
                *o *= fv;
            }
        }
    }
    out
}

/// Adjoint of [`route_squash`]: gradients for `s` and `c`.
pub fn route_squash_backward<T: Real>(
    s: &[T],
    c: &[T],
    g: &[T],
    d: &RouteDims,
) -> (Vec<T>, Vec<T>) {
    let gs = d.states;
    let pre = weighted_sums(s, c, d);
    let sumsq = sumsq_over_dims(&pre, d);
    // g_pre = g f + 2 v (g·v) f'
    let mut g_pre = vec![T::zero(); pre.len()];
    for bj in 0..d.batch * d.deep {
        let mut proj = vec![T::zero(); gs];
        for p in 0..d.dims {
            let at = (bj * d.dims + p) * gs;
            for (k, acc) in proj.iter_mut().enumerate() {
                *acc += g[at + k] * pre[at + k];
            }
        }
        for k in 0..gs {
            let (f, df) = squash_factor(sumsq[bj * gs + k]);
            let two_proj = T::lit(2.0) * proj[k] * df;
            for p in 0..d.dims {
                let at = (bj * d.dims + p) * gs + k;
                g_pre[at] = g[at] * f + pre[at] * two_proj;
            }
        }
    }
    let mut g_s = vec![T::zero(); s.len()];
    let mut g_c = vec![T::zero(); c.len()];
    for b in 0..d.batch {
        for i in 0..d.shallow {
            for j in 0..d.deep {
                let c_at = d.c_at(b, i, j);
                for p in 0..d.dims {
                    let (s_at, o_at) = (d.s_at(b, i, j, p), d.out_at(b, j, p));
                    for k in 0..gs {
                        let gp = g_pre[o_at + k];
                        g_s[s_at + k] = c[c_at + k] * gp;
                        g_c[c_at + k] += s[s_at + k] * gp;
                    }
                }
            }
        }
    }
    (g_s, g_c)
}
