//! Reverse-mode tape. Nodes are appended in evaluation order, so walking the
//! node list backwards from the output is a valid topological order.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::array::{numel, Array, Real};
use crate::tensor::fused::{self, RouteDims};
use crate::tensor::kernels::{self, ConvGeometry, PatchPlan};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var, usize),
    Variance(Var, Vec<usize>),
    Max(Var, Vec<usize>),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice {
        x: Var,
        offsets: Vec<usize>,
    },
    Pad {
        x: Var,
        offsets: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Correlate {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        plan: Rc<PatchPlan>,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Standardize {
        x: Var,
        axes: Vec<usize>,
        inv_std: Array<T>,
    },
    DegreeSoftmax {
        s: Var,
        dims: RouteDims,
    },
    RouteSquash {
        s: Var,
        c: Var,
        dims: RouteDims,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
}

/// A single-threaded computation graph recording values and local backward
/// rules.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; `None` if the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Array<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Array<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = kernels::zip_broadcast(name, self.value(a), self.value(b), f)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn offset(&mut self, x: Var, shift: T) -> Var {
        let value = self.value(x).map(|v| v + shift);
        self.push(value, Op::Offset(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("identical shapes")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::sqrt);
        self.push(value, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    /// Sum over `axes`, keeping them as size-1 axes.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        kernels::check_axes("sum", self.shape(x), axes)?;
        let value = kernels::sum_axes(self.value(x), axes);
        Ok(self.push(value, Op::Sum(x)))
    }

    /// Sum of every element, as a rank-0 array.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum(x, &axes)?;
        self.reshape(s, &[])
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        kernels::check_axes("mean", self.shape(x), axes)?;
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let mut value = kernels::sum_axes(self.value(x), axes);
        value.scale_in_place(T::one() / T::lit(count as f64));
        Ok(self.push(value, Op::Mean(x, count)))
    }

    /// Biased (1/N) variance over `axes`, keeping them as size-1 axes.
    pub fn variance(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        kernels::check_axes("variance", self.shape(x), axes)?;
        let (centered, count) = centered(self.value(x), axes);
        let sq = centered.map(|v| v * v);
        let mut value = kernels::sum_axes(&sq, axes);
        value.scale_in_place(T::one() / T::lit(count as f64));
        Ok(self.push(value, Op::Variance(x, axes.to_vec())))
    }

    /// Maximum over `axes` (kept as size-1); the gradient flows to the first
    /// maximal element.
    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        kernels::check_axes("max", self.shape(x), axes)?;
        let (value, arg) = kernels::max_axes(self.value(x), axes);
        Ok(self.push(value, Op::Max(x, arg)))
    }

    /// Contraction of the last axis of `a` with the second-to-last of `b`,
    /// batched over identical leading axes: `[.., m, k] x [.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(err());
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k || sa[..r - 2] != sb[..r - 2] {
            return Err(err());
        }
        let batch = numel(&sa[..r - 2]);
        let data = kernels::batched_matmul(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            false,
            false,
        );
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Array::from_vec(shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b, batch, m, k, n }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let value = kernels::permute(self.value(x), perm);
        Ok(self.push(value, Op::Permute(x, perm.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::BadAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start > end || end > shape[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} outside axis {axis} of shape {shape:?}"
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let mut offsets = vec![0; shape.len()];
        offsets[axis] = start;
        let mut out = vec![T::zero(); numel(&out_shape)];
        kernels::window_read(&out_shape, &shape, &offsets, self.value(x).data(), &mut out);
        let value = Array::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Slice { x, offsets }))
    }

    /// Zero padding with `(before, after)` per axis.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if pads.len() != shape.len() {
            return Err(Error::invalid(format!(
                "pad: {} pad pairs for rank {}",
                pads.len(),
                shape.len()
            )));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(pads)
            .map(|(&d, &(b, a))| d + b + a)
            .collect();
        let offsets: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let mut out = vec![T::zero(); numel(&out_shape)];
        kernels::window_write(&shape, &out_shape, &offsets, self.value(x).data(), &mut out);
        let value = Array::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Pad { x, offsets }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::BadAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Array::from_vec(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(self.value(x), axis, false)?;
        Ok(self.push(value, Op::Softmax(x, axis)))
    }

    /// Log-softmax along `axis`, max-subtracted.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(self.value(x), axis, true)?;
        Ok(self.push(value, Op::LogSoftmax(x, axis)))
    }

    /// Planar cross-correlation: `x` is `[B, C, H, W]`, `w` is
    /// `[O, C, k, k]`, zero padding `pad`, output `[B, O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = sx.len() != 4
            || sw.len() != 4
            || sx[1] != sw[1]
            || sw[2] != sw[3]
            || sw[2] == 0
            || sx[2] + 2 * pad < sw[2]
            || sx[3] + 2 * pad < sw[2];
        if bad {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let k = sw[2];
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            stride,
            out_height: (sx[2] + 2 * pad - k) / stride + 1,
            out_width: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let plan = Rc::new(PatchPlan::planar(sx[1], k, pad));
        let data = self.correlate_raw(x, w, &geom, &plan);
        let value = Array::from_vec([geom.batch, sw[0], geom.out_height, geom.out_width], data)?;
        Ok(self.push(value, Op::Correlate { x, w, geom, plan }))
    }

    /// Correlation over a patch plan: `x` is `[B, C, H, W]`, `w` is
    /// `[O, ..]` with one weight per plan row. Output site `(oy, ox)` sits over
    /// input pixel `(oy * stride, ox * stride)`, so the output is
    /// `[B, O, frames, (H-1)/stride+1, (W-1)/stride+1]`.
    pub fn correlate(&mut self, x: Var, w: Var, plan: Rc<PatchPlan>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = sx.len() != 4
            || sw.is_empty()
            || numel(&sw) != sw[0] * plan.rows()
            || plan.channels() > sx[1]
            || sx[2] == 0
            || sx[3] == 0;
        if bad {
            return Err(Error::ShapeMismatch {
                op: "correlate",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("correlate: stride must be at least 1"));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            stride,
            out_height: (sx[2] - 1) / stride + 1,
            out_width: (sx[3] - 1) / stride + 1,
        };
        let data = self.correlate_raw(x, w, &geom, &plan);
        let shape = [geom.batch, sw[0], plan.frames(), geom.out_height, geom.out_width];
        let value = Array::from_vec(shape, data)?;
        Ok(self.push(value, Op::Correlate { x, w, geom, plan }))
    }

    /// Output data laid out `[B, O, frames, Ho, Wo]`. Each sample is one
    /// GEMM over its own patch matrix, written straight into its output block.
    fn correlate_raw(&self, x: Var, w: Var, geom: &ConvGeometry, plan: &PatchPlan) -> Vec<T> {
        let (input, weight) = (self.value(x).data(), self.value(w).data());
        let out_ch = self.shape(w)[0];
        let rows = plan.rows();
        let cols = plan.frames() * geom.sites();
        let sample = geom.in_channels * geom.height * geom.width;
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); geom.batch * out_ch * cols];
        for (n, block) in out.chunks_exact_mut(out_ch * cols).enumerate() {
            kernels::im2col(&input[n * sample..][..sample], geom, plan, &mut col);
            T::gemm(
                out_ch,
                rows,
                cols,
                T::one(),
                weight,
                (rows as isize, 1),
                &col,
                (cols as isize, 1),
                T::zero(),
                block,
                (cols as isize, 1),
            );
        }
        out
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if numel(shape) != index.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Array::from_vec(shape, data)?;
        Ok(self.push(value, Op::Gather { x, index }))
    }

    /// `(x - mean) / sqrt(var + EPS)` with biased statistics over `axes`.
    pub fn standardize(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        kernels::check_axes("standardize", self.shape(x), axes)?;
        let (value, inv_std) = fused::standardize(self.value(x), axes);
        Ok(self.push(
            value,
            Op::Standardize {
                x,
                axes: axes.to_vec(),
                inv_std,
            },
        ))
    }

    fn route_dims(&self, op: &'static str, s: Var) -> Result<RouteDims> {
        let shape = self.shape(s);
        if shape.len() < 4 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![4],
            });
        }
        Ok(RouteDims {
            batch: shape[0],
            shallow: shape[1],
            deep: shape[2],
            dims: shape[3],
            states: numel(&shape[4..]),
        })
    }

    /// Degree-centrality routing weights for predictions `s` of shape
    /// `[B, N, M, D, ..]`: for every `(b, j, state)` the softmax over `i` of
    /// `Σ_k A_ik` with the cosine agreement `A_ik` of
    /// [`fused::degree_softmax`]. Output `[B, N, M, ..]`.
    pub fn degree_softmax(&mut self, s: Var) -> Result<Var> {
        let dims = self.route_dims("degree_softmax", s)?;
        if dims.shallow == 0 {
            return Err(Error::EmptyReduction {
                op: "degree_softmax",
                axis: 1,
                shape: self.shape(s).to_vec(),
            });
        }
        let sh = self.shape(s);
        let mut shape = sh[..3].to_vec();
        shape.extend_from_slice(&sh[4..]);
        let data = fused::degree_softmax(self.value(s).data(), &dims);
        let value = Array::from_vec(shape, data)?;
        Ok(self.push(value, Op::DegreeSoftmax { s, dims }))
    }

    /// `squash(Σ_i c_ij s_ij)` along the `D` axis: `s` is `[B, N, M, D, ..]`,
    /// `c` is `[B, N, M, ..]`, output `[B, M, D, ..]`.
    pub fn route_squash(&mut self, s: Var, c: Var) -> Result<Var> {
        let dims = self.route_dims("route_squash", s)?;
        let sh = self.shape(s).to_vec();
        let mut c_shape = sh[..3].to_vec();
        c_shape.extend_from_slice(&sh[4..]);
        if self.shape(c) != c_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "route_squash",
                lhs: sh,
                rhs: self.shape(c).to_vec(),
            });
        }
        let mut shape = vec![sh[0], sh[2], sh[3]];
        shape.extend_from_slice(&sh[4..]);
        let data = fused::route_squash(self.value(s).data(), self.value(c).data(), &dims);
        let value = Array::from_vec(shape, data)?;
        Ok(self.push(value, Op::RouteSquash { s, c, dims }))
    }

    /// Reverse sweep from `output` seeded with `seed`; returns gradients for
    /// every leaf the output depends on.
    pub fn backward(&self, output: Var, seed: Array<T>) -> Result<Gradients<T>> {
        same_shape("backward seed", self.shape(output), seed.shape())?;
        let mut grads: Vec<Option<Array<T>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let mut acc = |v: Var, delta: Array<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, kernels::reduce_to_shape(g, val(*a).shape()));
                acc(*b, kernels::reduce_to_shape(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, kernels::reduce_to_shape(g, val(*a).shape()));
                let gb = kernels::reduce_to_shape(g, val(*b).shape());
                acc(*b, gb.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = kernels::zip_broadcast("mul'", g, val(*b), |x, y| x * y).expect("shapes");
                let gb = kernels::zip_broadcast("mul'", g, val(*a), |x, y| x * y).expect("shapes");
                acc(*a, kernels::reduce_to_shape(&ga, val(*a).shape()));
                acc(*b, kernels::reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::Div(a, b) => {
                let ga = kernels::zip_broadcast("div'", g, val(*b), |x, y| x / y).expect("shapes");
                let t = kernels::zip_broadcast("div'", g, &node.value, |x, y| x * y).expect("shapes");
                let gb = kernels::zip_broadcast("div'", &t, val(*b), |x, y| -x / y).expect("shapes");
                acc(*a, kernels::reduce_to_shape(&ga, val(*a).shape()));
                acc(*b, kernels::reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::Maximum(a, b) => {
                let shape = node.value.shape();
                let av = kernels::broadcast_to(val(*a), shape);
                let bv = kernels::broadcast_to(val(*b), shape);
                let mut ga = g.clone();
                let mut gb = g.clone();
                for i in 0..g.len() {
                    if av.data()[i] >= bv.data()[i] {
                        gb.data_mut()[i] = T::zero();
                    } else {
                        ga.data_mut()[i] = T::zero();
                    }
                }
                acc(*a, kernels::reduce_to_shape(&ga, val(*a).shape()));
                acc(*b, kernels::reduce_to_shape(&gb, val(*b).shape()));
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * *f)),
            Op::Offset(x) => acc(*x, g.clone()),
            Op::Exp(x) => {
                acc(*x, zip_same(g, &node.value, |gv, y| gv * y));
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                acc(*x, zip_same(g, &node.value, |gv, y| gv * half / y));
            }
            Op::Relu(x) => {
                acc(*x, zip_same(g, val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::Sum(x) => acc(*x, kernels::broadcast_to(g, val(*x).shape())),
            Op::Mean(x, count) => {
                let mut gx = kernels::broadcast_to(g, val(*x).shape());
                gx.scale_in_place(T::one() / T::lit(*count as f64));
                acc(*x, gx);
            }
            Op::Variance(x, axes) => {
                let (centered, count) = centered(val(*x), axes);
                let factor = T::lit(2.0) / T::lit(count as f64);
                let gb = kernels::broadcast_to(g, val(*x).shape());
                acc(*x, zip_same(&gb, &centered, |gv, c| gv * c * factor));
            }
            Op::Max(x, arg) => {
                let mut gx = Array::zeros(val(*x).shape());
                for (slot, &src) in arg.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[slot];
                }
                acc(*x, gx);
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                // dA = dC B^T, dB = A^T dC
                let da = kernels::batched_matmul(g.data(), val(*b).data(), batch, m, n, k, false, true);
                let db = kernels::batched_matmul(val(*a).data(), g.data(), batch, k, m, n, true, false);
                acc(*a, Array::from_vec(val(*a).shape(), da).expect("matmul grad"));
                acc(*b, Array::from_vec(val(*b).shape(), db).expect("matmul grad"));
            }
            Op::Permute(x, perm) => {
                acc(*x, kernels::permute(g, &kernels::inverse_permutation(perm)));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshaped(val(*x).shape()).expect("reshape grad")),
            Op::Slice { x, offsets } => {
                let shape = val(*x).shape();
                let mut gx = vec![T::zero(); numel(shape)];
                kernels::window_write(g.shape(), shape, offsets, g.data(), &mut gx);
                acc(*x, Array::from_vec(shape, gx).expect("slice grad"));
            }
            Op::Pad { x, offsets } => {
                let shape = val(*x).shape();
                let mut gx = vec![T::zero(); numel(shape)];
                kernels::window_read(shape, g.shape(), offsets, g.data(), &mut gx);
                acc(*x, Array::from_vec(shape, gx).expect("pad grad"));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::split_at_axis(g.shape(), *axis);
                let mut start = 0;
                for &x in xs {
                    let shape = val(x).shape();
                    let width = shape[*axis];
                    let mut gx = Vec::with_capacity(numel(shape));
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gx.extend_from_slice(&g.data()[base..base + width * inner]);
                    }
                    start += width;
                    acc(x, Array::from_vec(shape, gx).expect("concat grad"));
                }
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = kernels::split_at_axis(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let dot: T = (0..len).map(|t| g.data()[idx(t)] * y.data()[idx(t)]).sum();
                        for t in 0..len {
                            gx[idx(t)] = y.data()[idx(t)] * (g.data()[idx(t)] - dot);
                        }
                    }
                }
                acc(*x, Array::from_vec(y.shape(), gx).expect("softmax grad"));
            }
            Op::LogSoftmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = kernels::split_at_axis(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let total: T = (0..len).map(|t| g.data()[idx(t)]).sum();
                        for t in 0..len {
                            gx[idx(t)] = g.data()[idx(t)] - y.data()[idx(t)].exp() * total;
                        }
                    }
                }
                acc(*x, Array::from_vec(y.shape(), gx).expect("log_softmax grad"));
            }
            Op::Correlate { x, w, geom, plan } => {
                let (input, weight) = (val(*x).data(), val(*w).data());
                let out_ch = val(*w).shape()[0];
                let rows = plan.rows();
                let cols = plan.frames() * geom.sites();
                let sample = geom.in_channels * geom.height * geom.width;
                let mut col = vec![T::zero(); rows * cols];
                let mut gcol = vec![T::zero(); rows * cols];
                let mut gw = vec![T::zero(); out_ch * rows];
                let mut gx = vec![T::zero(); input.len()];
                for (n, gout) in g.data().chunks_exact(out_ch * cols).enumerate() {
                    kernels::im2col(&input[n * sample..][..sample], geom, plan, &mut col);
                    T::gemm(
                        out_ch,
                        cols,
                        rows,
                        T::one(),
                        gout,
                        (cols as isize, 1),
                        &col,
                        (1, cols as isize),
                        T::one(),
                        &mut gw,
                        (rows as isize, 1),
                    );
                    T::gemm(
                        rows,
                        out_ch,
                        cols,
                        T::one(),
                        weight,
                        (1, rows as isize),
                        gout,
                        (cols as isize, 1),
                        T::zero(),
                        &mut gcol,
                        (cols as isize, 1),
                    );
                    kernels::col2im(&gcol, geom, plan, &mut gx[n * sample..][..sample]);
                }
                acc(*x, Array::from_vec(val(*x).shape(), gx).expect("correlation grad"));
                acc(*w, Array::from_vec(val(*w).shape(), gw).expect("correlation grad"));
            }
            Op::Gather { x, index } => {
                let mut gx = Array::zeros(val(*x).shape());
                let dst = gx.data_mut();
                for (&src, &gv) in index.iter().zip(g.data()) {
                    dst[src] += gv;
                }
                acc(*x, gx);
            }
            Op::Standardize { x, axes, inv_std } => {
                acc(*x, fused::standardize_backward(g, &node.value, inv_std, axes));
            }
            Op::DegreeSoftmax { s, dims } => {
                let sv = val(*s);
                let gs = fused::degree_softmax_backward(sv.data(), node.value.data(), g.data(), dims);
                acc(*s, Array::from_vec(sv.shape(), gs).expect("degree grad"));
            }
            Op::RouteSquash { s, c, dims } => {
                let (sv, cv) = (val(*s), val(*c));
                let (gs, gc) = fused::route_squash_backward(sv.data(), cv.data(), g.data(), dims);
                acc(*s, Array::from_vec(sv.shape(), gs).expect("route grad"));
                acc(*c, Array::from_vec(cv.shape(), gc).expect("route grad"));
            }
        }
    }
}

fn zip_same<T: Real>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    kernels::zip_broadcast("zip", a, b, f).expect("identical shapes")
}

/// `x - mean(x, axes)` and the number of elements pooled per statistic.
fn centered<T: Real>(x: &Array<T>, axes: &[usize]) -> (Array<T>, usize) {
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let mut mean = kernels::sum_axes(x, axes);
    mean.scale_in_place(T::one() / T::lit(count as f64));
    let c = kernels::zip_broadcast("center", x, &mean, |a, b| a - b).expect("broadcastable");
    (c, count)
}

fn softmax_along<T: Real>(x: &Array<T>, axis: usize, log: bool) -> Result<Array<T>> {
    kernels::check_axes("softmax", x.shape(), &[axis])?;
    let (outer, len, inner) = kernels::split_at_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| src[idx(t)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..len).map(|t| (src[idx(t)] - max).exp()).sum();
            let log_total = total.ln();
            for t in 0..len {
                let shifted = src[idx(t)] - max;
                out[idx(t)] = if log {
                    shifted - log_total
                } else {
                    shifted.exp() / total
                };
            }
        }
    }
    Array::from_vec(x.shape(), out)
}

