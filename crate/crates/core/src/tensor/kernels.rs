//! Raw loops behind the differentiable primitives. Nothing here records onto
//! a tape.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::array::{numel, strides_of, Array, Real};

/// Numpy-style broadcast of two shapes, restricted to size-1 axes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pa = left_pad(a, rank);
    let pb = left_pad(b, rank);
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            }),
        })
        .collect()
}

fn left_pad(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Strides of `shape` viewed inside `target` (same rank after padding), with
/// zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let padded = left_pad(shape, target.len());
    let strides = strides_of(&padded);
    padded
        .iter()
        .zip(strides)
        .map(|(&d, s)| if d == 1 { 0 } else { s })
        .collect()
}

/// Walks every index of `shape` in row-major order and reports the running
/// offsets into two strided views.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    walk_runs(shape, sa, sb, |oa, ob, len, ia, ib| {
        for t in 0..len {
            f(oa + t * ia, ob + t * ib);
        }
    });
}

/// Drops unit axes and merges neighbours that are contiguous in both views,
/// so the innermost loop runs as long as possible.
fn coalesce(shape: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut out: (Vec<usize>, Vec<usize>, Vec<usize>) = (vec![], vec![], vec![]);
    for i in 0..shape.len() {
        if shape[i] == 1 {
            continue;
        }
        if let (Some(&d), Some(&a), Some(&b)) = (out.0.last(), out.1.last(), out.2.last()) {
            if a == sa[i] * shape[i] && b == sb[i] * shape[i] {
                let last = out.0.len() - 1;
                out.0[last] = d * shape[i];
                out.1[last] = sa[i];
                out.2[last] = sb[i];
                continue;
            }
        }
        out.0.push(shape[i]);
        out.1.push(sa[i]);
        out.2.push(sb[i]);
    }
    out
}

/// Like [`walk2`], but reports whole innermost runs as
/// `(offset_a, offset_b, len, stride_a, stride_b)`.
fn walk_runs(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    if numel(shape) == 0 {
        return;
    }
    let (shape, sa, sb) = coalesce(shape, sa, sb);
    if shape.is_empty() {
        f(0, 0, 1, 0, 0);
        return;
    }
    let last = shape.len() - 1;
    let inner = shape[last];
    let (ia, ib) = (sa[last], sb[last]);
    let outer_shape = &shape[..last];
    let mut counter = vec![0usize; last];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    for _ in 0..numel(outer_shape) {
        f(base_a, base_b, inner, ia, ib);
        for axis in (0..last).rev() {
            counter[axis] += 1;
            base_a += sa[axis];
            base_b += sb[axis];
            if counter[axis] < outer_shape[axis] {
                break;
            }
            base_a -= sa[axis] * outer_shape[axis];
            base_b -= sb[axis] * outer_shape[axis];
            counter[axis] = 0;
        }
    }
}

pub fn zip_broadcast<T: Real>(
    op: &'static str,
    a: &Array<T>,
    b: &Array<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Array<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Array::from_vec(a.shape(), data);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel(&shape));
    walk_runs(&shape, &sa, &sb, |oa, ob, len, ia, ib| match (ia, ib) {
        (1, 1) => data.extend(da[oa..oa + len].iter().zip(&db[ob..ob + len]).map(|(&x, &y)| f(x, y))),
        (1, 0) => {
            let y = db[ob];
            data.extend(da[oa..oa + len].iter().map(|&x| f(x, y)));
        }
        (0, 1) => {
            let x = da[oa];
            data.extend(db[ob..ob + len].iter().map(|&y| f(x, y)));
        }
        _ => data.extend((0..len).map(|t| f(da[oa + t * ia], db[ob + t * ib]))),
    });
    Array::from_vec(shape, data)
}

/// Sums `grad` down to `shape` over the axes that were broadcast.
pub fn reduce_to_shape<T: Real>(grad: &Array<T>, shape: &[usize]) -> Array<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let rank = grad.ndim();
    let padded = left_pad(shape, rank);
    let out_strides = broadcast_strides(&padded, grad.shape());
    let in_strides = strides_of(grad.shape());
    let mut out = vec![T::zero(); numel(shape)];
    let g = grad.data();
    walk_runs(grad.shape(), &in_strides, &out_strides, |gi, oi, len, ig, io| match (ig, io) {
        (1, 0) => out[oi] += g[gi..gi + len].iter().copied().sum::<T>(),
        (1, 1) => {
            for (o, &v) in out[oi..oi + len].iter_mut().zip(&g[gi..gi + len]) {
                *o += v;
            }
        }
        _ => {
            for t in 0..len {
                out[oi + t * io] += g[gi + t * ig];
            }
        }
    });
    Array::from_vec(shape, out).expect("reduced shape")
}

/// Expands `x` along its size-1 axes to `shape`.
pub fn broadcast_to<T: Real>(x: &Array<T>, shape: &[usize]) -> Array<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let sx = broadcast_strides(x.shape(), shape);
    let unit = strides_of(shape);
    let d = x.data();
    let mut data = Vec::with_capacity(numel(shape));
    walk_runs(shape, &sx, &unit, |xi, _, len, ix, _| match ix {
        0 => data.extend(std::iter::repeat_n(d[xi], len)),
        1 => data.extend_from_slice(&d[xi..xi + len]),
        _ => data.extend((0..len).map(|t| d[xi + t * ix])),
    });
    Array::from_vec(shape, data).expect("broadcast shape")
}

/// Reads the window of `big` starting at per-axis `offsets` into `small`.
pub fn window_read<T: Real>(
    small_shape: &[usize],
    big_shape: &[usize],
    offsets: &[usize],
    big: &[T],
    small: &mut [T],
) {
    let big_strides = strides_of(big_shape);
    let base: usize = offsets.iter().zip(&big_strides).map(|(o, s)| o * s).sum();
    let small_strides = strides_of(small_shape);
    walk2(small_shape, &small_strides, &big_strides, |si, bi| {
        small[si] = big[base + bi];
    });
}

/// Writes `small` into the window of `big` starting at per-axis `offsets`.
pub fn window_write<T: Real>(
    small_shape: &[usize],
    big_shape: &[usize],
    offsets: &[usize],
    small: &[T],
    big: &mut [T],
) {
    let big_strides = strides_of(big_shape);
    let base: usize = offsets.iter().zip(&big_strides).map(|(o, s)| o * s).sum();
    let small_strides = strides_of(small_shape);
    walk2(small_shape, &small_strides, &big_strides, |si, bi| {
        big[base + bi] = small[si];
    });
}

pub fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<()> {
    for &axis in axes {
        if axis >= shape.len() {
            return Err(Error::BadAxis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyReduction {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
    }
    Ok(())
}

pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// Sum over `axes`, keeping them as size-1 axes.
pub fn sum_axes<T: Real>(x: &Array<T>, axes: &[usize]) -> Array<T> {
    let shape = reduced_shape(x.shape(), axes);
    reduce_to_shape(x, &shape)
}

/// Maximum over `axes` (kept as size-1), with the flat input index of the
/// first maximal element for every output slot.
pub fn max_axes<T: Real>(x: &Array<T>, axes: &[usize]) -> (Array<T>, Vec<usize>) {
    let shape = reduced_shape(x.shape(), axes);
    let out_strides = broadcast_strides(&shape, x.shape());
    let in_strides = strides_of(x.shape());
    let mut best = vec![T::neg_infinity(); numel(&shape)];
    let mut arg = vec![usize::MAX; numel(&shape)];
    let d = x.data();
    walk2(x.shape(), &in_strides, &out_strides, |xi, oi| {
        if arg[oi] == usize::MAX || d[xi] > best[oi] {
            best[oi] = d[xi];
            arg[oi] = xi;
        }
    });
    (Array::from_vec(shape, best).expect("max shape"), arg)
}

pub fn permute<T: Real>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let in_strides = strides_of(x.shape());
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; shape.len()];
    let d = x.data();
    let mut data = Vec::with_capacity(x.len());
    walk2(&shape, &strides, &zeros, |xi, _| data.push(d[xi]));
    Array::from_vec(shape, data).expect("permuted shape")
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) block sizes.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source of one patch-matrix row: an input channel and the offset of the
/// sampled pixel from the output site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    pub channel: usize,
    pub dy: isize,
    pub dx: isize,
}

/// Row sources of a patch matrix, one set per frame. All frames share one
/// filter, so each filter produces `frames` output planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    frames: usize,
    rows: usize,
    taps: Vec<Tap>,
}

impl PatchPlan {
    /// `taps[f * rows + row]` feeds patch row `row` in frame `f`.
    pub fn new(frames: usize, rows: usize, taps: Vec<Tap>) -> Self {
        assert_eq!(taps.len(), frames * rows, "one tap per frame and row");
        Self { frames, rows, taps }
    }

    /// The single-frame plan of a `k×k` correlation over `channels` inputs
    /// with zero padding `pad`.
    pub fn planar(channels: usize, kernel: usize, pad: usize) -> Self {
        let mut taps = Vec::with_capacity(channels * kernel * kernel);
        for channel in 0..channels {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    taps.push(Tap {
                        channel,
                        dy: ky as isize - pad as isize,
                        dx: kx as isize - pad as isize,
                    });
                }
            }
        }
        Self::new(1, channels * kernel * kernel, taps)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn tap(&self, frame: usize, row: usize) -> Tap {
        self.taps[frame * self.rows + row]
    }

    /// One more than the largest channel read.
    pub fn channels(&self) -> usize {
        self.taps.iter().map(|t| t.channel + 1).max().unwrap_or(0)
    }
}

/// Spatial geometry of a patch correlation. Output site `(oy, ox)` sits over
/// input pixel `(oy * stride, ox * stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn sites(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output indices `o < out` whose source `o * stride + d` lies in `0..len`.
fn valid_range(out: usize, stride: usize, d: isize, len: usize) -> Range<usize> {
    let s = stride as isize;
    let lo = if d >= 0 { 0 } else { (-d + s - 1) / s };
    let hi = (len as isize - d + s - 1).div_euclid(s).clamp(0, out as isize);
    lo.min(hi) as usize..hi as usize
}

/// Unfolds one sample `[C, H, W]` into a `[rows, frames*Ho*Wo]` patch matrix
/// whose columns are ordered `(frame, oy, ox)`. Every entry of `col` is written.
pub fn im2col<T: Real>(sample: &[T], g: &ConvGeometry, plan: &PatchPlan, col: &mut [T]) {
    let (ho, wo, frames) = (g.out_height, g.out_width, plan.frames);
    let cols = frames * g.sites();
    let plane = g.height * g.width;
    for row in 0..plan.rows {
        let dst = &mut col[row * cols..(row + 1) * cols];
        for f in 0..frames {
            let tap = plan.tap(f, row);
            let src = &sample[tap.channel * plane..][..plane];
            let frame = &mut dst[f * ho * wo..][..ho * wo];
            let ys = valid_range(ho, g.stride, tap.dy, g.height);
            let xs = valid_range(wo, g.stride, tap.dx, g.width);
            frame[..ys.start * wo].fill(T::zero());
            frame[ys.end * wo..].fill(T::zero());
            for oy in ys {
                let iy = (oy * g.stride) as isize + tap.dy;
                let src_row = &src[iy as usize * g.width..][..g.width];
                let out_row = &mut frame[oy * wo..][..wo];
                out_row[..xs.start].fill(T::zero());
                out_row[xs.end..].fill(T::zero());
                if xs.is_empty() {
                    continue;
                }
                let first = ((xs.start * g.stride) as isize + tap.dx) as usize;
                let out = &mut out_row[xs.clone()];
                if g.stride == 1 {
                    out.copy_from_slice(&src_row[first..first + out.len()]);
                } else {
                    for (slot, &v) in out.iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                        *slot = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds patch gradients onto one sample's grid.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeometry, plan: &PatchPlan, sample: &mut [T]) {
    let (ho, wo, frames) = (g.out_height, g.out_width, plan.frames);
    let cols = frames * g.sites();
    let plane = g.height * g.width;
    for row in 0..plan.rows {
        let src = &col[row * cols..(row + 1) * cols];
        for f in 0..frames {
            let tap = plan.tap(f, row);
            let dst = &mut sample[tap.channel * plane..][..plane];
            let ys = valid_range(ho, g.stride, tap.dy, g.height);
            let xs = valid_range(wo, g.stride, tap.dx, g.width);
            if xs.is_empty() {
                continue;
            }
            for oy in ys {
                let iy = (oy * g.stride) as isize + tap.dy;
                let src_row = &src[(f * ho + oy) * wo..][..wo];
                let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                let first = ((xs.start * g.stride) as isize + tap.dx) as usize;
                let src = &src_row[xs.clone()];
                if g.stride == 1 {
                    for (slot, &v) in dst_row[first..first + src.len()].iter_mut().zip(src) {
                        *slot += v;
                    }
                } else {
                    for (slot, &v) in dst_row[first..].iter_mut().step_by(g.stride).zip(src) {
                        *slot += v;
                    }
                }
            }
        }
    }
}

/// Batched `[.., m, k] x [.., k, n]`; batch extents must agree exactly.
pub fn batched_matmul<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_a: bool,
    transpose_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    // Stored shapes: a is [m,k] (or [k,m] if transposed), b is [k,n] (or [n,k]).
    let a_strides = if transpose_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    let small = m * n * k < 2048;
    for i in 0..batch {
        let ab = &a[i * m * k..(i + 1) * m * k];
        let bb = &b[i * k * n..(i + 1) * k * n];
        let cb = &mut out[i * m * n..(i + 1) * m * n];
        if small {
            for r in 0..m {
                for c in 0..n {
                    let mut acc = T::zero();
                    for t in 0..k {
                        let av = ab[r * a_strides.0 as usize + t * a_strides.1 as usize];
                        let bv = bb[t * b_strides.0 as usize + c * b_strides.1 as usize];
                        acc += av * bv;
                    }
                    cb[r * n + c] = acc;
                }
            }
        } else {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                ab,
                a_strides,
                bb,
                b_strides,
                T::zero(),
                cb,
                (n as isize, 1),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 1, 3], &[1, 4, 3]).unwrap(), vec![2, 4, 3]);
        assert_eq!(broadcast_shape("t", &[3], &[2, 3]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let g = Array::<f64>::from_vec([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(reduce_to_shape(&g, &[1, 3]).data(), &[5., 7., 9.]);
        assert_eq!(reduce_to_shape(&g, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(reduce_to_shape(&g, &[]).data(), &[21.]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = Array::<f64>::from_fn([2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn max_axes_takes_first_maximum() {
        let x = Array::<f64>::from_vec([2, 3], vec![1., 5., 5., 2., 0., 2.]).unwrap();
        let (m, arg) = max_axes(&x, &[1]);
        assert_eq!(m.data(), &[5., 2.]);
        assert_eq!(arg, vec![1, 3]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 2,
            height: 5,
            width: 4,
            stride: 2,
            out_height: 3,
            out_width: 2,
        };
        let mut taps = PatchPlan::planar(2, 3, 1).taps;
        // a second frame reading the other channel, shifted
        let shifted: Vec<Tap> = taps
            .iter()
            .map(|t| Tap { channel: 1 - t.channel, dy: t.dx + 1, dx: -t.dy })
            .collect();
        taps.extend(shifted);
        let plan = PatchPlan::new(2, 18, taps);
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..18 * 2 * g.sites()).map(|i| ((i * 3) % 13) as f64 - 6.0).collect();
        // stale values must be overwritten, including the zero padding
        let mut col = vec![f64::NAN; y.len()];
        im2col(&x, &g, &plan, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &plan, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn valid_range_matches_a_scan() {
        for (out, stride, d, len) in [(5, 1, -2, 5), (3, 2, 1, 5), (3, 2, -1, 5), (4, 3, 6, 4), (2, 1, -4, 3), (1, 2, 0, 1)] {
            let want: Vec<usize> = (0..out)
                .filter(|&o| (0..len as isize).contains(&((o * stride) as isize + d)))
                .collect();
            assert_eq!(valid_range(out, stride, d, len).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn planar_plan_offsets_follow_the_padding() {
        let plan = PatchPlan::planar(2, 3, 1);
        assert_eq!(plan.rows(), 18);
        assert_eq!(plan.tap(0, 0), Tap { channel: 0, dy: -1, dx: -1 });
        assert_eq!(plan.tap(0, 14), Tap { channel: 1, dy: 0, dx: 1 });
        assert_eq!(plan.channels(), 2);
    }

    #[test]
    fn batched_matmul_small_and_gemm_paths_agree() {
        let (m, k, n) = (13, 17, 11);
        let a: Vec<f64> = (0..m * k).map(|i| (i % 7) as f64 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 5) as f64 - 2.0).collect();
        let big = batched_matmul(&a, &b, 1, m, k, n, false, false);
        for r in 0..m {
            for c in 0..n {
                let want: f64 = (0..k).map(|t| a[r * k + t] * b[t * n + c]).sum();
                assert_eq!(big[r * n + c], want);
            }
        }
    }
}
