//! The p4 group: integer translations of Z² semidirect with rotations by
//! multiples of 90°, and its actions on points, planar fields and fields over
//! the group.
//!
//! Planes are stored `[.., H, W]` with row index `y` increasing upward and
//! column index `x` increasing to the right. Field actions rotate about the
//! grid center `((W-1)/2, (H-1)/2)`; that center may be a half-integer, so the
//! index arithmetic runs on doubled, centered coordinates and stays exact.
//! Locations mapped outside the grid read as zero.

use crate::tensor::{Array, Real};

/// Number of rotational states in p4.
pub const ROTATIONS: usize = 4;

/// `(r, u, v)`: counterclockwise rotation by `r * 90°` followed by the
/// translation `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    r: u8,
    pub u: i64,
    pub v: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }
}

/// Rotates `(x, y)` counterclockwise by `r * 90°`.
pub fn rotate_vector(r: u8, x: i64, y: i64) -> (i64, i64) {
    match r % 4 {
        0 => (x, y),
        1 => (-y, x),
        2 => (-x, -y),
        _ => (y, -x),
    }
}

impl GroupElement {
    pub const IDENTITY: Self = Self { r: 0, u: 0, v: 0 };

    pub fn new(r: i64, u: i64, v: i64) -> Self {
        Self {
            r: r.rem_euclid(4) as u8,
            u,
            v,
        }
    }

    pub fn rotation(r: i64) -> Self {
        Self::new(r, 0, 0)
    }

    pub fn translation(u: i64, v: i64) -> Self {
        Self::new(0, u, v)
    }

    pub fn r(&self) -> u8 {
        self.r
    }

    /// `self . other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let (du, dv) = rotate_vector(self.r, other.u, other.v);
        Self {
            r: (self.r + other.r) % 4,
            u: self.u + du,
            v: self.v + dv,
        }
    }

    pub fn inverse(&self) -> Self {
        let r_inv = (4 - self.r) % 4;
        let (u, v) = rotate_vector(r_inv, self.u, self.v);
        Self {
            r: r_inv,
            u: -u,
            v: -v,
        }
    }

    pub fn act_on_point(&self, p: Point) -> Point {
        let (x, y) = rotate_vector(self.r, p.x, p.y);
        Point::new(x + self.u, y + self.v)
    }
}

/// Source plane index for every destination pixel of `[L_g f]` on an
/// `h x w` grid, or `None` when `g^{-1} x` falls outside the grid.
fn plane_source_map(g: &GroupElement, h: usize, w: usize) -> Vec<Option<usize>> {
    let inv = g.inverse();
    let (wm, hm) = (w as i64 - 1, h as i64 - 1);
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            // doubled coordinates relative to the grid center
            let (cx, cy) = (2 * x - wm, 2 * y - hm);
            let (rx, ry) = rotate_vector(inv.r, cx, cy);
            let (sx, sy) = (rx + 2 * inv.u + wm, ry + 2 * inv.v + hm);
            let inside = sx % 2 == 0
                && sy % 2 == 0
                && (0..=2 * wm).contains(&sx)
                && (0..=2 * hm).contains(&sy);
            map.push(inside.then(|| (sy / 2) as usize * w + (sx / 2) as usize));
        }
    }
    map
}

fn transform_planes<T: Real>(dst: &mut [T], src: &[T], map: &[Option<usize>]) {
    for (d, m) in dst.iter_mut().zip(map) {
        *d = m.map_or(T::zero(), |i| src[i]);
    }
}

/// `[L_g f](x) = f(g^{-1} x)` for a planar field of shape `[.., H, W]`.
pub fn act_on_scalar_field<T: Real>(g: &GroupElement, f: &Array<T>) -> Array<T> {
    let shape = f.shape();
    assert!(shape.len() >= 2, "scalar field needs [.., H, W]");
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = h * w;
    let map = plane_source_map(g, h, w);
    let mut out = Array::zeros(shape);
    for (dst, src) in out
        .data_mut()
        .chunks_mut(plane)
        .zip(f.data().chunks(plane))
    {
        transform_planes(dst, src, &map);
    }
    out
}

/// `[L_g f](h) = f(g^{-1} h)` for a field over p4 of shape `[.., 4, H, W]`:
/// rotation channels shift cyclically by `r_g` and every plane is moved
/// spatially.
pub fn act_on_group_field<T: Real>(g: &GroupElement, f: &Array<T>) -> Array<T> {
    let shape = f.shape();
    assert!(
        shape.len() >= 3 && shape[shape.len() - 3] == ROTATIONS,
        "group field needs [.., 4, H, W], got {shape:?}"
    );
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = h * w;
    let map = plane_source_map(g, h, w);
    let shift = g.r() as usize;
    let mut out = Array::zeros(shape);
    let block = ROTATIONS * plane;
    for (dst, src) in out
        .data_mut()
        .chunks_mut(block)
        .zip(f.data().chunks(block))
    {
        for r in 0..ROTATIONS {
            let r_src = (r + ROTATIONS - shift) % ROTATIONS;
            transform_planes(
                &mut dst[r * plane..(r + 1) * plane],
                &src[r_src * plane..(r_src + 1) * plane],
                &map,
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 3x3 homogeneous matrix of a group element.
    fn matrix(g: &GroupElement) -> [[i64; 3]; 3] {
        let (c, s) = match g.r() {
            0 => (1, 0),
            1 => (0, 1),
            2 => (-1, 0),
            _ => (0, -1),
        };
        [[c, -s, g.u], [s, c, g.v], [0, 0, 1]]
    }

    fn matmul(a: [[i64; 3]; 3], b: [[i64; 3]; 3]) -> [[i64; 3]; 3] {
        let mut c = [[0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    }

    fn from_matrix(m: [[i64; 3]; 3]) -> GroupElement {
        let r = match (m[0][0], m[1][0]) {
            (1, 0) => 0,
            (0, 1) => 1,
            (-1, 0) => 2,
            _ => 3,
        };
        GroupElement::new(r, m[0][2], m[1][2])
    }

    #[test]
    fn compose_examples_match_matrix_oracle() {
        let g = GroupElement::new(1, 0, 0);
        let h = GroupElement::new(0, 1, 0);
        assert_eq!(g.compose(&h), GroupElement::new(1, 0, 1));
        assert_eq!(from_matrix(matmul(matrix(&g), matrix(&h))), GroupElement::new(1, 0, 1));

        let g = GroupElement::new(2, 1, 1);
        let h = GroupElement::new(2, 0, 0);
        assert_eq!(g.compose(&h), GroupElement::new(0, 1, 1));
        assert_eq!(from_matrix(matmul(matrix(&g), matrix(&h))), GroupElement::new(0, 1, 1));

        let any = GroupElement::new(3, -4, 7);
        assert_eq!(GroupElement::IDENTITY.compose(&any), any);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(GroupElement::IDENTITY.inverse(), GroupElement::IDENTITY);
        assert_eq!(GroupElement::new(1, 1, 0).inverse(), GroupElement::new(3, 0, 1));
        assert_eq!(GroupElement::new(2, 3, -2).inverse(), GroupElement::new(2, 3, -2));
        for g in [GroupElement::new(1, 1, 0), GroupElement::new(2, 3, -2)] {
            assert_eq!(g.compose(&g.inverse()), GroupElement::IDENTITY);
        }
    }

    #[test]
    fn act_on_point_examples() {
        let p = Point::new(5, 7);
        assert_eq!(GroupElement::IDENTITY.act_on_point(p), p);
        assert_eq!(GroupElement::rotation(1).act_on_point(Point::new(1, 0)), Point::new(0, 1));
        assert_eq!(GroupElement::new(0, 2, -1).act_on_point(Point::new(1, 1)), Point::new(3, 0));
    }

    #[test]
    fn group_axioms_hold_exhaustively_on_a_window() {
        let elements: Vec<GroupElement> = (0..4)
            .flat_map(|r| (-8..=8).flat_map(move |u| (-8..=8).map(move |v| GroupElement::new(r, u, v))))
            .collect();
        for g in &elements {
            assert!(g.r() < 4);
            assert_eq!(g.compose(&g.inverse()), GroupElement::IDENTITY);
            assert_eq!(g.inverse().compose(g), GroupElement::IDENTITY);
            assert_eq!(g.compose(&GroupElement::IDENTITY), *g);
            assert_eq!(from_matrix(matrix(g)), *g);
        }
        // associativity and matrix agreement on a deterministic sample of triples
        for (i, g) in elements.iter().enumerate().step_by(37) {
            let h = &elements[(i * 7 + 11) % elements.len()];
            let k = &elements[(i * 13 + 5) % elements.len()];
            assert_eq!(g.compose(h).compose(k), g.compose(&h.compose(k)));
            assert_eq!(from_matrix(matmul(matrix(g), matrix(h))), g.compose(h));
            let p = Point::new(i as i64 % 9 - 4, i as i64 % 5 - 2);
            assert_eq!(g.act_on_point(h.act_on_point(p)), g.compose(h).act_on_point(p));
        }
    }

    #[test]
    fn rotating_a_delta_moves_it_like_a_point() {
        // 5x5 grid has an integer center at (2, 2); point coordinates are
        // relative to that center.
        let g = GroupElement::rotation(1);
        for (x, y) in [(0usize, 0usize), (4, 1), (3, 2), (2, 2)] {
            let mut f = Array::<f64>::zeros([1, 5, 5]);
            f.set(&[0, y, x], 1.0);
            let out = act_on_scalar_field(&g, &f);
            let moved = g.act_on_point(Point::new(x as i64 - 2, y as i64 - 2));
            let (mx, my) = ((moved.x + 2) as usize, (moved.y + 2) as usize);
            for yy in 0..5 {
                for xx in 0..5 {
                    let want = if (xx, yy) == (mx, my) { 1.0 } else { 0.0 };
                    assert_eq!(out.at(&[0, yy, xx]), want);
                }
            }
        }
    }

    #[test]
    fn translation_is_a_pure_index_shift() {
        let f = Array::<f32>::from_fn([2, 4, 6], |i| i as f32 * 0.5 + 1.0);
        let g = GroupElement::translation(2, -1);
        let out = act_on_scalar_field(&g, &f);
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..6 {
                    let (sx, sy) = (x as i64 - 2, y as i64 + 1);
                    let want = if (0..6).contains(&sx) && (0..4).contains(&sy) {
                        f.at(&[c, sy as usize, sx as usize])
                    } else {
                        0.0
                    };
                    assert_eq!(out.at(&[c, y, x]), want);
                }
            }
        }
    }

    #[test]
    fn group_field_rotation_shifts_rotation_channels() {
        let mut f = Array::<f64>::zeros([1, 4, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                f.set(&[0, 0, y, x], (1 + y * 3 + x) as f64);
            }
        }
        let out = act_on_group_field(&GroupElement::rotation(1), &f);
        for r in 0..4 {
            let plane_sum: f64 = (0..9).map(|i| out.at(&[0, r, i / 3, i % 3]).abs()).sum();
            assert_eq!(plane_sum > 0.0, r == 1, "rotation channel {r}");
        }
    }

    #[test]
    fn field_actions_are_homomorphic() {
        let f = Array::<f64>::from_fn([2, 4, 7, 7], |i| ((i * 31) % 17) as f64 - 8.0);
        let s = Array::<f64>::from_fn([3, 6, 6], |i| ((i * 7) % 13) as f64);
        let gs = [
            GroupElement::new(1, 0, 0),
            GroupElement::new(3, 1, -1),
            GroupElement::new(2, 0, 2),
        ];
        for g in &gs {
            for h in &gs {
                let gh = g.compose(h);
                // pure rotations never leave the grid, so equality is exact
                if g.u == 0 && g.v == 0 && h.u == 0 && h.v == 0 {
                    assert_eq!(act_on_group_field(g, &act_on_group_field(h, &f)), act_on_group_field(&gh, &f));
                    assert_eq!(act_on_scalar_field(g, &act_on_scalar_field(h, &s)), act_on_scalar_field(&gh, &s));
                } else {
                    // the two-step path may lose pixels the direct path keeps
                    let two = act_on_group_field(g, &act_on_group_field(h, &f));
                    let one = act_on_group_field(&gh, &f);
                    for (a, b) in two.data().iter().zip(one.data()) {
                        assert!(*a == *b || *a == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn inverse_action_restores_interior() {
        let f = Array::<f64>::from_fn([1, 8, 8], |i| i as f64 + 1.0);
        let g = GroupElement::new(1, 1, 0);
        let back = act_on_scalar_field(&g, &act_on_scalar_field(&g.inverse(), &f));
        for y in 2..6 {
            for x in 2..6 {
                assert_eq!(back.at(&[0, y, x]), f.at(&[0, y, x]));
            }
        }
        assert_eq!(act_on_scalar_field(&GroupElement::IDENTITY, &f), f);
    }
}
