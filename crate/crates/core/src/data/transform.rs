//! Random roto-translations of images and the crop/flip augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Extent of a random transformation: integer translations up to `tr` pixels
/// per axis and rotations up to `rot` degrees either way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub tr: u32,
    pub rot: f64,
}

impl TransformSpec {
    pub const IDENTITY: Self = Self { tr: 0, rot: 0.0 };

    pub fn new(tr: u32, rot: f64) -> Result<Self> {
        let spec = Self { tr, rot };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.rot) {
            return Err(Error::invalid(format!(
                "rotation extent {} outside [0, 180] degrees",
                self.rot
            )));
        }
        Ok(())
    }

    /// Label used for suites and metric columns, e.g. `(2,180)`.
    pub fn label(&self) -> String {
        format!("({},{})", self.tr, self.rot)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Transform {
        let t = self.tr as i64;
        let dx = rng.gen_range(-t..=t);
        let dy = rng.gen_range(-t..=t);
        let angle = if self.rot > 0.0 {
            rng.gen_range(-self.rot..self.rot)
        } else {
            0.0
        };
        Transform { dx, dy, angle }
    }
}

/// A concrete translation `(dx, dy)` followed by a counterclockwise rotation
/// of `angle` degrees about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub dx: i64,
    pub dy: i64,
    pub angle: f64,
}

/// Random stream for item `index` of stream `stream` under `seed`. Streams
/// are independent of the order in which items are visited.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Exact cosine and sine at multiples of 90°.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let quarters = degrees / 90.0;
    if quarters.fract() == 0.0 {
        match (quarters as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Integer shift by `(dx, dy)` of every `[.., H, W]` plane, zero fill.
fn shift(image: &Array<f32>, dx: i64, dy: i64) -> Array<f32> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2] as i64, s[s.len() - 1] as i64);
    let mut out = Array::zeros(s);
    for (dst, src) in out
        .data_mut()
        .chunks_mut((h * w) as usize)
        .zip(image.data().chunks((h * w) as usize))
    {
        for y in 0..h {
            let sy = y - dy;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if (0..w).contains(&sx) {
                    dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
                }
            }
        }
    }
    out
}

/// Applies `t` to a `[C, H, W]` image: output pixel `p` reads the input at
/// `T⁻¹R⁻¹p` with bilinear interpolation and zero outside the grid.
pub fn apply(image: &Array<f32>, t: &Transform) -> Array<f32> {
    if t.angle == 0.0 {
        return shift(image, t.dx, t.dy);
    }
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (cos, sin) = cos_sin(t.angle);
    // source coordinates and bilinear corners are shared by all planes
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * px + sin * py + cx - t.dx as f64;
            let sy = -sin * px + cos * py + cy - t.dy as f64;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let mut corners = [(usize::MAX, 0.0f64); 4];
            for (n, (ox, oy, wt)) in [
                (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                (1.0, 0.0, fx * (1.0 - fy)),
                (0.0, 1.0, (1.0 - fx) * fy),
                (1.0, 1.0, fx * fy),
            ]
            .into_iter()
            .enumerate()
            {
                let (qx, qy) = (x0 + ox, y0 + oy);
                if wt != 0.0 && qx >= 0.0 && qy >= 0.0 && qx < w as f64 && qy < h as f64 {
                    corners[n] = (qy as usize * w + qx as usize, wt);
                }
            }
            taps.push(corners);
        }
    }
    let mut out = Array::zeros(s);
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(image.data().chunks(h * w)) {
        for (d, corners) in dst.iter_mut().zip(&taps) {
            let v: f64 = corners
                .iter()
                .filter(|(i, _)| *i != usize::MAX)
                .map(|&(i, wt)| wt * f64::from(src[i]))
                .sum();
            *d = v as f32;
        }
    }
    out
}

/// Draws a transformation from `spec` and applies it.
pub fn random_transform(image: &Array<f32>, spec: &TransformSpec, rng: &mut impl Rng) -> Array<f32> {
    apply(image, &spec.sample(rng))
}

/// Random crop of the 4-pixel zero-padded image followed by a horizontal flip
/// with probability 1/2.
pub fn augment(image: &Array<f32>, rng: &mut impl Rng) -> Array<f32> {
    let dx = rng.gen_range(-4..=4);
    let dy = rng.gen_range(-4..=4);
    let mut out = shift(image, dx, dy);
    if rng.gen_bool(0.5) {
        let w = image.shape()[image.ndim() - 1];
        for row in out.data_mut().chunks_mut(w) {
            row.reverse();
        }
    }
    out
}
