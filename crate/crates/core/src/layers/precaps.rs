use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::gconv::{Domain, GroupConv};
use crate::layers::norm::LayerNorm;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// Axes of a `[B, C, 4, H, W]` field that a PreCaps layer norm pools over.
const CHANNEL_ROTATION: [usize; 2] = [1, 2];

/// Output width and stride of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// `relu(norm(gconv(relu(norm(gconv(x, s))))) + skip(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: GroupConv,
    pub norm1: LayerNorm,
    pub conv2: GroupConv,
    pub norm2: LayerNorm,
    /// Strided 1×1 correlation, present iff the stride or width changes.
    pub skip: Option<GroupConv>,
}

fn group_norm<T: Real>(params: &mut ParamStore<T>, name: &str, channels: usize) -> LayerNorm {
    LayerNorm::new(params, name, &[1, channels, 1, 1, 1], &CHANNEL_ROTATION)
}

impl ResidualBlock {
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        spec: BlockSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out = spec.channels;
        let conv1 = GroupConv::new(
            params,
            &format!("{name}.conv1"),
            Domain::Group,
            in_channels,
            out,
            3,
            spec.stride,
            false,
            rng,
        )?;
        let norm1 = group_norm(params, &format!("{name}.norm1"), out);
        let conv2 = GroupConv::new(
            params,
            &format!("{name}.conv2"),
            Domain::Group,
            out,
            out,
            3,
            1,
            false,
            rng,
        )?;
        let norm2 = group_norm(params, &format!("{name}.norm2"), out);
        let skip = if spec.stride != 1 || in_channels != out {
            Some(GroupConv::new(
                params,
                &format!("{name}.skip"),
                Domain::Group,
                in_channels,
                out,
                1,
                spec.stride,
                false,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            skip,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = self.norm1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let h = self.norm2.forward(tape, p, h)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(tape, p, x)?,
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.relu(sum))
    }
}

/// Lifting stem followed by a stack of residual blocks.
#[derive(Debug, Clone)]
pub struct PreCaps {
    pub stem: GroupConv,
    pub stem_norm: LayerNorm,
    pub blocks: Vec<ResidualBlock>,
    pub out_channels: usize,
}

impl PreCaps {
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        in_channels: usize,
        stem_channels: usize,
        blocks: &[BlockSpec],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stem = GroupConv::new(
            params,
            "precaps.stem",
            Domain::Plane,
            in_channels,
            stem_channels,
            3,
            1,
            false,
            rng,
        )?;
        let stem_norm = group_norm(params, "precaps.stem_norm", stem_channels);
        let mut width = stem_channels;
        let mut built = Vec::with_capacity(blocks.len());
        for (i, spec) in blocks.iter().enumerate() {
            built.push(ResidualBlock::new(
                params,
                &format!("precaps.block{i}"),
                width,
                *spec,
                rng,
            )?);
            width = spec.channels;
        }
        Ok(Self {
            stem,
            stem_norm,
            blocks: built,
            out_channels: width,
        })
    }

    /// `[B, C, H, W]` image to `[B, C', 4, H', W']` group field.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let h = self.stem.forward(tape, p, image)?;
        let h = self.stem_norm.forward(tape, p, h)?;
        let mut h = tape.relu(h);
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

/// Planar stand-in for [`PreCaps`]: three 3×3 convolutions with layer norm
/// over channels and relu, then a lifting correlation with norm and relu.
#[derive(Debug, Clone)]
pub struct PlanarStem {
    pub convs: Vec<(crate::params::ParamId, usize)>,
    pub norms: Vec<LayerNorm>,
    pub lift: GroupConv,
    pub lift_norm: LayerNorm,
    pub out_channels: usize,
}

impl PlanarStem {
    /// `widths`/`strides` give the three planar layers; the lift keeps the last
    /// width.
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        in_channels: usize,
        widths: [usize; 3],
        strides: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if strides.contains(&0) {
            return Err(Error::invalid("planar stem strides must be at least 1"));
        }
        let mut convs = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        let mut c_in = in_channels;
        for (i, (&w, &s)) in widths.iter().zip(&strides).enumerate() {
            let id = params.register_normal(
                format!("noprecaps.conv{i}.weight"),
                &[w, c_in, 3, 3],
                c_in * 9,
                rng,
            );
            convs.push((id, s));
            norms.push(LayerNorm::new(
                params,
                &format!("noprecaps.norm{i}"),
                &[1, w, 1, 1],
                &[1],
            ));
            c_in = w;
        }
        let lift = GroupConv::new(
            params,
            "noprecaps.lift",
            Domain::Plane,
            c_in,
            c_in,
            3,
            1,
            false,
            rng,
        )?;
        let lift_norm = group_norm(params, "noprecaps.lift_norm", c_in);
        Ok(Self {
            convs,
            norms,
            lift,
            lift_norm,
            out_channels: c_in,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let mut h = image;
        for ((id, stride), norm) in self.convs.iter().zip(&self.norms) {
            h = tape.conv2d(h, p.var(*id), *stride, 1)?;
            h = norm.forward(tape, p, h)?;
            h = tape.relu(h);
        }
        let h = self.lift.forward(tape, p, h)?;
        let h = self.lift_norm.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }
}
