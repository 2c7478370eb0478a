//! Group-equivariant building blocks on p4.

pub mod gconv;
pub mod norm;
pub mod precaps;

pub use gconv::{correlate, group_plan, lifting_plan, Domain, GroupConv};
pub use norm::{layer_norm, standardize, LayerNorm};
pub use precaps::{BlockSpec, PlanarStem, PreCaps, ResidualBlock};
