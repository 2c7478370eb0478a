use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capsules::{ConvCaps, Head, PrimaryCaps};
use crate::error::{Error, Result};
use crate::layers::{BlockSpec, PlanarStem, PreCaps};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Var};

/// Architecture hyperparameters. Defaults give the full-size network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub capsule_types: usize,
    pub capsule_dims: usize,
    /// Number of ConvCaps layers, the class layer included.
    pub conv_caps_layers: usize,
    pub predictor_kernel: usize,
    /// Pool GlobalConNorm statistics per deeper type rather than over all of
    /// them.
    pub norm_per_type: bool,
    pub no_precaps: bool,
    pub no_projcaps: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let blocks = [(32, 1), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1), (128, 1)]
            .into_iter()
            .map(|(channels, stride)| BlockSpec { channels, stride })
            .collect();
        Self {
            stem_channels: 32,
            blocks,
            capsule_types: 32,
            capsule_dims: 16,
            conv_caps_layers: 4,
            predictor_kernel: 3,
            norm_per_type: true,
            no_precaps: false,
            no_projcaps: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stem_channels", self.stem_channels),
            ("capsule_types", self.capsule_types),
            ("capsule_dims", self.capsule_dims),
            ("conv_caps_layers", self.conv_caps_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be positive")));
            }
        }
        if self.predictor_kernel.is_multiple_of(2) {
            return Err(Error::invalid("model.predictor_kernel must be odd"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 {
                return Err(Error::invalid(format!(
                    "model.blocks[{i}] needs positive channels and stride"
                )));
            }
        }
        if self.no_precaps && self.blocks.iter().filter(|b| b.stride != 1).count() > 2 {
            return Err(Error::invalid(
                "model.no_precaps supports at most two strided blocks",
            ));
        }
        Ok(())
    }

    /// Widths and strides of the planar stem standing in for PreCaps: the stem
    /// width, the width of the first strided block, and the final width, with
    /// the downsampling of the block stack split over the last two layers.
    pub fn planar_plan(&self) -> ([usize; 3], [usize; 3]) {
        let last = self.blocks.last().map_or(self.stem_channels, |b| b.channels);
        let strided: Vec<&BlockSpec> = self.blocks.iter().filter(|b| b.stride != 1).collect();
        match strided.as_slice() {
            [] => ([self.stem_channels, last, last], [1, 1, 1]),
            [a] => ([self.stem_channels, a.channels, last], [1, a.stride, 1]),
            [a, b, ..] => ([self.stem_channels, a.channels, last], [1, a.stride, b.stride]),
        }
    }

    /// SHA-256 over the architecture and the data shape it was built for.
    pub fn digest(&self, in_channels: usize, classes: usize) -> [u8; 32] {
        let doc = serde_json::json!({
            "model": self,
            "in_channels": in_channels,
            "classes": classes,
        });
        Sha256::digest(doc.to_string().as_bytes()).into()
    }
}

#[derive(Debug, Clone)]
pub enum Stem {
    Group(PreCaps),
    Planar(PlanarStem),
}

/// The capsule network: stem, primary capsules, capsule layers, class head.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub in_channels: usize,
    pub classes: usize,
    pub stem: Stem,
    pub primary: PrimaryCaps,
    pub caps: Vec<ConvCaps>,
    pub head: Head,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, K]` class scores.
    pub scores: Var,
    /// `[B, K, d, 4, H, W]` class capsules.
    pub class_caps: Var,
    /// Routing weights of every capsule layer, `[B, Nl, Nl1, 4, H, W]`.
    pub routing: Vec<Var>,
}

impl Model {
    /// Builds the architecture and its parameters, initialised from `seed`.
    pub fn new<T: Real>(
        config: &ModelConfig,
        in_channels: usize,
        classes: usize,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if classes == 0 || in_channels == 0 {
            return Err(Error::invalid("model needs at least one class and channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (stem, width) = if config.no_precaps {
            let (widths, strides) = config.planar_plan();
            let s = PlanarStem::new(&mut params, in_channels, widths, strides, &mut rng)?;
            let w = s.out_channels;
            (Stem::Planar(s), w)
        } else {
            let s = PreCaps::new(
                &mut params,
                in_channels,
                config.stem_channels,
                &config.blocks,
                &mut rng,
            )?;
            let w = s.out_channels;
            (Stem::Group(s), w)
        };
        let (n, d) = (config.capsule_types, config.capsule_dims);
        let primary = PrimaryCaps::new(&mut params, width, n, d, &mut rng)?;
        let mut caps = Vec::with_capacity(config.conv_caps_layers);
        for l in 0..config.conv_caps_layers {
            let out_types = if l + 1 == config.conv_caps_layers { classes } else { n };
            caps.push(ConvCaps::new(
                &mut params,
                &format!("caps{l}"),
                n,
                d,
                out_types,
                d,
                config.predictor_kernel,
                config.norm_per_type,
                &mut rng,
            )?);
        }
        let head = if config.no_projcaps {
            Head::Norm
        } else {
            Head::projection(&mut params, d, &mut rng)?
        };
        let model = Self {
            config: config.clone(),
            in_channels,
            classes,
            stem,
            primary,
            caps,
            head,
        };
        Ok((model, params))
    }

    pub fn digest(&self) -> [u8; 32] {
        self.config.digest(self.in_channels, self.classes)
    }

    /// `[B, C, H, W]` images to class scores and intermediate routing.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<Forward> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let features = match &self.stem {
            Stem::Group(s) => s.forward(tape, p, images)?,
            Stem::Planar(s) => s.forward(tape, p, images)?,
        };
        let mut caps = self.primary.forward(tape, p, features)?;
        let mut routing = Vec::with_capacity(self.caps.len());
        for layer in &self.caps {
            let out = layer.forward(tape, p, caps)?;
            routing.push(out.weights);
            caps = out.caps;
        }
        let scores = self.head.forward(tape, p, caps)?;
        Ok(Forward {
            scores,
            class_caps: caps,
            routing,
        })
    }

    /// Scalar parameter count of the stem (PreCaps or its planar stand-in).
    pub fn stem_parameters<T: Real>(&self, params: &ParamStore<T>) -> usize {
        match self.stem {
            Stem::Group(_) => params.count_prefix("precaps."),
            Stem::Planar(_) => params.count_prefix("noprecaps."),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Array;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem_channels: 4,
            blocks: vec![BlockSpec { channels: 4, stride: 2 }],
            capsule_types: 3,
            capsule_dims: 4,
            conv_caps_layers: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_shapes() {
        let (model, params) = Model::new::<f32>(&tiny(), 1, 5, 0).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = tape.leaf(Array::zeros([2, 1, 12, 12]));
        let out = model.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.scores), &[2, 5]);
        assert_eq!(tape.shape(out.class_caps), &[2, 5, 4, 4, 6, 6]);
        assert_eq!(tape.shape(out.routing[0]), &[2, 3, 3, 4, 6, 6]);
        assert_eq!(tape.shape(out.routing[1]), &[2, 3, 5, 4, 6, 6]);
    }

    #[test]
    fn ablations_build_and_run() {
        for (no_precaps, no_projcaps) in [(true, false), (false, true)] {
            let config = ModelConfig {
                no_precaps,
                no_projcaps,
                ..tiny()
            };
            let (model, params) = Model::new::<f32>(&config, 3, 4, 1).unwrap();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let x = tape.leaf(Array::full([1, 3, 8, 8], 0.5));
            let out = model.forward(&mut tape, &p, x).unwrap();
            assert_eq!(tape.shape(out.scores), &[1, 4]);
            assert!(tape.value(out.scores).is_finite());
        }
    }

    #[test]
    fn no_precaps_has_fewer_parameters() {
        let full = ModelConfig::default();
        let ablated = ModelConfig {
            no_precaps: true,
            ..full.clone()
        };
        let (m_full, p_full) = Model::new::<f32>(&full, 1, 10, 0).unwrap();
        let (m_abl, p_abl) = Model::new::<f32>(&ablated, 1, 10, 0).unwrap();
        assert!(p_abl.count() < p_full.count());
        assert!(m_abl.stem_parameters(&p_abl) < m_full.stem_parameters(&p_full));
    }

    #[test]
    fn digest_tracks_architecture_and_data_shape() {
        let a = tiny();
        let b = ModelConfig {
            capsule_dims: 5,
            ..tiny()
        };
        assert_eq!(a.digest(1, 10), a.digest(1, 10));
        assert_ne!(a.digest(1, 10), b.digest(1, 10));
        assert_ne!(a.digest(1, 10), a.digest(3, 10));
    }

    #[test]
    fn planar_plan_follows_strided_blocks() {
        assert_eq!(ModelConfig::default().planar_plan(), ([32, 64, 128], [1, 2, 2]));
        assert_eq!(tiny().planar_plan(), ([4, 4, 4], [1, 2, 1]));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let even = ModelConfig {
            predictor_kernel: 2,
            ..tiny()
        };
        assert!(Model::new::<f32>(&even, 1, 2, 0).is_err());
        let empty = ModelConfig {
            capsule_types: 0,
            ..tiny()
        };
        assert!(Model::new::<f32>(&empty, 1, 2, 0).is_err());
    }
}
