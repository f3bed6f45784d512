//! The generator and feature network a process works with.

use std::path::Path;

use crate::blocks::Networks;
use crate::error::Result;
use crate::perceptual::{Vgg16Features, VggConfig};
use crate::synthesis::{Generator, GeneratorConfig};

/// Resolution of the built-in desk-scale generator.
pub const TOY_RESOLUTION: usize = 64;

pub struct Models {
    pub generator: Generator,
    pub vgg: Vgg16Features,
}

impl Models {
    /// Seeded random networks: the toy generator and the narrow VGG.
    pub fn toy(resolution: usize) -> Result<Self> {
        Ok(Self {
            generator: Generator::init_toy(GeneratorConfig::toy(resolution))?,
            vgg: Vgg16Features::init_random(VggConfig::toy()),
        })
    }

    /// A generator from a weight container. Without a feature-network file
    /// the standard-width VGG is randomly initialized.
    pub fn load(generator: &Path, vgg: Option<&Path>) -> Result<Self> {
        Ok(Self {
            generator: Generator::load_weights(generator)?,
            vgg: match vgg {
                Some(p) => Vgg16Features::load_weights(p)?,
                None => Vgg16Features::init_random(VggConfig::standard()),
            },
        })
    }

    pub fn networks(&self) -> Networks<'_> {
        Networks::new(&self.generator, &self.vgg)
    }
}
