//! Masked embedding of images into the style and noise spaces of a
//! style-based generator, and activation-level editing on top of those
//! embeddings.

pub mod apps;
pub mod blocks;
pub mod container;
pub mod error;
pub mod image_buf;
pub mod latent_file;
pub mod masks;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod perceptual;
pub mod recipe;
pub mod synthesis;
pub mod tensor;

pub use error::{Error, Result};
pub use image_buf::ImageBuffer;
pub use masks::Mask;
pub use models::Models;
pub use recipe::{EditKind, EditRecipe, RunOutput};
pub use perceptual::{FeatureMap, Vgg16Features, VggConfig, VggLayer};
pub use synthesis::{ActivationTensor, Generator, GeneratorConfig, NoiseBank, NoiseMap, StyleCode};
pub use tensor::Tensor3;
