//! Scribble-supervised binary segmentation with a collaborating promptable
//! segmenter.
//!
//! A cross-level encoder/decoder network is trained from sparse scribble
//! labels. Each training step turns the scribbles and the network's current
//! prediction into a box prompt, asks a guided segmenter for a dense mask,
//! keeps the mask only when it agrees with the scribbles, and uses it as an
//! extra supervision target.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod loss;
pub mod map;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompting;
pub mod segmenter;
pub mod tensor;
pub mod trainer;

pub use autograd::sigmoid;
pub use error::{Error, Result};
pub use map::{Map, ScribbleMap};
pub use tensor::Tensor;
