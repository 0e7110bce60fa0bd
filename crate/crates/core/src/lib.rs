//! Synthetic image detection from the intermediate CLS tokens of a frozen
//! Vision Transformer.
//!
//! The pipeline has four stages:
//!
//! 1. [`vit`] runs a frozen CLIP-style image encoder and stacks the CLS token
//!    of every transformer block into a `b × n × d` tensor.
//! 2. [`head`] projects every block's token, fuses the blocks with a learnable
//!    per-feature importance softmax, projects again and classifies.
//! 3. [`losses`] and [`trainer`] optimize the head with binary cross-entropy
//!    plus a supervised contrastive term, using hand-derived gradients.
//! 4. [`metrics`] and [`data`] implement the evaluation protocol, the
//!    perturbation harness and a synthetic toy corpus for desk-scale checks.

pub mod container;
pub mod data;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod vit;

mod error;

pub use error::{Error, Result};
pub use head::{HeadConfig, HeadParams};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
pub use vit::{Backbone, RineTensorK, ViTConfig, ViTWeights};
