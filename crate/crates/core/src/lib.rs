//! Regional latent augmentation for linear probes over vision-language embeddings.
//!
//! Each training embedding is mapped by a small network to an axis-aligned box in
//! the shared image/text embedding space. The box is trained to be large while its
//! corners and midpoint still classify as the source image's class against the
//! class-prompt embeddings. Points sampled inside the boxes then augment the
//! training set of a linear probe.
//!
//! Modules:
//! - [`store`]: embedding sets, class-text tables and their binary formats
//! - [`synth`]: synthetic hypersphere-cluster datasets with a domain shift
//! - [`boxnet`]: the box network, its losses, gradients and training loop
//! - [`sampler`]: sampling augmented embeddings from boxes
//! - [`probe`]: linear probe and zero-shot classifiers
//! - [`eval`]: accuracy metrics, region statistics and experiment protocols

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boxnet;
pub mod error;
pub mod eval;
pub mod optim;
pub mod probe;
pub mod sampler;
pub mod seed;
pub mod store;
pub mod synth;
pub mod vecmath;

pub use error::{Error, Result};
