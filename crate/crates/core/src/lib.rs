//! Pure algorithmic core for training classifiers with a joint softmax
//! cross-entropy and center loss, attacking them, and measuring how the
//! discriminative loss changes adversarial robustness.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! anything touching the filesystem live in the `robustfeat` companion crate.
//!
//! Module map:
//!
//! - [`tensor`] / [`graph`]: dense `f64` tensors and a define-by-run
//!   reverse-mode differentiation tape.
//! - [`model`]: `mlp-200`, `lenet-2d` and `lenet-standard` architectures that
//!   expose the feature layer and the final linear classifier separately.
//! - [`loss`]: cross-entropy, center loss and the [`loss::CenterBank`].
//! - [`attack`]: FGSM, BIM, PGD, CW-L2 and the one-pixel black-box search.
//! - [`data`]: IDX parsing, normalization, batching.
//! - [`train`]: SGD with momentum, optional delayed adversarial training.
//! - [`metrics`]: local-robustness search, feature geometry, Welch t-test.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attack;
pub mod data;
mod error;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use loss::CenterBank;
pub use model::{Architecture, ArchitectureDescriptor, Init, Model};
pub use tensor::Tensor;
