//! File formats, manifests and the experiment pipeline behind the
//! `robustfeat` command.

pub mod checkpoint;
pub mod cli;
pub mod dump;
pub mod error;
pub mod manifest;
pub mod mnist;
pub mod pipeline;
pub mod table;

pub use error::{Error, Result};
