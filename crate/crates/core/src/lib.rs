//! Self-supervised gait representation learning on binary silhouettes.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod silhouette;
pub mod synthetic;
pub mod transfer;
pub mod view;

pub use error::{Error, Result};
