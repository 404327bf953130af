//! Mutual contrastive learning for cohorts of networks.

pub mod autograd;
pub mod cohort;
pub mod data;
pub mod embedding;
pub mod error;
pub mod losses;
pub mod momentum;
pub mod nn;
pub mod optim;
pub mod pairs;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
