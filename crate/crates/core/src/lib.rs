//! Cooperative multi-agent value learning with reward-additive factorized
//! losses and an action-tendency intrinsic reward.

pub mod config;
pub mod env;
pub mod error;
pub mod imagine;
pub mod intrinsic;
pub mod losses;
pub mod mixer;
pub mod nn;
pub mod report;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
