//! Skeleton kinematics, pose priors, monocular fitting, metrics and the
//! synthetic signing corpus.

pub mod arrayfile;
pub mod dataset;
pub mod error;
pub mod fitting;
pub mod kinematics;
pub mod metrics;
pub mod pose_prior;
pub mod text;

pub use error::{Error, Result};
