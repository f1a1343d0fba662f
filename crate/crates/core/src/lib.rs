//! Task-sequencing optimization workbench.

pub mod baselines;
pub mod cli;
pub mod context;
pub mod datastore;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod prior;
pub mod rng;
pub mod trainer;
pub mod utility;

pub use error::{Error, Result};
pub use prior::{Sequence, TaskId};
