//! Linear-transition recurrent networks, their analytic "clock" and "adder"
//! solutions to long-memory tasks, and the training experiments around them.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod mechanisms;
pub mod models;
pub mod numerics;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
