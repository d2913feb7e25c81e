//! Laboratory for state vectors of in-context learning on a toy transformer.

pub mod dualform;
pub mod error;
pub mod lab;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod statevec;
pub mod tasks;
pub mod trainer;

mod codec;
pub mod fnv;
pub mod harness;
pub mod intervene;

pub use error::{Error, Result};
pub use lab::Lab;
