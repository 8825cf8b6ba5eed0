//! Multi-head classification over frozen slide embeddings with
//! combinatorial partial supervision and a joint label-dependency loss.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod scheduler;
pub mod seed;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{SfcsNetwork, Task};
pub use tensor::{Graph, Matrix};
