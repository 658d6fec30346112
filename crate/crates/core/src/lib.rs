pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
mod kernels;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, RunningStats, Var};
pub use error::{Error, Result};
pub use kernels::{set_threads, threads};
pub use tensor::Tensor;
