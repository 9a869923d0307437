pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod csv_io;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod optim;
pub mod propagation;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Axis, Reduce, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
