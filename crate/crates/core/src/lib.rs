pub mod autodiff;
pub mod bottleneck;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod interpret;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod runtime;
pub mod stats;
pub mod tensor;
pub mod train;
