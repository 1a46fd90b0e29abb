pub mod benchmarks;
pub mod cli;
pub mod designs;
pub mod error;
pub mod kernels;
pub mod multilevel;
pub mod norms;
pub mod rkhs;
pub mod stacking;
