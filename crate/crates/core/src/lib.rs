// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod htpgm;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod stationarization;
pub mod tensor;
pub mod train;

pub use error::{HtvError, Result};
pub use tensor::Tensor;
