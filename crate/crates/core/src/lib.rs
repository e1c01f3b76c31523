pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod cim;
pub mod coarse;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fine;
pub mod gradcheck;
pub mod homography;
pub mod image;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod selftest;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{EdmError, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Element, Tensor};
