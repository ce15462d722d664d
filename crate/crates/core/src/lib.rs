pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod heads;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod spm;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use bbox::BoundingBox;
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
