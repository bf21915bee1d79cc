pub mod autodiff;
pub mod error;
pub mod params;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub mod encoder;
pub mod layers;
pub mod gai;
pub mod channel;
pub mod heads;
pub mod metrics;
pub mod synth;
pub mod model;
pub mod checkpoint;
pub mod config;
pub mod train;
pub mod experiment;
pub mod verify;
