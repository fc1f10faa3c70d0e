pub mod ablation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod mask;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{Bindings, ParamId, ParamStore};
pub use tensor::Tensor;
