#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod autograd;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod initlab;
mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod seqmodels;
pub mod tensor;
pub mod textenc;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
