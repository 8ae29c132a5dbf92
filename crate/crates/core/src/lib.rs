pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod compression;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod params;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, PoolKind, Reduction, Var};
pub use error::{Error, Result};
pub use params::{Param, ParamKey, ParamStore, Stream};
pub use tensor::{Precision, Scalar, Tensor};
