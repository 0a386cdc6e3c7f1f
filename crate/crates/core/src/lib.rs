pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evo;
pub mod network;
pub mod ops;
pub mod optim;
pub mod prior;
pub mod records;
pub mod search_space;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use search_space::{LayerKind, LayerSpec, SearchSpace, WidthConfig};
pub use tensor::{Scalar, Tensor};
