pub mod autograd;
pub mod baselines;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Network32 = models::Network<f32>;
pub type Network64 = models::Network<f64>;
pub type GanPair32 = models::GanPair<f32>;
pub type GanPair64 = models::GanPair<f64>;
pub type Dataset32 = datasets::ImbalancedDataset<f32>;
pub type Dataset64 = datasets::ImbalancedDataset<f64>;
pub type Checkpoint32 = models::Checkpoint<f32>;
pub type Checkpoint64 = models::Checkpoint<f64>;
