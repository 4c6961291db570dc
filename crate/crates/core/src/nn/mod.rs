//! Parameter storage, layers and optimizer shared by all networks.

pub mod gradcheck;
mod layers;
mod optim;
mod params;

pub use layers::{global_avg_pool, leaky_relu, EqConv2d, EqLinear, LRELU_SLOPE};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
