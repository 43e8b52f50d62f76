//! Small CPU neural-network stack: tensors, layers with exact backward
//! passes, Adam and a checkpoint format.

mod adam;
mod checkpoint;
mod layers;
mod network;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use layers::{Layer, LayerSpec, Mode, BN_EPS, BN_MOMENTUM};
pub use network::{
    grad_check, grad_check_many, half_squared_error, jitter_params, relative_error, Network, GRAD_CHECK_FLOOR,
};
pub use tensor::{Real, Tensor};
