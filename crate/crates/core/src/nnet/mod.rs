//! Minimal reverse-mode autodiff and the network layers built on it.
//!
//! Tensors are `f64`, row-major, with `[N, C, D, H, W]` (3D) or `[N, C, H, W]`
//! (2D) layouts. A volume with dims `(X, Y, Z)` maps to `[1, 1, Z, Y, X]`, so
//! the memory order is shared with [`crate::Volume`].

mod adam;
mod checkpoint;
pub mod gradcheck;
mod kernels;
mod layers;
mod tape;
mod tensor;
mod unet;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_vnet, encode_vnet, load_vnet, save_vnet};
pub use kernels::{conv_backward, conv_forward, convt_backward, convt_forward, ConvGeom};
pub use layers::{time_embedding, Conv, GroupNorm, Linear};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Grads, Param, ParamId, ParamStore, Tensor};
pub use unet::{ControlBranch, ControlResiduals, EncoderFeatures, UNet3d, UNetConfig, UNetEncoder};
