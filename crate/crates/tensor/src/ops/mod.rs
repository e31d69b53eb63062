//! Differentiable ops. Each op computes its forward value eagerly and
//! registers a backward closure on the owning [`Graph`](crate::Graph).

mod conv;
mod deform;
mod elementwise;
mod lstm;
mod matmul;
mod norm;
mod reduce;
mod resize;
mod shape;
mod softmax;

pub use conv::{conv2d_forward, same_padding, Conv2dOptions};
pub use deform::deform_conv2d_forward;
pub use lstm::LstmState;
pub use norm::{BatchStats, NORM_EPS};
pub use resize::bilinear_resize_forward;
