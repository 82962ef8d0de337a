//! Wavelet-domain Perona–Malik diffusion and selective state-space layers,
//! assembled into a dual-branch segmentation network for ultrasound-like
//! images.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`) and differentiated
//! by a small reverse-mode [`Tape`].

mod error;

pub mod bench;
pub mod data;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod pmd;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use kernels::{avg_pool, bilinear_upsample, conv2d, matmul, norm_affine, softmax_cross_entropy, ChannelAxis};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::{Precision, Real, Tensor};
pub use wavelet::{dwt2, idwt2, SubbandSet};
