//! Progressive multi-scale residual network (PMRN) for single image
//! super-resolution.
//!
//! The crate is a self-contained CPU engine: a small tensor library with
//! reverse-mode differentiation, the network itself, an analytical
//! parameter/MACs counter, image degradation and quality metrics, and an
//! L1/Adam training loop.

pub mod analyzer;
pub mod arch;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use arch::{Attention, MultiScale, PmrnConfig, PmrnModel};
pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use nn::{ConvLayer, InitSpec, ParamStore};
pub use tensor::{Real, Shape, Tensor};
