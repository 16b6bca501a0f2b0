//! Event-guided low-light video segmentation.
//!
//! * [`lowlight`] darkens normal-light frames with per-clip parameters.
//! * [`events`] turns frame pairs into event streams and event frames.
//! * [`encoder`], [`motion`], [`fusion`] and [`decoder`] are the network
//!   parts, assembled in [`model`].
//! * [`metrics`] scores predictions and counts model cost.
//!
//! Tensors are channel-last `f64`; see [`evseg_autograd`].

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod events;
pub mod fusion;
pub mod lowlight;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod optim;

pub use error::{Error, Result};
pub use evseg_autograd as autograd;
