//! Many-to-many splatting for video frame interpolation.
//!
//! A coarse bidirectional optical flow is refined by a small convolutional
//! network into `N` sub-motion vectors per pixel plus a per-pixel reliability
//! score. Both input frames are then forward-splatted to any intermediate time
//! and overlapping contributions are merged with softmax-style weights built
//! from temporal relevance, brightness consistency and reliability. The motion
//! work is done once per frame pair; each extra output frame only costs a
//! splat and a normalization.
//!
//! Module map:
//!
//! - [`tensor`], [`ops`], [`tape`], [`gradcheck`]: the numeric substrate
//!   (dense tensors, hand-written kernels with backward passes, a recording
//!   tape and a finite-difference checker).
//! - [`warp`]: backward warping, forward splatting and time scaling of flows.
//! - [`fusion`]: fusion weights, normalization, hole handling.
//! - [`mrn`]: the motion refinement network and its checkpoint container.
//! - [`coarse_flow`]: a block-matching fallback for the initial flow.
//! - [`pipeline`]: end-to-end interpolation with shared/unshared accounting.
//! - [`train`]: synthetic scenes, losses, Adam and the toy training loop.
//! - [`io`]: `.flo`, PPM/PNG and flow visualization.
//! - [`cli`]: the `m2m` command-line front end.

pub mod cli;
pub mod coarse_flow;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod mrn;
pub mod ops;
pub mod par;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
