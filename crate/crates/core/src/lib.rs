//! Building blocks for a lightweight YOLO-style detector built around partial
//! convolution, multi-scale attention and weighted bidirectional feature fusion.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense NCHW tensors and a reverse-mode gradient tape.
//! * [`nn`]: composite blocks (CBS, C2F variants, PConv, EMA, CPCA, SPPF).
//! * [`graph`]: declarative model graphs, neck topologies, executor and head decoding.
//! * [`cost`]: exact parameter / MAC / memory-access accounting.
//! * [`eval`]: IoU, CIoU, NMS, PR curves, AP/mAP and FPS measurement.
//! * [`data`]: YOLO-txt labels, dataset splitting, PPM images, synthetic data.
//! * [`train`]: target assignment, losses, SGD, checkpoints and the training loop.
//! * [`gradcheck`]: the finite-difference verification suite.

pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
