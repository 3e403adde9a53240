//! Pose-based gait recognition.
//!
//! Pipeline: [`pose_io`] reads COCO17 keypoint sequences, [`hot`] maps them
//! into a camera-independent frame, [`hod`] derives joint, bone and angle
//! descriptors, and [`pagcn`] embeds them with a part-aware graph
//! convolutional network trained by [`train`] and evaluated by [`eval`].
//! [`synth`] generates synthetic walkers for end-to-end checks.

pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hod;
pub mod hot;
pub mod pagcn;
pub mod pose_io;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
