//! Sequential 3D hand pose estimation.
//!
//! Frames are encoded one at a time, a transformer encoder mixes the frame
//! embeddings along the sequence (time or camera views), an MLP regresses 2D
//! joints per frame, and a Graph U-Net lifts each 2D skeleton to 3D. Training
//! runs in two stages: a single-frame stage with the sequence encoder
//! replaced by a fully connected layer, then a sequence stage with the image
//! encoder frozen.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
