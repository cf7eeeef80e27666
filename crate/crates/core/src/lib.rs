//! Visual intersection classification from two complementary views:
//! a patch-wise self-attention classifier over a single approach image
//! (7 road-topology classes), an optical-flow/recurrent ego-motion
//! classifier over the passage sequence (3 motion classes), and a
//! deterministic mask-based fusion of the two probability vectors.
//!
//! Everything runs on a small f64 tensor kernel with tape-based reverse-mode
//! differentiation, validated against a finite-difference oracle.

pub mod attention;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fpv;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod image_io;
pub mod nn;
pub mod pdv;
pub mod tape;
pub mod tensor;
pub mod tnet;

pub use error::{Error, Result};
pub use tensor::Tensor;
