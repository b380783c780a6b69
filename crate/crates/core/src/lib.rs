//! Desk-scale partially-relevant video retrieval.
//!
//! Text and video feature sequences are encoded into a shared embedding
//! space with Gaussian-constrained attention blocks and a selective
//! state-space sequence block, fused bidirectionally per (query, video)
//! pair, scored by cosine similarity at clip and video level, trained
//! contrastively, and evaluated with R@K / SumR.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tape`]) that is
//! generic over `f32` (training) and `f64` (gradient-check headroom).

pub mod adam;
pub mod config;
pub mod data_io;
pub mod error;
pub mod fusion;
pub mod gmmformer;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod text_encoder;
pub mod training;
pub mod video_encoder;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::MamFusion;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
pub use video_encoder::Toggles;
