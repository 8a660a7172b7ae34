//! Image-to-video distillation: a small reverse-mode tensor engine,
//! 2D/3D/(2+1)D residual networks, soft-target distillation from frozen
//! image teachers, kernel inflation, and a synthetic moving-shapes benchmark.

pub mod data;
pub mod distill;
pub mod error;
pub mod gradsuite;
pub mod inflation;
pub mod layers;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Tensor, Var};
