//! Facial landmark localization and template registration on triangle meshes.

pub mod annotation;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod predict;
pub mod registration;
pub mod synth;
pub mod transform;

pub use error::{Error, Result};
pub use nalgebra;
