//! Attention Ghost-UNet++: an efficient nested U-Net for multi-class
//! medical image segmentation, built on ghost modules (cheap depthwise
//! feature expansion) and channel / spatial / depth attention, with a
//! self-contained reverse-mode autodiff engine over `ndarray`.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ghost;
pub mod metrics;
pub mod network;
pub mod training;
pub mod nn;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
