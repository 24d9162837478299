//! Gaussian prototype layers for explainable segmentation.
//!
//! A Gaussian mixture over latent vectors, trained by gradient descent
//! together with a convolutional encoder, classifies image patches (grid
//! prototypes) or superpixel proposals (region prototypes) and explains each
//! decision through the training regions that best match its prototypes.

pub mod error;
pub mod gpl;
pub mod numerics;
pub mod par;
pub mod params;
pub mod encoders;
pub mod imaging;
pub mod regions;
pub mod config;
pub mod data;
pub mod evalkit;
pub mod explain;
pub mod fsutil;
pub mod pipeline;

pub use error::{Error, Result};
