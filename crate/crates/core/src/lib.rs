//! Generative unadversarial examples for online, model-agnostic domain
//! adaptation.
//!
//! A small convolutional VAE learns, over a single pass of unlabeled
//! target batches, to emit a per-image additive perturbation whose sum
//! with the input is pulled towards the input's centre-surround saliency
//! map. The perturbed images are then handed to a frozen source
//! classifier, optionally combined with entropy-based test-time
//! adaptation.

pub mod adapt;
pub mod baseline;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod pnm;
pub mod saliency;
pub mod tta;
pub mod vae;
pub mod verify;

pub use error::{Error, Result};
pub use image::{images_to_tensor, tensor_to_images, GrayImage, Image};
