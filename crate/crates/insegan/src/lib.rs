//! Unsupervised instance segmentation of (nearly) identical rigid objects in
//! depth images, via a 3D-aware GAN with an instance pose encoder.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`geometry`]: differentiable SE(3) primitives and Z-buffer compositing
//! - [`tensor`]: the reverse-mode autodiff tape the networks run on
//! - [`nets`]: generator, discriminator, and instance pose encoder
//! - [`losses`]: adversarial losses and the aligned encoder losses
//! - [`training`]: the D/G/E optimization loop, checkpoints, augmentation
//! - [`inference`]: encode, per-instance render, composite, threshold
//! - [`scenegen`]: synthetic multi-instance depth scenes and dataset layout
//! - [`eval`]: the mIoU metric and classical clustering baselines

pub mod eval;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod nets;
pub mod scenegen;
pub mod tensor;
pub mod training;
