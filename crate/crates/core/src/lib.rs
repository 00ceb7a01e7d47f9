//! Differentiable augmentation for data-efficient GAN training.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`tensor`]), a DCGAN-style generator/discriminator pair with Adam and a
//! weight EMA ([`nn`]), the differentiable translation/cutout/color
//! augmentations ([`augment`]), the four augmentation strategies and R1
//! ([`gan`]), evaluation diagnostics ([`metrics`]), tiny datasets
//! ([`data`]) and a config-driven experiment runner ([`experiment`]).

pub mod augment;
pub mod data;
pub mod experiment;
pub mod gan;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod tensor;
