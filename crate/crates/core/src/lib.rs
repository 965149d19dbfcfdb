//! Super-resolution of spatial expression maps conditioned on histology.
//!
//! The pipeline couples four unit-hypersphere feature encoders (a modality
//! head and a content head per input) with a conditional denoising diffusion
//! model. Three contrastive objectives shape the embedding geometry, noisy
//! sphere augmentation compensates for low capture sensitivity in the
//! expression maps, and a similarity-weighted imputation scheme fills in
//! embeddings for records whose low-resolution map is missing. Everything
//! runs on synthetic paired data from [`data`] and is driven end to end by
//! the [`harness`].

pub mod container;
pub mod contrastive;
pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod evaluate;
pub mod harness;
pub mod imputation;
pub mod rng;
