//! Self-supervised pretraining of hierarchically balanced voxel-wise
//! representations for 3D images.
//!
//! The pipeline crops two overlapping patches from a volume, corrupts each
//! with local augmentations, encodes both with a feature pyramid whose
//! levels are projected to equal width, and trains on a contrastive loss
//! over corresponding voxels plus a restorative reconstruction loss.
//! Representations are evaluated by linear probing and fine-tuning on
//! voxelwise segmentation.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod downstream;
pub mod error;
pub mod interp;
pub mod nn;
pub mod objectives;
pub mod patchpair;
pub mod rng;
pub mod trainer;
pub mod volio;

pub use error::{Error, Result};
