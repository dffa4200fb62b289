//! Siamese voxel-to-BEV single-object tracking on LiDAR point clouds.
//!
//! The crate is organized bottom-up: [`tensor`] (autodiff and optimizer),
//! [`geom`] (non-learned point and box geometry), the learned stages
//! [`backbone`], [`embed`], [`shape_head`] and [`localize`], then the
//! [`harness`] that runs training and tracking, the synthetic [`dataset`],
//! and the one-pass-evaluation metrics in [`evalkit`].

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod harness;
pub mod gradcheck;
pub mod localize;
pub mod model;
pub mod nn;
pub mod shape_head;
pub mod tensor;

pub use error::{Error, Result};
