// SPDX-License-Identifier: Apache-2.0

//! Real-time Lidar object-instance classification on the CPU.
//!
//! A scan is projected into a range image with intensity and decomposed
//! normal-vector channels, split into class-agnostic instance proposals,
//! and every proposal is turned into a masked patch plus a statistics vector
//! that a small two-branch CNN classifies in one batch. The [`metrics`]
//! module scores the result with pointwise IoU, AP and panoptic quality.

#![allow(clippy::needless_range_loop)]

pub mod classifier;
pub mod config;
pub mod error;
pub mod features;
pub mod instance;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod pointcloud;
pub mod range_image;
pub mod synth;

pub use error::{Error, Result};
pub use par::Execution;
pub use pointcloud::{ClassId, LabeledScan, Point, RawLabel, Scan};
