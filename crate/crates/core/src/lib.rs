//! Language-conditioned behavior cloning over voxelized observations.
//!
//! The pipeline runs from multi-view RGB-D fusion ([`voxelizer`]) through
//! keyframe-based demonstration processing ([`demo_pipeline`]) and discrete
//! action coding ([`action_codec`]) to a latent-bottleneck transformer policy
//! ([`policy`]) trained with a four-term cross-entropy objective
//! ([`trainer`]). A small scripted tabletop world ([`toyworld`]) renders
//! observations, produces expert demonstrations and scores closed-loop
//! evaluations.

pub mod action_codec;
pub mod demo_pipeline;
pub mod error;
pub mod policy;
pub mod toyworld;
pub mod trainer;
pub mod voxelizer;

pub use error::{Error, Result};
