//! Content-based ranking of social posts for users.
//!
//! Users and posts are mapped by a two-branch network into one unit-norm
//! embedding space, trained with a large-margin objective: users sit closer to
//! posts they acted on than to time-matched posts they ignored, and posts sit
//! closer to posts from their own semantic cluster than to posts from other
//! clusters. Recommendations are the nearest posts to a user.
//!
//! The pipeline, in order: [`data`] (records, splits, a synthetic generator),
//! [`encoding`] (hashed text vectors, k-means clusters, descriptors),
//! [`network`], [`objective`], [`sampling`], [`trainer`], [`ranking`].
//! [`commands`] wires them into the `postrank` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod network;
pub mod numkernel;
pub mod objective;
pub mod ranking;
pub mod sampling;
pub mod trainer;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Dataset, Interaction, Post, User};
pub use error::{Error, Result};
pub use network::NetworkParams;
pub use numkernel::{DenseMatrix, Rng};
pub use ranking::{Model, RankReport};
