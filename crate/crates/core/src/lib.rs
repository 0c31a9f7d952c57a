//! Getis-Ord Gi* hotspot statistics on feature maps, G-pooling with exact
//! gradients, and a small segmentation stack for comparing pooling rules.

pub mod error;
pub mod gistats;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod micronet;
pub mod pooling;
pub mod synthdata;

pub use error::{Error, Result};
pub use grid::{FeatureMap, LabelGrid, Rng};
pub use pooling::{PoolConfig, PoolMode, PoolResult};
