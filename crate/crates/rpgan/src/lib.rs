//! Toolkit for generators whose latent code is a random path: every layer
//! slot ("bucket") holds several interchangeable instances, and a sample is
//! produced by routing a fixed learned input through one instance per bucket.
//!
//! The crate covers adversarial training of such generators, per-bucket
//! responsibility analysis, fusion of consecutive linear buckets, incremental
//! extension with new instances, and inversion of images back to routes.

// numeric kernels read clearest as plain indexed loops
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod kernels;
pub mod layers;
pub mod lifecycle;
pub mod tape;
pub mod tensor;
pub mod train;

pub use analysis::{DiversityReport, FrozenRouteSpec, ImageMetric};
pub use checkpoint::{GanBundle, RngState};
pub use config::{ArchConfig, DataConfig, RunConfig};
pub use data::Dataset;
pub use discriminator::{DiscBinding, DiscStage, Discriminator};
pub use error::{Error, Result};
pub use fusion::{BenchReport, FusionPlan};
pub use generator::{BindMode, Bucket, GenBinding, Generator, Route};
pub use layers::{Activation, Instance, LayerKind};
pub use lifecycle::{ExtensionSpec, InitMode, Inverter, InverterCfg};
pub use tape::{Tape, VarId};
pub use tensor::{Real, Tensor};
pub use train::{Adam, LossVariant, TrainConfig, TrainReport, TrainSession};
