//! Prototype-denoised pseudo-label self-training for unsupervised domain
//! adaptation on small synthetic point-cloud benchmarks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the CLI.

pub mod config;
pub mod data;
pub mod denoise;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod proto;
pub mod scalar;
pub mod structure;
pub mod tensor;

pub use config::{ExperimentConfig, LabelForm, LabelMode, ProtoInit, StageConfig, StageKind, StudentInit};
pub use data::{Benchmark, DomainSpec, HiddenLabels, LabeledSet};
pub use error::{Error, Result};
pub use nn::{Architecture, EmaEncoder, Network};
pub use pipeline::{run_experiment, write_run, RunManifest};
pub use proto::PrototypeBank;
pub use scalar::Scalar;
pub use tensor::Tensor2D;

/// Label value for samples that carry no (pseudo) label.
pub const IGNORE: usize = usize::MAX;

pub type Tensor = Tensor2D<f64>;
pub type Net = Network<f64>;
pub type Ema = EmaEncoder<f64>;
pub type Bank = PrototypeBank<f64>;
pub type Bench = Benchmark<f64>;

pub type TensorF32 = Tensor2D<f32>;
pub type NetF32 = Network<f32>;
pub type EmaF32 = EmaEncoder<f32>;
pub type BankF32 = PrototypeBank<f32>;
pub type BenchF32 = Benchmark<f32>;
