//! Confidential federated learning over simulated trusted execution
//! environments.

pub mod attestation;
pub mod audit;
pub mod canonical;
pub mod config;
pub mod counter;
pub mod crypto;
pub mod fl;
pub mod guard;
pub mod orchestrator;
pub mod policy;
pub mod scalar;
pub mod shield;
pub mod tee;

pub use config::{CloneMode, SessionConfig};
pub use scalar::Scalar;

pub type ParameterVectorF64 = fl::ParameterVector<f64>;
pub type ParameterVectorF32 = fl::ParameterVector<f32>;
pub type DatasetF64 = fl::Dataset<f64>;
pub type DatasetF32 = fl::Dataset<f32>;
pub type ModelUpdateF64 = fl::ModelUpdate<f64>;
pub type ModelUpdateF32 = fl::ModelUpdate<f32>;
pub type GlobalModelF64 = fl::GlobalModel<f64>;
pub type GlobalModelF32 = fl::GlobalModel<f32>;
pub type CloneRunF64 = guard::CloneRun<f64>;
pub type CloneRunF32 = guard::CloneRun<f32>;
