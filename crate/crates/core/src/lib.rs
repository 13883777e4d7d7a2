//! Tooling for cross-lingual truthfulness transfer downstream of model inference.
//!
//! The crate covers the numerical pipeline that sits between a hidden-state /
//! log-probability extractor and a fine-tuning run:
//!
//! * [`formats`]: the `FMHS` hidden-state dump and the JSONL record schemas.
//! * [`biasprobe`]: pooled standardization, per-layer language bias matrices,
//!   the mean-bias curve and semantic-layer detection.
//! * [`transfer`]: per-language transfer contributions from pre/post fine-tune
//!   bias matrices.
//! * [`selection`]: single-linkage language clustering under a distance
//!   threshold and core-language selection.
//! * [`metrics`]: MC1/MC2/MC3 and True/Info/True*Info reports.
//! * [`databuilder`]: allocation, 4-way alignment checks and instruction
//!   rendering for the translation training mixture.
//! * [`cli`]: the `famss` command-line pipeline.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are what the CLI uses.

pub mod biasprobe;
pub mod cli;
pub mod databuilder;
pub mod formats;
pub mod metrics;
pub mod scalar;
pub mod selection;
pub mod transfer;

pub use scalar::Scalar;

pub type BiasMatrix64 = biasprobe::BiasMatrix<f64>;
pub type BiasMatrix32 = biasprobe::BiasMatrix<f32>;
pub type BiasCurve64 = biasprobe::BiasCurve<f64>;
pub type BiasCurve32 = biasprobe::BiasCurve<f32>;
pub type TransferTable64 = transfer::TransferTable<f64>;
pub type TransferTable32 = transfer::TransferTable<f32>;
pub type Clustering64 = selection::Clustering<f64>;
pub type SelectionConfig64 = selection::SelectionConfig<f64>;
pub type McReport64 = metrics::McReport<f64>;
pub type GenReport64 = metrics::GenReport<f64>;
