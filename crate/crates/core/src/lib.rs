//! Digital-twin counterfactual estimation.
//!
//! The pipeline runs from cohort ingestion and multiple imputation, through a
//! tabular diffusion generator and a two-learner forest, to cluster-robust
//! and quantile inference on the individual effects and omitted-variable
//! sensitivity analysis. [`simdgp`] supplies simulated cohorts with known
//! effects for verification.

// `!(x > 0.0)` style checks deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod causal;
pub mod cohort;
pub mod error;
pub mod fidelity;
pub mod forest;
pub mod impute;
pub mod infer;
pub mod linalg;
pub mod rng;
pub mod sense;
pub mod serde_float;
pub mod simdgp;
pub mod stats;
pub mod synth;

pub use causal::{AteResult, IteVector, ResponseSurfacePair};
pub use cohort::{
    CohortTable, ColumnKind, ColumnRole, ColumnSpec, EconomicParams, Manifest, Provenance, Schema, Transform,
};
pub use error::{Error, Result};
pub use fidelity::FidelityReport;
pub use forest::{Forest, ForestConfig};
pub use impute::{FmiDiagnostic, ImputationSet};
pub use infer::{CoefTable, DesignMatrix, DesignSpec};
pub use sense::{SensitivityReport, WageSweep};
pub use simdgp::{DgpConfig, EffectSpec, SimCohort};
pub use synth::{DiffusionConfig, GenerativeModel};
