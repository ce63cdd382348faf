//! Desk-scale laboratory for a single-stream Diffusion Transformer with
//! MV-Split residuals.

pub mod audit;
pub mod diagnostics;
pub mod error;
pub mod fusedmerge;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod report;
pub mod subspace;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelInput, ModelParams, ResidualMode};
pub use numerics::{Matrix, Rng};
pub use subspace::{AlignmentAudit, GradModeReport, Projection, SegmentLayout, SubspaceSplit};
