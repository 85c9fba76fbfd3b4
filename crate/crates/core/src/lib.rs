//! Gradient atoms: unsupervised decomposition of per-document training
//! gradients into sparse, steerable directions.
//!
//! The pipeline runs in five stages:
//!
//! 1. per-document gradients ([`toy::gradient_set`], or imported files),
//! 2. projection into a per-module EKFAC eigenbasis with preconditioning
//!    ([`ekfac::project`]),
//! 3. sparse dictionary learning over the unit-normalized projections
//!    ([`dictionary::fit`]),
//! 4. coherence ranking of atoms on the raw gradients
//!    ([`coherence::rank_atoms`]),
//! 5. unprojection of atoms into weight-space steering vectors and
//!    behavioral sweeps ([`steering::run_sweep`]).
//!
//! Every intermediate matrix persists through the container format in
//! [`store`].

pub mod coherence;
pub mod dictionary;
pub mod ekfac;
pub mod error;
pub mod steering;
pub mod store;
pub mod toy;

pub use coherence::{AtomReport, CoherenceConfig, CoherenceSummary};
pub use dictionary::{CodeMatrix, DictConfig, Dictionary, FitResult};
pub use ekfac::{
    EkfacBasis, KfacStats, LambdaMode, PreconditioningMode, ProjectedGradients, ProjectionConfig,
};
pub use error::{Error, Result};
pub use steering::{BehaviorDetector, EvalSuite, Sign, SteerConfig, SteerResult, SteeringVector};
pub use store::{GradientSet, ModuleRegistry, ModuleSpec, PayloadKind, TensorFileHeader};
pub use toy::{SyntheticDoc, Task, Token, ToyModelParams, TrainConfig};
