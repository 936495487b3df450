//! Top-k routed low-rank experts over frozen patch features, with
//! orthogonal-subspace initialization, equiangular and load-balance
//! regularizers, multi-scale patch aggregation and anomaly heads.
//!
//! Everything is 64-bit and differentiated by hand; the finite-difference
//! oracle in [`training`] is the reference for every gradient.

pub mod adapter;
pub mod error;
pub mod evaluation;
pub mod experts;
pub mod gradcheck;
pub mod heads;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod paa;
pub mod router;
pub mod synthdata;
pub mod training;

pub use adapter::{AdaptConfig, AdaptOutputs};
pub use error::{Error, Result};
pub use evaluation::{ClassMetrics, Diagnostics, EvalReport, ImagePrediction};
pub use experts::{ExpertBank, ExpertConfig, ExpertOutputs};
pub use heads::{AnomalyMap, HeadParams, TextAnchors};
pub use linalg::{Matrix, RngState, SeededRng};
pub use losses::LossWeights;
pub use metrics::ScoredSet;
pub use model::{ArchConfig, LossParts, Model, ModelGrads};
pub use router::{RouterParams, RoutingResult};
pub use synthdata::{ClassSplit, SynthConfig, SyntheticSample, ToyBackbone};
pub use training::{AdamState, FdReport, Prepared, Run, StepRecord, TrainConfig, TrainOutcome};
