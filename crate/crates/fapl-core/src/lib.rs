//! Desk-scale semi-supervised representation learning: an embedding network
//! and classifier trained jointly on labeled and unlabeled samples, where
//! unlabeled samples receive pseudo-labels from their cosine affinity to
//! per-class feature centers and a center regularizer keeps classes tight.
//! Learned embeddings are evaluated by retrieval (CMC rank-k, mAP).

pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod labeling;
pub mod loss;
pub mod model;
pub mod trainer;

pub use data::{Dataset, Fraction, Label, Sample, SynthConfig};
pub use error::{Error, Result};
pub use eval::RetrievalReport;
pub use labeling::{CenterBank, PseudoLabel, Scheme};
pub use loss::LossBreakdown;
pub use model::{Checkpoint, ModelParams, OptimizerState, ParamGrads};
pub use trainer::{BatchMember, TrainConfig, TrainHistory, TrainOutcome};
