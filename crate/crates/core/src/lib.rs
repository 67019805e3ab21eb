//! Variational graph contrastive learning: sparse graph I/O, augmentation,
//! a GCN encoder with deterministic or Gaussian weights, contrastive
//! training, linear-probe evaluation and uncertainty scores.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod ndiff;
pub mod objective;
pub mod rng;
pub mod synthetic;
pub mod train;
pub mod uncertainty;

pub use augment::{AugmentConfig, GraphView, MaskMode, ViewPair};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use eval::{EmbeddingSet, EvalReport, ProbeResult};
pub use graph::{load_dataset, save_dataset, Adjacency, NormalizedAdjacency, SparseGraph, SplitSpec};
pub use model::{EncoderConfig, ParamKind, Params, VariationalParams, WeightSample, Weights};
pub use ndiff::{CsrMatrix, DenseMatrix};
pub use objective::{LossBreakdown, Negatives, PriorConfig};
pub use train::{Mode, TrainConfig, TrainLog, TrainOutcome};
pub use uncertainty::{EmbeddingSamples, LikelihoodMatrix, Measure, Orientation, RetentionCurve, ScoreVector};
