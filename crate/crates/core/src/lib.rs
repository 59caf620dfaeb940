//! Anchor-aware deep metric learning for audio-visual cross-modal retrieval.
//!
//! Two projection networks map audio and visual features into a label
//! space. During training, each sample is replaced by an attention-derived
//! proxy computed from its same-category neighbors, and metric losses plus a
//! label-regression loss are minimized with a small reverse-mode autodiff
//! engine. Retrieval quality is measured with MAP and precision at K.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use attention::{aa_proxies, aa_proxy, AaMode, AttentionParams, ProjectionVars};
pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use checkpoint::Checkpoint;
pub use data::{synth_generate, AVPair, Dataset, Modality, Split, SynthConfig};
pub use error::{Error, Result};
pub use graph::{build_correlation_graph, build_graph, CorrelationGraph, NeighborPool};
pub use losses::{AaScope, LossConfig, LossKind, TripletStrategy};
pub use metrics::{average_precision, precision_at_scope, rank_gallery, Evaluation, RetrievalReport};
pub use network::ProjectionNet;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;
pub use trainer::{train, GraphScope, Model, TrainConfig, Trainer};
