//! Knowledge-graph link prediction with text-initialized entity features
//! and graph neural network reasoning.
//!
//! The pipeline has two stages. Stage 1 reduces encoded entity descriptions
//! to `d`-dimensional features and fine-tunes them with a TransE margin
//! objective. Stage 2 runs a GAT or R-GCN stack over those features, adds
//! the stack output back to them, and trains with TransE, DistMult or SimplE.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod kg;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod text;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use eval::{evaluate, predict_topk, rank_triple, PredictionList, Protocol, RankingReport, Side};
pub use kg::{EntityId, KnowledgeGraph, RelationId, Symbols, Triple};
pub use linalg::Matrix;
pub use model::{ModelState, ScoringModel, Stage};
