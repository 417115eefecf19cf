//! Adaptive retrieval-augmented reasoning.
//!
//! A question is answered by a sequence of subqueries. For each subquery the
//! model either answers from its own (parametric) knowledge or retrieves
//! passages from a BM25 index first, and at each step it decides whether to
//! continue or give the final answer. This crate models that loop as a Markov
//! decision process and provides:
//!
//! * [`mdp`]: states, actions, trajectories and the two reward functions;
//! * [`retriever`]: a BM25 inverted index over a TSV passage corpus, with a
//!   binary snapshot format;
//! * [`gateway`]: the answer-format protocol (rendering and parsing) and the
//!   model backends (scripted fixtures, chat-completion HTTP endpoints);
//! * [`search`]: best-first binary-tree search for the correct trajectory
//!   with the fewest retrievals, plus an exhaustive oracle;
//! * [`synthesis`]: imitation examples with document loss masks and
//!   per-subquery preference pairs;
//! * [`inference`]: adaptive and forced inference modes;
//! * [`metrics`]: EM/F1, retrieval efficiency, knowledge-boundary
//!   calibration and decomposition statistics;
//! * [`world`]: synthetic question worlds that compile into scripted-model
//!   fixtures for hermetic tests.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI uses.

pub mod gateway;
pub mod inference;
pub mod mdp;
pub mod metrics;
pub mod retriever;
mod scalar;
pub mod search;
pub mod synthesis;
pub mod world;

pub use scalar::Scalar;

pub use mdp::{Action, Atomic, Document, QAInstance, Response, Reward, State, Step, Termination, Trajectory};

/// BM25 index with `f64` scores.
pub type SearchIndex = retriever::SearchIndex<f64>;
/// BM25 parameters in `f64`.
pub type Bm25Params = retriever::Bm25Params<f64>;
/// Retrieval efficiency statistics in `f64`.
pub type RetrievalStats = metrics::RetrievalStats<f64>;
/// Knowledge-boundary statistics in `f64`.
pub type BoundaryStats = metrics::BoundaryStats<f64>;
/// Decomposition statistics in `f64`.
pub type DecompositionStats = metrics::DecompositionStats<f64>;
/// Evaluation report in `f64`.
pub type Report = metrics::Report<f64>;
