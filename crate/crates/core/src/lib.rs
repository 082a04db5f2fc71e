//! Cross-data-lake adaptation of column type annotators.
//!
//! A source-trained annotator is moved onto a target data lake under a fixed
//! labeling budget. Each round probes the target lake, sends low-confidence
//! predictions to a verifier, clusters the lake in logit space to find weak
//! regions, and fine-tunes on the cumulative set of labeled batches.
//!
//! Module map:
//! - [`corpus`]: data lakes, CSV/JSONL storage, splits, synthetic lake pairs
//! - [`annotator`]: column featurizer and the softmax classifier
//! - [`gating`]: softmax confidence and query-set construction
//! - [`verifier`]: prompt rendering, decision parsing, verifier backends
//! - [`selection`]: k-means, weak clusters, batch sampling, silhouette
//! - [`adapt`]: the adaptation loop and the random-selection baseline
//! - [`metrics`]: per-type, support-weighted and macro F1
//! - [`experiment`]: run configuration and the commands behind the CLI

pub mod adapt;
pub mod annotator;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod metrics;
pub mod rng;
pub mod selection;
pub mod verifier;

pub use error::{Error, Result};
