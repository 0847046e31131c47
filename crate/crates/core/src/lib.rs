//! Preference alignment for sequential recommendation.
//!
//! The crate covers the whole desk-scale pipeline: interaction ingestion and
//! windowing ([`dataset`]), item semantics ([`embeddings`]), a small
//! attention-based next-item policy with hand-written backpropagation
//! ([`policy`]), the preference oracle that estimates per-pair label flip
//! rates ([`oracle`]), rejected-item sampling ([`prefdata`]), the family of
//! pairwise alignment losses ([`objectives`]), the two-stage training loop
//! ([`trainer`]), evaluation ([`eval`]) and planted-structure data
//! generation ([`synthetic`]).

pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod oracle;
pub mod persist;
pub mod policy;
pub mod prefdata;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use dataset::{Catalogue, Dataset, ItemIdx, PopularityTable, SequenceExample, Split, UserRecords};
pub use embeddings::EmbeddingStore;
pub use error::{Error, Result};
pub use objectives::{LogProbBundle, ObjectiveConfig, ObjectiveKind};
pub use oracle::OracleModel;
pub use policy::{Checkpoint, PolicyModel, Stage};
pub use prefdata::{PreferencePair, Strategy};
pub use trainer::RunConfig;

/// Number of history items in every example.
pub const HISTORY_LEN: usize = 10;
/// Number of items in a candidate set (target plus distractors).
pub const NUM_CANDIDATES: usize = 20;
