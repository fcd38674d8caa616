//! Query expansion by pseudo relevance feedback, scored from two directions:
//! an attention-based pointer network that reads the top-retrieved documents
//! like a QA system reads a passage, and a pairwise-trained statistical
//! ranker over collection statistics. A linear interpolation of the two
//! picks the expansion terms for a second BM25 retrieval round.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod expand;
pub mod index;
pub mod qa_net;
pub mod stat_rank;
pub mod synth;
pub mod tape;
pub(crate) mod tensor_io;

pub mod cli;
pub mod config;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
