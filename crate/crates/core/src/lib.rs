//! Multi-vocabulary bag-of-words image retrieval.
//!
//! Descriptors are quantized against `K` independently trained
//! vocabularies and indexed in `K` inverted files. At query time the `K`
//! posting lists of each query feature are merged: by plain histogram
//! concatenation (B1), by requiring agreement of all vocabularies (B2), or
//! by weighting features found in several lists with the probability that
//! they are true matches, estimated from how much the lists overlap.

pub mod bayes;
pub mod cli;
pub mod error;
pub mod eval;
pub mod format;
pub mod hamming;
pub mod index;
pub mod retrieval;
pub mod types;
pub mod vocab;

pub use bayes::{bayes_weight, decompose, term1, term2, term3, MergeConfig, SetDecomposition, WeightModel};
pub use error::{Error, Result};
pub use eval::{average_precision, generate_synthetic, ns_score, GroundTruth, SyntheticSpec};
pub use hamming::{compute_signature, hamming_distance, HammingParams, Signature};
pub use index::{build_index, IndexBundle, InvertedFile, PostingEntry};
pub use retrieval::{rank_aggregate, score_query, Method, RankedResult, ScoringMethod};
pub use types::{Corpus, FeatureRef, ImageRecord, Vocabulary};
pub use vocab::{quantize, train_vocabulary};
