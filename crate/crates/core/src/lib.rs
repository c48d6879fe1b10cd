//! Text-embedding analysis toolkit.
//!
//! * [`encoder`]: toy causal transformer text encoder and token masking.
//! * [`teb`]: pure-embedding construction, replacement, the text-embedding
//!   balance loss with analytic gradients and its bounded descent loop.
//! * [`attention`]: cross-attention maps, symmetric KL map distance, token
//!   similarity matrices and similarity/distance correlation.
//! * [`eval`]: detection-based mixture/missing classification, category
//!   tallies and information-bias statistics.
//! * [`harness`]: prompt benchmark generation and end-to-end runs.

pub mod attention;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod interchange;
pub mod rng;
pub mod teb;
pub mod tokenizer;

pub use embedding::{cosine_sim, EmbeddingMatrix, PromptLayout};
pub use encoder::{AttentionMask, EncoderConfig, TextEncoder};
pub use error::{Error, Result};
pub use teb::{OptimizerConfig, PureEmbeddingSet, TebLossValue};
pub use interchange::{read_embeddings, write_embeddings, InterchangeManifest, Provenance};

