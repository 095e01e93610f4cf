//! Item alignment and semantic-ID tokenisation.

pub mod align;
pub mod io;
pub mod kmeans;
pub mod metrics;
pub mod pairs;
pub mod rq;
pub mod trie;

pub use align::{i2i_contrastive_loss, qformer_compress, AlignerConfig, ItemAligner};
pub use metrics::{tokenizer_metrics, TokenizerMetrics};
pub use pairs::{build_item_pairs, ItemPair, ItemPairSet, PairConfig, PairKind};
pub use rq::{fit_random_rq, fit_rq_kmeans, CodebookStack, Quantized, RqFit};
pub use trie::Trie;

/// Coarse-to-fine code tuple identifying an item.
pub type SemanticId = Vec<usize>;
