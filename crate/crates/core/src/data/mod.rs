//! Interaction ingestion, implicit conversion, splitting, negative sampling
//! and item popularity.

mod dataset;
mod popularity;
mod sampling;
pub mod synth;

pub use dataset::{
    load_dataset, parse_line, DatasetFormat, Interaction, InteractionDataset, RawInteraction, Split, SplitConfig,
    SplitManifest, SplitMode,
};
pub use popularity::{compute_popularity, weighted_sample_without_replacement, PopularityTable, DEFAULT_HOT_COUNT};
pub use sampling::{sample_negatives, ClientDataset};
