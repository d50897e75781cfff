//! Synthetic product corpus: catalog with per-category modality routing,
//! deterministic image rendering, stage-file generation, and batch
//! collation.

pub mod catalog;
pub mod dataset;
pub mod generate;
pub mod render;

pub use catalog::{
    compose_query, lexicon, matches_query_text, satisfies, Category, ProductSpec, QueryDraft,
};
pub use dataset::{collate, epoch_batches, CollatedBatch, Dataset, ImageStore};
pub use generate::{
    files, generate_corpus, load_products, CorpusConfig, CorpusSummary, DatasetRecord, NoiseFlags,
    Stage,
};
pub use render::{
    classify_image, load_image, render_image, save_image, to_planar, ImageFormat, ImageReading,
};
