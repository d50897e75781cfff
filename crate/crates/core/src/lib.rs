//! Query-aware language-image fusion at desk scale.
//!
//! The crate trains a small vision-language model on a synthetic product
//! corpus: a patch-based image encoder feeds a shared modal encoder with
//! text, image and fusion paths; contrastive and matching losses align query,
//! title, image and fused embeddings; a generative-filter pass corrects false
//! negatives in the in-batch label matrices. Evaluation covers ranking
//! metrics, per-category modality weights and a 2-D projection export.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod genfilt;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
