//! Encoders: tokenizer, image tower, shared modal encoder, match heads.

mod config;
mod encoder;
mod tokenizer;

pub use config::EncoderConfig;
pub use encoder::{
    expected_shapes, init_params, padded_positions, patchify, validate_params, FusionEncoding,
    ImageEncoding, MatchHead, ModelGraph, TextEncoding,
};
pub use tokenizer::{tokenize, TokenMatrix, TokenSequence, Vocab, CLS_ID, OOV_ID, PAD_ID};
