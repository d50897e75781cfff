//! Similarity scoring and label correction: query-product pairs are scored
//! by the mean of query-image and query-title similarity, image-title pairs
//! by caption-feature similarity, and pairs at or above the threshold flip
//! from negative to positive. Flips are strictly 0 to 1 and only off the
//! diagonal; annotated labels are never weakened.

use std::collections::{HashMap, HashSet};

use crate::error::Result;
use crate::genfilt::features::FeatureStore;
use crate::genfilt::GenFiltConfig;
use crate::losses::LabelMatrix;
use crate::model::{tokenize, EncoderConfig, ModelGraph, TokenMatrix, Vocab};
use crate::numerics::{ParamSet, Scalar};

/// Scores similarity of two short strings in `[-1, 1]`.
pub trait SimilarityScorer {
    fn score(&mut self, a: &str, b: &str) -> Result<f64>;
}

/// Jaccard overlap of normalized token sets; two empty strings count as
/// identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let set = |text: &str| -> HashSet<String> {
        text.split_whitespace().map(|t| t.to_lowercase()).collect()
    };
    let (sa, sb) = (set(a), set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let intersection = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - intersection;
    intersection as f64 / union as f64
}

/// Model-free backend: token-set Jaccard.
pub struct TokenOverlapScorer;

impl SimilarityScorer for TokenOverlapScorer {
    fn score(&mut self, a: &str, b: &str) -> Result<f64> {
        Ok(jaccard(a, b))
    }
}

/// Model backend: cosine of text-path embeddings under a parameter
/// snapshot. Each distinct string is embedded once and cached, so the
/// scorer amortizes across batches of a training stage.
pub struct EmbeddingScorer<S: Scalar> {
    cfg: EncoderConfig,
    params: ParamSet<S>,
    vocab: Vocab,
    cache: HashMap<String, Vec<f64>>,
}

impl<S: Scalar> EmbeddingScorer<S> {
    pub fn new(cfg: EncoderConfig, params: ParamSet<S>, vocab: Vocab) -> Self {
        EmbeddingScorer { cfg, params, vocab, cache: HashMap::new() }
    }

    fn ensure(&mut self, text: &str) -> Result<()> {
        if self.cache.contains_key(text) {
            return Ok(());
        }
        let seq = tokenize(&self.vocab, text, self.cfg.max_text_len)?;
        let tokens = TokenMatrix::from_sequences(std::slice::from_ref(&seq))?;
        let mut mg = ModelGraph::new(&self.cfg, &self.params, false)?;
        let encoding = mg.encode_text(&tokens)?;
        let row = mg.graph_ref().value(encoding.embedding).data().to_vec();
        self.cache.insert(text.to_string(), row.iter().map(|v| v.to_f64()).collect());
        Ok(())
    }
}

impl<S: Scalar> SimilarityScorer for EmbeddingScorer<S> {
    fn score(&mut self, a: &str, b: &str) -> Result<f64> {
        self.ensure(a)?;
        self.ensure(b)?;
        let (ea, eb) = (&self.cache[a], &self.cache[b]);
        let dot: f64 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
        Ok(dot.clamp(-1.0, 1.0))
    }
}

/// Flip counts from one filtering pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct FilterStats {
    pub query_product_flips: usize,
    pub image_title_flips: usize,
    /// Batch rows whose product has no generated features; their pairs are
    /// left untouched.
    pub rows_without_features: usize,
}

impl FilterStats {
    /// Accumulates another batch's counts, for per-epoch totals.
    pub fn absorb(&mut self, other: FilterStats) {
        self.query_product_flips += other.query_product_flips;
        self.image_title_flips += other.image_title_flips;
        self.rows_without_features += other.rows_without_features;
    }
}

/// Corrects false negatives in a batch's label matrices. Rows with an
/// empty query contribute no query-product corrections, and rows without
/// generated features are skipped entirely on the affected side.
pub fn filter_batch_labels(
    queries: &[String],
    product_ids: &[String],
    store: &FeatureStore,
    scorer: &mut dyn SimilarityScorer,
    cfg: &GenFiltConfig,
    labels_qp: &mut LabelMatrix,
    labels_it: &mut LabelMatrix,
) -> Result<FilterStats> {
    let b = labels_qp.n();
    assert_eq!(queries.len(), b, "query count must match the label matrix");
    assert_eq!(product_ids.len(), b, "product count must match the label matrix");
    assert_eq!(labels_it.n(), b, "label matrices must agree on batch size");

    let mut stats = FilterStats::default();
    let features: Vec<_> = product_ids.iter().map(|id| store.get(id)).collect();
    stats.rows_without_features = features.iter().filter(|f| f.is_none()).count();
    if !cfg.enabled() {
        return Ok(stats);
    }
    let (sigma_qp, sigma_it) = (cfg.sigma_for_query_product(), cfg.sigma_for_image_title());

    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if cfg.query_product && !labels_qp.get(i, j) && !queries[i].is_empty() {
                if let Some(fj) = features[j] {
                    let q_image = scorer.score(&queries[i], &fj.image_caption)?;
                    let q_title = scorer.score(&queries[i], &fj.title_features.text())?;
                    if (q_image + q_title) / 2.0 >= sigma_qp {
                        labels_qp.set(i, j, true);
                        stats.query_product_flips += 1;
                    }
                }
            }
            if cfg.image_title && !labels_it.get(i, j) {
                if let (Some(fi), Some(fj)) = (features[i], features[j]) {
                    let i_title = scorer.score(&fi.image_caption, &fj.title_features.text())?;
                    if i_title >= sigma_it {
                        labels_it.set(i, j, true);
                        stats.image_title_flips += 1;
                    }
                }
            }
        }
    }
    Ok(stats)
}
