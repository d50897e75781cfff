//! False-negative correction for in-batch contrastive labels: generate
//! compact text features for every product's title and image, score
//! cross-pair similarities, and relabel pairs above a threshold as
//! positives before the loss sees them.

pub mod features;
pub mod filter;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use features::{
    build_generator, generate_corpus_features, generate_product_features, title_prompt,
    unique_product_inputs, FeatureGenerator, FeatureRequest, FeatureResponse, FeatureStore,
    FilePairGenerator, GeneratedFeatures, GenerationStats, GeneratorSpec, ProductInputs,
    RequestKind, SubprocessGenerator, SyntheticGenerator, TitleFeatures, FEATURES_FILE,
    IMAGE_PROMPT, TITLE_PROMPT_TEMPLATE,
};
pub use filter::{
    filter_batch_labels, jaccard, EmbeddingScorer, FilterStats, SimilarityScorer,
    TokenOverlapScorer,
};

/// How pair similarity is scored during filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityBackend {
    /// Cosine of text-path embeddings of the two strings, under a parameter
    /// snapshot taken when the scorer is built.
    ModelEmbedding,
    /// Jaccard overlap of normalized token sets; model-free.
    TokenOverlap,
}

/// Filtering knobs. A single threshold applies to both pair kinds unless a
/// per-kind override is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenFiltConfig {
    /// Similarity threshold for relabeling a pair as positive.
    pub sigma: f64,
    pub backend: SimilarityBackend,
    /// Correct query-product pairs (mean of query-image and query-title
    /// similarity).
    pub query_product: bool,
    /// Correct image-title pairs (caption vs. title-feature similarity).
    pub image_title: bool,
    pub sigma_query_product: Option<f64>,
    pub sigma_image_title: Option<f64>,
    pub generator: GeneratorSpec,
}

impl Default for GenFiltConfig {
    fn default() -> Self {
        GenFiltConfig {
            sigma: 0.9,
            backend: SimilarityBackend::ModelEmbedding,
            query_product: true,
            image_title: true,
            sigma_query_product: None,
            sigma_image_title: None,
            generator: GeneratorSpec::Synthetic,
        }
    }
}

impl GenFiltConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, value) in [
            ("genfilt.sigma", Some(self.sigma)),
            ("genfilt.sigma_query_product", self.sigma_query_product),
            ("genfilt.sigma_image_title", self.sigma_image_title),
        ] {
            if let Some(v) = value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(path, "must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// True when at least one pair kind is being corrected.
    pub fn enabled(&self) -> bool {
        self.query_product || self.image_title
    }

    pub fn sigma_for_query_product(&self) -> f64 {
        self.sigma_query_product.unwrap_or(self.sigma)
    }

    pub fn sigma_for_image_title(&self) -> f64 {
        self.sigma_image_title.unwrap_or(self.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = GenFiltConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.sigma, 0.9);
        assert!(cfg.enabled());
        assert_eq!(cfg.sigma_for_query_product(), 0.9);
        assert_eq!(cfg.sigma_for_image_title(), 0.9);
    }

    #[test]
    fn sigma_out_of_range_is_rejected_with_its_field_path() {
        let cfg = GenFiltConfig { sigma: 1.2, ..GenFiltConfig::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("genfilt.sigma"));

        let cfg =
            GenFiltConfig { sigma_query_product: Some(-0.1), ..GenFiltConfig::default() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("genfilt.sigma_query_product"), "{msg}");
    }

    #[test]
    fn per_kind_overrides_take_precedence() {
        let cfg = GenFiltConfig {
            sigma_query_product: Some(0.5),
            sigma_image_title: Some(0.7),
            ..GenFiltConfig::default()
        };
        assert_eq!(cfg.sigma_for_query_product(), 0.5);
        assert_eq!(cfg.sigma_for_image_title(), 0.7);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = GenFiltConfig {
            backend: SimilarityBackend::TokenOverlap,
            query_product: false,
            ..GenFiltConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("token-overlap"), "{text}");
        let back: GenFiltConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.backend, SimilarityBackend::TokenOverlap);
        assert!(!back.query_product);
        assert!(serde_json::from_str::<GenFiltConfig>("{\"simga\":0.9}").is_err());
    }
}
