//! Offline retrieval evaluation: ranking metrics over the labeled eval set,
//! recall against sampled candidate pools, a per-category analysis of how much
//! the fused embedding leans on each modality, and a two-component projection
//! of the embedding space for plotting.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{files, load_products, matches_query_text, Dataset, Stage};
use crate::error::{Error, Result};
use crate::genfilt::{unique_product_inputs, ProductInputs};
use crate::model::{tokenize, EncoderConfig, ModelGraph, TokenMatrix, Vocab};
use crate::numerics::{ParamSet, Scalar};
use crate::rng;

// ── Configuration ───────────────────────────────────────────────────────

/// Knobs of the offline protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cutoffs for recall, strictly increasing.
    pub recall_ks: Vec<usize>,
    /// Distractors ranked against each ground-truth product.
    pub candidates_per_query: usize,
    /// Matching and non-matching products collected for the projection.
    pub projection_positives: usize,
    pub projection_negatives: usize,
    /// Forward-pass batch for embedding queries and products.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            recall_ks: vec![5, 10, 20],
            candidates_per_query: 100,
            projection_positives: 8,
            projection_negatives: 8,
            batch_size: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.recall_ks.is_empty() {
            return Err(Error::config("eval.recall_ks", "need at least one cutoff"));
        }
        if self.recall_ks[0] == 0 || !self.recall_ks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("eval.recall_ks", "must be positive and strictly increasing"));
        }
        if self.candidates_per_query == 0 {
            return Err(Error::config("eval.candidates_per_query", "must be positive"));
        }
        if self.projection_positives < 2 || self.projection_negatives < 2 {
            return Err(Error::config(
                "eval.projection_positives",
                "projection needs at least 2 products per side",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        Ok(())
    }
}

// ── Scoring ─────────────────────────────────────────────────────────────

/// How a query is scored against a product's embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoringMode {
    /// Query against the title embedding.
    #[serde(rename = "qt")]
    QueryTitle,
    /// Query against the image embedding.
    #[serde(rename = "qi")]
    QueryImage,
    /// Query against the fused multimodal embedding.
    #[serde(rename = "qm")]
    QueryMulti,
    /// Mean of the title and image scores, fusing decisions instead of
    /// representations.
    #[serde(rename = "dc")]
    DivideConquer,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 4] = [
        ScoringMode::QueryTitle,
        ScoringMode::QueryImage,
        ScoringMode::QueryMulti,
        ScoringMode::DivideConquer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoringMode::QueryTitle => "qt",
            ScoringMode::QueryImage => "qi",
            ScoringMode::QueryMulti => "qm",
            ScoringMode::DivideConquer => "dc",
        }
    }
}

/// One product's unit-norm embeddings in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalEmbeddings {
    pub title: Vec<f64>,
    pub image: Vec<f64>,
    pub fused: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inner product of a query embedding with the product side `mode` selects.
/// Unit norms make this the cosine.
pub fn score_pair(query: &[f64], product: &ModalEmbeddings, mode: ScoringMode) -> f64 {
    match mode {
        ScoringMode::QueryTitle => dot(query, &product.title),
        ScoringMode::QueryImage => dot(query, &product.image),
        ScoringMode::QueryMulti => dot(query, &product.fused),
        ScoringMode::DivideConquer => {
            0.5 * (dot(query, &product.title) + dot(query, &product.image))
        }
    }
}

// ── Classification metrics ──────────────────────────────────────────────

fn check_two_classes(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("scores must be finite"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::contract("need both a positive and a negative example"));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting half, computed from tie-averaged ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_two_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share one tie-averaged value.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum += avg;
            }
        }
        i = j;
    }
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// One precision-recall curve point, taken with every score at or above
/// `threshold` predicted positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points, one per distinct score, thresholds descending.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check_two_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(PrPoint { threshold, recall: tp / pos, precision: tp / (tp + fp) });
    }
    Ok(points)
}

// ── Recall at K ─────────────────────────────────────────────────────────

/// One recall cutoff and the fraction of queries whose ground truth ranked
/// within it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub value: f64,
}

/// Ranks each query's ground-truth product against `candidates_per_query`
/// distractors sampled per query without replacement from the rest of the
/// pool. Ties rank by product id, and the sampling streams depend only on
/// `seed` and the query index, so every mode sees the same candidate sets.
pub fn recall_at_k(
    ground_truth: &[String],
    pool: &[String],
    ks: &[usize],
    candidates_per_query: usize,
    seed: u64,
    mut score: impl FnMut(usize, &str) -> f64,
) -> Result<Vec<RecallPoint>> {
    if ground_truth.is_empty() {
        return Err(Error::contract("recall needs at least one query"));
    }
    if pool.len() <= candidates_per_query {
        return Err(Error::config(
            "eval.candidates_per_query",
            &format!(
                "needs a pool larger than the candidate count, found {} products for {}",
                pool.len(),
                candidates_per_query
            ),
        ));
    }
    let mut hits = vec![0usize; ks.len()];
    for (qi, truth) in ground_truth.iter().enumerate() {
        if !pool.iter().any(|p| p == truth) {
            return Err(Error::contract(format!("ground truth {truth} is not in the pool")));
        }
        let mut eligible: Vec<&str> =
            pool.iter().map(String::as_str).filter(|p| *p != truth).collect();
        let mut draw = rng::substream(seed, "recall-candidates", qi as u64);
        for j in 0..candidates_per_query {
            let pick = j + draw.gen_range(0..eligible.len() - j);
            eligible.swap(j, pick);
        }
        let mut ranked: Vec<(f64, &str)> = Vec::with_capacity(candidates_per_query + 1);
        ranked.push((score(qi, truth), truth));
        for &candidate in &eligible[..candidates_per_query] {
            ranked.push((score(qi, candidate), candidate));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let rank = 1 + ranked.iter().position(|(_, p)| *p == truth.as_str()).expect("truth ranked");
        for (slot, &k) in ks.iter().enumerate() {
            if rank <= k {
                hits[slot] += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(&hits)
        .map(|(&k, &h)| RecallPoint { k, value: h as f64 / ground_truth.len() as f64 })
        .collect())
}

// ── Modality weights ────────────────────────────────────────────────────

/// Share of the fused embedding's similarity budget owed to the image side,
/// from the fused-image and fused-title cosines. Both are shifted into
/// `[0, 2]` before normalizing so the ratio is well defined for negative
/// cosines and symmetric at 0.5. `None` when the shifted sum underflows.
pub fn image_weight(sim_image: f64, sim_title: f64) -> Option<f64> {
    let (i, t) = (sim_image + 1.0, sim_title + 1.0);
    if i + t < 1e-9 {
        return None;
    }
    Some(i / (i + t))
}

/// Mean image weight over one category's products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub category: String,
    pub products: usize,
    /// Products whose shifted similarity sum underflowed, left out of the
    /// mean.
    pub skipped: usize,
    pub weight_image: f64,
    pub weight_text: f64,
}

/// Per-category mean image weight over `(category, fused-image cosine,
/// fused-title cosine)` rows, in category name order.
pub fn modality_weights(rows: &[(String, f64, f64)]) -> Vec<WeightRow> {
    let mut grouped: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for (category, sim_image, sim_title) in rows {
        let entry = grouped.entry(category).or_insert((0, 0, 0.0));
        entry.0 += 1;
        match image_weight(*sim_image, *sim_title) {
            Some(w) => entry.2 += w,
            None => entry.1 += 1,
        }
    }
    grouped
        .into_iter()
        .map(|(category, (products, skipped, sum))| {
            let counted = (products - skipped).max(1) as f64;
            let weight_image = sum / counted;
            WeightRow {
                category: category.to_string(),
                products,
                skipped,
                weight_image,
                weight_text: 1.0 - weight_image,
            }
        })
        .collect()
}

// ── Principal components ────────────────────────────────────────────────

/// Mean, top-two directions, and the full descending eigenvalue spectrum of
/// a point collection's covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Coordinates of one point in the top-two subspace.
    pub fn project(&self, point: &[f64]) -> (f64, f64) {
        let centered: Vec<f64> = point.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        (dot(&centered, &self.components[0]), dot(&centered, &self.components[1]))
    }
}

/// Principal components of `data` (points as rows) by cyclic Jacobi sweeps
/// over the covariance matrix.
pub fn principal_components(data: &[Vec<f64>]) -> Result<Pca> {
    let n = data.len();
    if n < 2 {
        return Err(Error::contract("principal components need at least 2 points"));
    }
    let d = data[0].len();
    if d < 2 || data.iter().any(|row| row.len() != d) {
        return Err(Error::contract("points must share one dimension of at least 2"));
    }
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n as f64;
        }
    }
    // Covariance, row-major symmetric.
    let mut cov = vec![0.0; d * d];
    for row in data {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 1e-18 {
        return Err(Error::contract("embedding collection is degenerate: all points identical"));
    }

    // Jacobi rotations accumulate the eigenvectors into the columns of v.
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += cov[p * d + q] * cov[p * d + q];
            }
        }
        if off <= 1e-30 * trace * trace {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = cov[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (cov[q * d + q] - cov[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (cov[k * d + p], cov[k * d + q]);
                    cov[k * d + p] = c * akp - s * akq;
                    cov[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (cov[p * d + k], cov[q * d + k]);
                    cov[p * d + k] = c * apk - s * aqk;
                    cov[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut spectrum: Vec<(f64, usize)> =
        (0..d).map(|i| (cov[i * d + i], i)).collect();
    spectrum.sort_by(|a, b| b.0.total_cmp(&a.0));
    let column = |i: usize| -> Vec<f64> {
        let mut col: Vec<f64> = (0..d).map(|k| v[k * d + i]).collect();
        // Sign convention: the largest-magnitude coordinate points up.
        let lead = col.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            for x in &mut col {
                *x = -*x;
            }
        }
        col
    };
    Ok(Pca {
        mean,
        components: [column(spectrum[0].1), column(spectrum[1].1)],
        eigenvalues: spectrum.into_iter().map(|(l, _)| l).collect(),
    })
}

// ── Model-side embedding ────────────────────────────────────────────────

/// Read-only forward passes over a parameter snapshot, batched.
pub struct ModelEvaluator<'a, S: Scalar> {
    cfg: &'a EncoderConfig,
    params: &'a ParamSet<S>,
    vocab: &'a Vocab,
}

impl<'a, S: Scalar> ModelEvaluator<'a, S> {
    pub fn new(cfg: &'a EncoderConfig, params: &'a ParamSet<S>, vocab: &'a Vocab) -> Result<Self> {
        crate::model::validate_params(cfg, params)?;
        Ok(ModelEvaluator { cfg, params, vocab })
    }

    /// Unit-norm text embeddings through the shared query/title path.
    pub fn embed_texts(&self, texts: &[String], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(batch_size.max(1)) {
            let seqs = chunk
                .iter()
                .map(|t| tokenize(self.vocab, t, self.cfg.max_text_len))
                .collect::<Result<Vec<_>>>()?;
            let tokens = TokenMatrix::from_sequences(&seqs)?;
            let mut mg = ModelGraph::new(self.cfg, self.params, false)?;
            let enc = mg.encode_text(&tokens)?;
            extract_rows(&mut out, &mg, enc.embedding)?;
        }
        Ok(out)
    }

    /// Title, image, and fused embeddings per product.
    pub fn embed_products(
        &self,
        products: &[ProductInputs],
        batch_size: usize,
    ) -> Result<Vec<ModalEmbeddings>> {
        let size = self.cfg.image_size;
        let mut titles = Vec::with_capacity(products.len());
        let mut images = Vec::with_capacity(products.len());
        let mut fused = Vec::with_capacity(products.len());
        for chunk in products.chunks(batch_size.max(1)) {
            let seqs = chunk
                .iter()
                .map(|p| tokenize(self.vocab, &p.title, self.cfg.max_text_len))
                .collect::<Result<Vec<_>>>()?;
            let tokens = TokenMatrix::from_sequences(&seqs)?;
            let mut pixels: Vec<S> = Vec::with_capacity(chunk.len() * 3 * size * size);
            for p in chunk {
                let rgb = crate::corpus::load_image(&p.image_path, size)?;
                let planar: crate::numerics::Tensor<S> = crate::corpus::to_planar(&rgb, size);
                pixels.extend_from_slice(planar.data());
            }
            let tensor = crate::numerics::Tensor::new(vec![chunk.len(), 3, size, size], pixels)?;
            let mut mg = ModelGraph::new(self.cfg, self.params, false)?;
            let text_enc = mg.encode_text(&tokens)?;
            let image_enc = mg.encode_image(&tensor)?;
            let fused_enc = mg.encode_fusion(&tokens, image_enc.vit_seq)?;
            extract_rows(&mut titles, &mg, text_enc.embedding)?;
            extract_rows(&mut images, &mg, image_enc.embedding)?;
            extract_rows(&mut fused, &mg, fused_enc.embedding)?;
        }
        Ok(titles
            .into_iter()
            .zip(images)
            .zip(fused)
            .map(|((title, image), fused)| ModalEmbeddings { title, image, fused })
            .collect())
    }
}

fn extract_rows<S: Scalar>(
    out: &mut Vec<Vec<f64>>,
    mg: &ModelGraph<'_, S>,
    var: crate::numerics::Var,
) -> Result<()> {
    let tensor = mg.graph_ref().value(var);
    let d = tensor.shape()[1];
    for row in tensor.data().chunks(d) {
        out.push(row.iter().map(|v| v.to_f64()).collect());
    }
    Ok(())
}

// ── Report assembly ─────────────────────────────────────────────────────

/// Metrics of one scoring mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub auc: f64,
    pub recall: Vec<RecallPoint>,
    pub pr: Vec<PrPoint>,
}

/// Everything one evaluation run measured, plus what it ran on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub seed: u64,
    pub candidates_per_query: usize,
    pub queries: usize,
    pub pool_products: usize,
    /// Keyed by mode name, alphabetical.
    pub modes: BTreeMap<String, ModeReport>,
    pub weights: Vec<WeightRow>,
}

/// Inputs of one evaluation run.
pub struct EvalInputs<'a, S: Scalar> {
    pub encoder: &'a EncoderConfig,
    pub params: &'a ParamSet<S>,
    pub vocab: &'a Vocab,
    pub eval: &'a EvalConfig,
    pub data_dir: &'a Path,
    pub out_dir: &'a Path,
    pub seed: u64,
    /// Identifier of the parameter snapshot, echoed into the report.
    pub checkpoint: String,
}

/// Runs the full offline protocol on a corpus directory's eval split and
/// writes the report plus per-mode curve files under `out_dir`.
pub fn run_eval<S: Scalar>(inputs: &EvalInputs<S>) -> Result<EvalReport> {
    inputs.eval.validate()?;
    let dataset = Dataset::load(&inputs.data_dir.join(files::EVAL), Stage::Labeled)?;
    if dataset.is_empty() {
        return Err(Error::contract("the eval split has no records"));
    }
    let catalog = load_products(&inputs.data_dir.join(files::PRODUCTS))?;
    let category_of: HashMap<&str, &str> =
        catalog.iter().map(|p| (p.product_id.as_str(), p.category.name())).collect();
    let evaluator = ModelEvaluator::new(inputs.encoder, inputs.params, inputs.vocab)?;
    std::fs::create_dir_all(inputs.out_dir).map_err(|e| Error::io(inputs.out_dir, e))?;

    // Distinct queries in first-appearance order, with each one's first
    // positive product as its retrieval ground truth.
    let mut query_order: Vec<&str> = Vec::new();
    let mut query_index: HashMap<&str, usize> = HashMap::new();
    for r in &dataset.records {
        query_index.entry(r.query.as_str()).or_insert_with(|| {
            query_order.push(r.query.as_str());
            query_order.len() - 1
        });
    }
    let mut truth_of: Vec<Option<&str>> = vec![None; query_order.len()];
    for r in &dataset.records {
        if r.label == Some(1) {
            let qi = query_index[r.query.as_str()];
            truth_of[qi].get_or_insert(r.product_id.as_str());
        }
    }

    let query_texts: Vec<String> = query_order.iter().map(|q| q.to_string()).collect();
    let query_embs = evaluator.embed_texts(&query_texts, inputs.eval.batch_size)?;

    // The candidate pool: every product the eval split references, embedded
    // once from its first-appearing title and image.
    let pool = unique_product_inputs(&[&dataset]);
    let pool_embs = evaluator.embed_products(&pool, inputs.eval.batch_size)?;
    let pool_index: HashMap<&str, usize> =
        pool.iter().enumerate().map(|(i, p)| (p.product_id.as_str(), i)).collect();
    let pool_ids: Vec<String> = pool.iter().map(|p| p.product_id.clone()).collect();

    // Labeled pairs keep each record's own title and image, noise included.
    let record_inputs: Vec<ProductInputs> = dataset
        .records
        .iter()
        .map(|r| ProductInputs {
            product_id: r.product_id.clone(),
            title: r.title.clone(),
            image_path: dataset.root().join(&r.image_path),
        })
        .collect();
    let record_embs = evaluator.embed_products(&record_inputs, inputs.eval.batch_size)?;
    let labels: Vec<bool> = dataset.records.iter().map(|r| r.label == Some(1)).collect();

    let recall_queries: Vec<(usize, String)> = truth_of
        .iter()
        .enumerate()
        .filter_map(|(qi, t)| t.map(|t| (qi, t.to_string())))
        .collect();
    let ground_truth: Vec<String> = recall_queries.iter().map(|(_, t)| t.clone()).collect();

    let mut modes = BTreeMap::new();
    for mode in ScoringMode::ALL {
        let scores: Vec<f64> = dataset
            .records
            .iter()
            .zip(&record_embs)
            .map(|(r, emb)| score_pair(&query_embs[query_index[r.query.as_str()]], emb, mode))
            .collect();
        let recall = recall_at_k(
            &ground_truth,
            &pool_ids,
            &inputs.eval.recall_ks,
            inputs.eval.candidates_per_query,
            inputs.seed,
            |i, pid| {
                let (qi, _) = recall_queries[i];
                score_pair(&query_embs[qi], &pool_embs[pool_index[pid]], mode)
            },
        )?;
        modes.insert(
            mode.name().to_string(),
            ModeReport { auc: auc(&scores, &labels)?, recall, pr: pr_curve(&scores, &labels)? },
        );
    }

    let weight_rows: Vec<(String, f64, f64)> = pool
        .iter()
        .zip(&pool_embs)
        .map(|(p, emb)| {
            let category = category_of.get(p.product_id.as_str()).copied().ok_or_else(|| {
                Error::contract(format!("product {} is not in the catalog", p.product_id))
            })?;
            Ok((
                category.to_string(),
                dot(&emb.fused, &emb.image),
                dot(&emb.fused, &emb.title),
            ))
        })
        .collect::<Result<_>>()?;
    let weights = modality_weights(&weight_rows);

    let projection = select_projection(
        inputs.eval,
        &query_order,
        &query_embs,
        &pool,
        &pool_embs,
        &catalog,
    )?;
    write_projection(&inputs.out_dir.join("projection.csv"), &projection)?;

    let report = EvalReport {
        checkpoint: inputs.checkpoint.clone(),
        seed: inputs.seed,
        candidates_per_query: inputs.eval.candidates_per_query,
        queries: query_order.len(),
        pool_products: pool.len(),
        modes,
        weights,
    };
    write_report(inputs.out_dir, &report)?;
    Ok(report)
}

// ── Projection export ───────────────────────────────────────────────────

/// One plotted point of the embedding-space export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedPoint {
    pub role: &'static str,
    pub modality: &'static str,
    pub x: f64,
    pub y: f64,
}

/// Projects one query with matching and non-matching products into the
/// top-two principal plane of the collected embeddings. Rows: the query,
/// then title/image/fused per positive, then the same per negative.
pub fn project_neighborhood(
    query_emb: &[f64],
    positives: &[ModalEmbeddings],
    negatives: &[ModalEmbeddings],
) -> Result<Vec<ProjectedPoint>> {
    if positives.len() < 2 || negatives.len() < 2 {
        return Err(Error::contract("projection needs at least 2 products per side"));
    }
    let mut data: Vec<Vec<f64>> = vec![query_emb.to_vec()];
    for emb in positives.iter().chain(negatives) {
        data.push(emb.title.clone());
        data.push(emb.image.clone());
        data.push(emb.fused.clone());
    }
    let pca = principal_components(&data)?;
    let mut points = Vec::with_capacity(data.len());
    let (x, y) = pca.project(query_emb);
    points.push(ProjectedPoint { role: "query", modality: "query", x, y });
    for (count, role) in [(positives.len(), "positive"), (negatives.len(), "negative")] {
        let offset = points.len();
        for i in 0..count {
            for (j, modality) in ["title", "image", "fused"].into_iter().enumerate() {
                let (x, y) = pca.project(&data[offset + i * 3 + j]);
                points.push(ProjectedPoint { role, modality, x, y });
            }
        }
    }
    Ok(points)
}

/// Picks the first eval query with enough matching and non-matching pool
/// products and projects its neighborhood.
fn select_projection(
    cfg: &EvalConfig,
    query_order: &[&str],
    query_embs: &[Vec<f64>],
    pool: &[ProductInputs],
    pool_embs: &[ModalEmbeddings],
    catalog: &[crate::corpus::ProductSpec],
) -> Result<Vec<ProjectedPoint>> {
    let spec_of: HashMap<&str, &crate::corpus::ProductSpec> =
        catalog.iter().map(|p| (p.product_id.as_str(), p)).collect();
    for (qi, query) in query_order.iter().enumerate() {
        let tokens: Vec<&str> = query.split_whitespace().collect();
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (p, emb) in pool.iter().zip(pool_embs) {
            let Some(spec) = spec_of.get(p.product_id.as_str()) else { continue };
            if matches_query_text(&tokens, spec) {
                if positives.len() < cfg.projection_positives {
                    positives.push(emb.clone());
                }
            } else if negatives.len() < cfg.projection_negatives {
                negatives.push(emb.clone());
            }
        }
        if positives.len() >= 2 && negatives.len() >= 2 {
            return project_neighborhood(&query_embs[qi], &positives, &negatives);
        }
    }
    Err(Error::contract(
        "no eval query has 2 matching and 2 non-matching pool products to project",
    ))
}

// ── Artifact files ──────────────────────────────────────────────────────

fn csv_writer(path: &Path, header: &str) -> Result<(BufWriter<File>, PathBuf)> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    Ok((w, path.to_path_buf()))
}

fn write_projection(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    let (mut w, path) = csv_writer(path, "role,modality,x,y")?;
    for p in points {
        writeln!(w, "{},{},{:.9e},{:.9e}", p.role, p.modality, p.x, p.y)
            .map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Writes `report.json` and the per-mode curve and recall files.
pub fn write_report(out_dir: &Path, report: &EvalReport) -> Result<()> {
    let path = out_dir.join("report.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), report)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    for (name, mode) in &report.modes {
        let (mut w, p) =
            csv_writer(&out_dir.join(format!("pr_curve_{name}.csv")), "threshold,recall,precision")?;
        for pt in &mode.pr {
            writeln!(w, "{:.9e},{:.9e},{:.9e}", pt.threshold, pt.recall, pt.precision)
                .map_err(|e| Error::io(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        let (mut w, p) = csv_writer(&out_dir.join(format!("recall_{name}.csv")), "k,recall")?;
        for pt in &mode.recall {
            writeln!(w, "{},{:.9e}", pt.k, pt.value).map_err(|e| Error::io(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    let (mut w, p) = csv_writer(
        &out_dir.join("weights.csv"),
        "category,products,skipped,weight_image,weight_text",
    )?;
    for row in &report.weights {
        writeln!(
            w,
            "{},{},{},{:.9e},{:.9e}",
            row.category, row.products, row.skipped, row.weight_image, row.weight_text
        )
        .map_err(|e| Error::io(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))
}
