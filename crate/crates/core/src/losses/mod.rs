//! Training objectives: symmetric image-title contrast, query-anchored
//! supervised contrast against image/title/multimodal embeddings, and the two
//! binary match heads with hard-negative mining, combined by a weighted
//! aggregator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MatchHead, ModelGraph, TokenMatrix};
use crate::numerics::{Graph, Scalar, Tensor, Var};

// ── Configuration ───────────────────────────────────────────────────────

/// How a hard negative is picked from the non-positive candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningMode {
    /// Draw with probability proportional to the softmax of similarities.
    SampleProportional,
    /// Take the most similar candidate (ties break to the lowest index).
    Argmax,
}

/// Similarity source for query-multimodal negative mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QmmMiningSimilarity {
    /// Query against the fused title+image embedding (default).
    Fused,
    /// Query against the plain image embedding.
    Image,
}

/// Per-term weights for the total loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub qmm: f64,
    pub qic: f64,
    pub qtc: f64,
    pub qmc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { itc: 1.0, itm: 1.0, qmm: 1.0, qic: 1.0, qtc: 1.0, qmc: 1.0 }
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub temperature: f64,
    pub weights: LossWeights,
    pub hard_negative_mode: MiningMode,
    /// Temperature of the sampling softmax in hard-negative mining.
    pub mining_temperature: f64,
    pub qmm_mining: QmmMiningSimilarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            weights: LossWeights::default(),
            hard_negative_mode: MiningMode::SampleProportional,
            mining_temperature: 1.0,
            qmm_mining: QmmMiningSimilarity::Fused,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        if self.mining_temperature <= 0.0 {
            return Err(Error::config("loss.mining_temperature", "must be positive"));
        }
        let w = &self.weights;
        for (name, v) in [
            ("itc", w.itc),
            ("itm", w.itm),
            ("qmm", w.qmm),
            ("qic", w.qic),
            ("qtc", w.qtc),
            ("qmc", w.qmc),
        ] {
            if v < 0.0 {
                return Err(Error::config(&format!("loss.weights.{name}"), "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Which terms contribute in the current training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveTerms {
    pub itc: bool,
    pub itm: bool,
    pub qmm: bool,
    pub qic: bool,
    pub qtc: bool,
    pub qmc: bool,
}

impl ActiveTerms {
    /// Stage 1: image-title contrast only.
    pub fn contrastive_pretrain() -> Self {
        ActiveTerms { itc: true, itm: false, qmm: false, qic: false, qtc: false, qmc: false }
    }

    /// Stages 2 and 3: everything.
    pub fn all() -> Self {
        ActiveTerms { itc: true, itm: true, qmm: true, qic: true, qtc: true, qmc: true }
    }

    fn needs_query(&self) -> bool {
        self.qic || self.qtc || self.qmc || self.qmm
    }

    fn needs_fusion(&self) -> bool {
        self.qmc || self.itm || self.qmm
    }

    fn any(&self) -> bool {
        self.itc || self.itm || self.qmm || self.qic || self.qtc || self.qmc
    }
}

// ── Labels and positive sets ────────────────────────────────────────────

/// Square binary matrix of in-batch positive pairs; entry `(i, j)` says
/// whether row anchor `i` counts column `j` as a positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    n: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    /// Diagonal positives only.
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0u8; n * n];
        for i in 0..n {
            data[i * n + i] = 1;
        }
        LabelMatrix { n, data }
    }

    /// All-zero matrix.
    pub fn zeros(n: usize) -> Self {
        LabelMatrix { n, data: vec![0u8; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, positive: bool) {
        self.data[i * self.n + j] = positive as u8;
    }

    pub fn count_positives(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn transposed(&self) -> LabelMatrix {
        let mut t = LabelMatrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    t.set(j, i, true);
                }
            }
        }
        t
    }

    fn positive_rows(&self) -> Vec<Vec<usize>> {
        (0..self.n)
            .map(|i| (0..self.n).filter(|&j| self.get(i, j)).collect())
            .collect()
    }
}

/// Per-anchor in-batch positive index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSet {
    sets: Vec<Vec<usize>>,
}

impl PositiveSet {
    pub fn new(sets: Vec<Vec<usize>>, batch: usize) -> Result<Self> {
        if sets.len() != batch {
            return Err(Error::contract(format!(
                "positive set covers {} anchors for a batch of {batch}",
                sets.len()
            )));
        }
        for (i, s) in sets.iter().enumerate() {
            if s.iter().any(|&p| p >= batch) {
                return Err(Error::contract(format!("positive index out of range for anchor {i}")));
            }
        }
        Ok(PositiveSet { sets })
    }

    pub fn from_labels(labels: &LabelMatrix) -> Self {
        PositiveSet { sets: labels.positive_rows() }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn of(&self, anchor: usize) -> &[usize] {
        &self.sets[anchor]
    }

    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.sets.len()).filter(|&i| !self.sets[i].is_empty())
    }
}

// ── Contrastive kernels ─────────────────────────────────────────────────

/// Pairwise dot products: `[A, d] x [C, d] -> [A, C]`.
pub fn similarity_matrix<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let bt = g.transpose(b, 0, 1)?;
    g.matmul(a, bt)
}

/// Shared supervised-contrastive kernel over one similarity matrix: mean over
/// anchors with positives of the mean negative log-likelihood of each
/// positive under the softmax of the anchor's row at temperature `tau`.
fn weighted_nll<S: Scalar>(
    g: &mut Graph<S>,
    sim: Var,
    positives: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    let shape = g.value(sim).shape().to_vec();
    if shape.len() != 2 || positives.len() != shape[0] {
        return Err(Error::contract(format!(
            "similarity {shape:?} does not match {} anchor rows",
            positives.len()
        )));
    }
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        return Err(Error::contract("no anchor has a positive"));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut weights = vec![S::ZERO; rows * cols];
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let w = S::from_f64(1.0 / (pos.len() as f64 * anchors as f64));
        for &p in pos {
            weights[i * cols + p] = w;
        }
    }
    let scaled = g.scale(sim, S::from_f64(1.0 / tau))?;
    let log_probs = g.log_softmax(scaled)?;
    let w = g.constant(Tensor::new(shape, weights)?)?;
    let picked = g.mul(log_probs, w)?;
    let total = g.sum(picked)?;
    g.scale(total, -S::ONE)
}

/// Symmetric image-title contrastive loss over unit-norm embedding rows.
///
/// Each anchor's denominator runs over every counterpart in the batch; the
/// label matrix (possibly filter-corrected, diagonal included) marks the
/// numerator pairs. Returns the loss and the title-to-image similarity
/// matrix, which mining reuses.
pub fn itc_loss<S: Scalar>(
    g: &mut Graph<S>,
    z_t: Var,
    z_i: Var,
    labels: &LabelMatrix,
    tau: f64,
) -> Result<(Var, Var)> {
    let sim = similarity_matrix(g, z_t, z_i)?;
    let t2i = weighted_nll(g, sim, &labels.positive_rows(), tau)?;
    let sim_t = g.transpose(sim, 0, 1)?;
    let i2t = weighted_nll(g, sim_t, &labels.transposed().positive_rows(), tau)?;
    let both = g.add(t2i, i2t)?;
    let loss = g.scale(both, S::from_f64(0.5))?;
    Ok((loss, sim))
}

/// Query-anchored supervised contrastive loss against one embedding family.
pub fn supcon_loss<S: Scalar>(
    g: &mut Graph<S>,
    q: Var,
    z: Var,
    positives: &PositiveSet,
    tau: f64,
) -> Result<Var> {
    let sim = similarity_matrix(g, q, z)?;
    weighted_nll(g, sim, &positives.sets, tau)
}

// ── Hard-negative mining ────────────────────────────────────────────────

/// Mining result: one optional pick per anchor plus how many anchors had no
/// candidate at all.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub picks: Vec<Option<usize>>,
    pub skipped: usize,
}

/// Picks one hard negative per anchor from the detached similarity matrix,
/// excluding each anchor's positives.
pub fn mine_hard_negatives<S: Scalar>(
    sim: &Tensor<S>,
    positives: &PositiveSet,
    mode: MiningMode,
    mining_tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MiningOutcome> {
    let shape = sim.shape();
    if shape.len() != 2 || positives.len() != shape[0] {
        return Err(Error::contract(format!(
            "similarity {shape:?} does not match {} anchors",
            positives.len()
        )));
    }
    let cols = shape[1];
    let mut picks = Vec::with_capacity(positives.len());
    let mut skipped = 0;
    for i in 0..positives.len() {
        let excluded = positives.of(i);
        let candidates: Vec<usize> = (0..cols).filter(|j| !excluded.contains(j)).collect();
        if candidates.is_empty() {
            picks.push(None);
            skipped += 1;
            continue;
        }
        let row = |j: usize| sim.at2(i, j).to_f64();
        let pick = match mode {
            MiningMode::Argmax => {
                let mut best = candidates[0];
                for &j in &candidates[1..] {
                    if row(j) > row(best) {
                        best = j;
                    }
                }
                best
            }
            MiningMode::SampleProportional => {
                let max = candidates.iter().map(|&j| row(j)).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> =
                    candidates.iter().map(|&j| ((row(j) - max) / mining_tau).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut draw = rng.gen::<f64>() * total;
                let mut chosen = candidates[candidates.len() - 1];
                for (&j, &w) in candidates.iter().zip(&weights) {
                    if draw < w {
                        chosen = j;
                        break;
                    }
                    draw -= w;
                }
                chosen
            }
        };
        picks.push(Some(pick));
    }
    Ok(MiningOutcome { picks, skipped })
}

// ── Binary match losses ─────────────────────────────────────────────────

/// Mean two-class cross-entropy of match logits `[N, 2]` against 0/1 targets
/// (index 1 is "match").
pub fn match_bce<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[u8]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != targets.len() {
        return Err(Error::contract(format!(
            "match logits {shape:?} do not fit {} targets",
            targets.len()
        )));
    }
    let n = targets.len();
    let mut weights = vec![S::ZERO; n * 2];
    let w = S::from_f64(1.0 / n as f64);
    for (r, &y) in targets.iter().enumerate() {
        weights[r * 2 + (y != 0) as usize] = w;
    }
    let log_probs = g.log_softmax(logits)?;
    let sel = g.constant(Tensor::new(vec![n, 2], weights)?)?;
    let picked = g.mul(log_probs, sel)?;
    let total = g.sum(picked)?;
    g.scale(total, -S::ONE)
}

/// Image-title matching loss: coherent `(title_i, image_i)` pairs score 1;
/// mined hard pairings in both directions (anchor title with a hard image,
/// anchor image with a hard title) score 0. Anchors without candidates
/// contribute positives only.
#[allow(clippy::too_many_arguments)]
pub fn itm_loss<S: Scalar>(
    mg: &mut ModelGraph<S>,
    titles: &TokenMatrix,
    vit_seq: Var,
    pos_fusion_cls: Var,
    labels: &LabelMatrix,
    sim_it: &Tensor<S>,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize)> {
    let b = titles.batch;
    let positives = PositiveSet::from_labels(labels);
    let mined_images = mine_hard_negatives(
        sim_it,
        &positives,
        cfg.hard_negative_mode,
        cfg.mining_temperature,
        rng,
    )?;
    let sim_ti = transpose2(sim_it);
    let positives_t = PositiveSet::from_labels(&labels.transposed());
    let mined_titles = mine_hard_negatives(
        &sim_ti,
        &positives_t,
        cfg.hard_negative_mode,
        cfg.mining_temperature,
        rng,
    )?;

    let mut logit_blocks = Vec::new();
    let mut targets = Vec::new();

    let pos_logits = mg.match_logits(MatchHead::ImageText, pos_fusion_cls)?;
    logit_blocks.push(pos_logits);
    targets.extend(std::iter::repeat(1u8).take(b));

    // Anchor titles paired with their mined hard images.
    let with_neg_image: Vec<usize> =
        (0..b).filter(|&i| mined_images.picks[i].is_some()).collect();
    if !with_neg_image.is_empty() {
        let toks = titles.gather(&with_neg_image)?;
        let img_rows: Vec<usize> =
            with_neg_image.iter().map(|&i| mined_images.picks[i].unwrap()).collect();
        let seq = mg.gather_rows(vit_seq, &img_rows)?;
        let fused = mg.encode_fusion(&toks, seq)?;
        logit_blocks.push(mg.match_logits(MatchHead::ImageText, fused.cls)?);
        targets.extend(std::iter::repeat(0u8).take(with_neg_image.len()));
    }

    // Anchor images paired with their mined hard titles.
    let with_neg_title: Vec<usize> =
        (0..b).filter(|&i| mined_titles.picks[i].is_some()).collect();
    if !with_neg_title.is_empty() {
        let title_rows: Vec<usize> =
            with_neg_title.iter().map(|&i| mined_titles.picks[i].unwrap()).collect();
        let toks = titles.gather(&title_rows)?;
        let seq = mg.gather_rows(vit_seq, &with_neg_title)?;
        let fused = mg.encode_fusion(&toks, seq)?;
        logit_blocks.push(mg.match_logits(MatchHead::ImageText, fused.cls)?);
        targets.extend(std::iter::repeat(0u8).take(with_neg_title.len()));
    }

    let logits = if logit_blocks.len() == 1 {
        logit_blocks[0]
    } else {
        mg.graph().concat(&logit_blocks, 0)?
    };
    let loss = match_bce(mg.graph(), logits, &targets)?;
    Ok((loss, mined_images.skipped + mined_titles.skipped))
}

/// Query-multimodal matching loss: each query fused with its product image
/// scores the pair's relevance label; queries fused with mined hard images
/// (by query-multimodal similarity) score 0.
#[allow(clippy::too_many_arguments)]
pub fn qmm_loss<S: Scalar>(
    mg: &mut ModelGraph<S>,
    queries: &TokenMatrix,
    vit_seq: Var,
    pair_labels: &[u8],
    labels_qp: &LabelMatrix,
    sim_qm: &Tensor<S>,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize)> {
    let b = queries.batch;
    if pair_labels.len() != b {
        return Err(Error::contract(format!(
            "{} pair labels for a batch of {b}",
            pair_labels.len()
        )));
    }
    // The anchor's own column is excluded from mining: that pairing is
    // already presented explicitly with its annotated label.
    let exclusion = PositiveSet::new(
        (0..b)
            .map(|i| {
                let mut ex: Vec<usize> = (0..b).filter(|&j| labels_qp.get(i, j)).collect();
                if !ex.contains(&i) {
                    ex.push(i);
                }
                ex
            })
            .collect(),
        b,
    )?;
    let mined = mine_hard_negatives(
        sim_qm,
        &exclusion,
        cfg.hard_negative_mode,
        cfg.mining_temperature,
        rng,
    )?;

    let pos_fused = mg.encode_fusion(queries, vit_seq)?;
    let mut logit_blocks = vec![mg.match_logits(MatchHead::QueryMulti, pos_fused.cls)?];
    let mut targets: Vec<u8> = pair_labels.to_vec();

    let with_neg: Vec<usize> = (0..b).filter(|&i| mined.picks[i].is_some()).collect();
    if !with_neg.is_empty() {
        let toks = queries.gather(&with_neg)?;
        let img_rows: Vec<usize> = with_neg.iter().map(|&i| mined.picks[i].unwrap()).collect();
        let seq = mg.gather_rows(vit_seq, &img_rows)?;
        let fused = mg.encode_fusion(&toks, seq)?;
        logit_blocks.push(mg.match_logits(MatchHead::QueryMulti, fused.cls)?);
        targets.extend(std::iter::repeat(0u8).take(with_neg.len()));
    }

    let logits = if logit_blocks.len() == 1 {
        logit_blocks[0]
    } else {
        mg.graph().concat(&logit_blocks, 0)?
    };
    let loss = match_bce(mg.graph(), logits, &targets)?;
    Ok((loss, mined.skipped))
}

fn transpose2<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![S::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.at2(i, j);
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose preserves element count")
}

// ── Total loss ──────────────────────────────────────────────────────────

/// Inputs to one total-loss evaluation.
pub struct TotalLossInputs<'a, S: Scalar> {
    pub queries: &'a TokenMatrix,
    pub titles: &'a TokenMatrix,
    /// Image tensor `[batch, 3, H, W]`.
    pub images: &'a Tensor<S>,
    /// Per-example relevance of `(query_i, product_i)`; drives the
    /// query-multimodal positive targets.
    pub pair_labels: &'a [u8],
    /// Query-product positives (supervised contrast, query-side mining).
    pub labels_qp: &'a LabelMatrix,
    /// Image-title positives (image-title contrast and matching).
    pub labels_it: &'a LabelMatrix,
}

/// Scalar summary of one total-loss evaluation. Inactive terms read 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub itc: f64,
    pub itm: f64,
    pub qmm: f64,
    pub qic: f64,
    pub qtc: f64,
    pub qmc: f64,
    pub total: f64,
    /// Anchors skipped by negative mining in this batch.
    pub mining_skipped: usize,
}

/// Builds every active loss term on the graph and returns the weighted total
/// plus its scalar breakdown.
pub fn total_loss<S: Scalar>(
    mg: &mut ModelGraph<S>,
    inputs: &TotalLossInputs<S>,
    cfg: &LossConfig,
    active: &ActiveTerms,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if !active.any() {
        return Err(Error::contract("no loss term is active"));
    }
    let b = inputs.titles.batch;
    if inputs.queries.batch != b && active.needs_query() {
        return Err(Error::contract("query and title batches differ in size"));
    }
    if inputs.labels_qp.n() != b || inputs.labels_it.n() != b {
        return Err(Error::contract("label matrices do not match the batch size"));
    }

    let titles_enc = mg.encode_text(inputs.titles)?;
    let image_enc = mg.encode_image(inputs.images)?;
    let query_enc = if active.needs_query() {
        Some(mg.encode_text(inputs.queries)?)
    } else {
        None
    };
    let fused_tm = if active.needs_fusion() {
        Some(mg.encode_fusion(inputs.titles, image_enc.vit_seq)?)
    } else {
        None
    };
    let positives_qp = PositiveSet::from_labels(inputs.labels_qp);
    // A batch can lack query-side positives entirely (all annotated
    // negatives); the query-anchored contrastive terms then have no anchor
    // and sit this batch out.
    let has_query_positives = positives_qp.anchors().next().is_some();

    let mut breakdown = LossBreakdown::default();
    let mut weighted: Option<Var> = None;
    let mut add_term = |mg: &mut ModelGraph<S>, term: Var, weight: f64| -> Result<f64> {
        let value = mg.graph_ref().value(term).item()?.to_f64();
        let scaled = mg.graph().scale(term, S::from_f64(weight))?;
        weighted = Some(match weighted {
            Some(acc) => mg.graph().add(acc, scaled)?,
            None => scaled,
        });
        Ok(value)
    };

    let mut sim_it_detached: Option<Tensor<S>> = None;
    if active.itc {
        let (loss, sim) = itc_loss(
            mg.graph(),
            titles_enc.embedding,
            image_enc.embedding,
            inputs.labels_it,
            cfg.temperature,
        )?;
        sim_it_detached = Some(mg.graph_ref().value(sim).clone());
        breakdown.itc = add_term(mg, loss, cfg.weights.itc)?;
    }

    if let Some(q) = &query_enc {
        if has_query_positives {
            if active.qic {
            let loss =
                supcon_loss(mg.graph(), q.embedding, image_enc.embedding, &positives_qp, cfg.temperature)?;
                breakdown.qic = add_term(mg, loss, cfg.weights.qic)?;
            }
            if active.qtc {
                let loss = supcon_loss(
                    mg.graph(),
                    q.embedding,
                    titles_enc.embedding,
                    &positives_qp,
                    cfg.temperature,
                )?;
                breakdown.qtc = add_term(mg, loss, cfg.weights.qtc)?;
            }
            if active.qmc {
                let fused = fused_tm.as_ref().expect("fusion encoded when QMC is active");
                let loss = supcon_loss(
                    mg.graph(),
                    q.embedding,
                    fused.embedding,
                    &positives_qp,
                    cfg.temperature,
                )?;
                breakdown.qmc = add_term(mg, loss, cfg.weights.qmc)?;
            }
        }
    }

    if active.itm {
        let fused = fused_tm.as_ref().expect("fusion encoded when ITM is active");
        let sim = match &sim_it_detached {
            Some(s) => s.clone(),
            None => {
                let sim = similarity_matrix(mg.graph(), titles_enc.embedding, image_enc.embedding)?;
                mg.graph_ref().value(sim).clone()
            }
        };
        let (loss, skipped) = itm_loss(
            mg,
            inputs.titles,
            image_enc.vit_seq,
            fused.cls,
            inputs.labels_it,
            &sim,
            cfg,
            rng,
        )?;
        breakdown.mining_skipped += skipped;
        breakdown.itm = add_term(mg, loss, cfg.weights.itm)?;
    }

    if active.qmm {
        let q = query_enc.as_ref().expect("query encoded when QMM is active");
        let sim_var = match cfg.qmm_mining {
            QmmMiningSimilarity::Fused => {
                let fused = fused_tm.as_ref().expect("fusion encoded when QMM is active");
                similarity_matrix(mg.graph(), q.embedding, fused.embedding)?
            }
            QmmMiningSimilarity::Image => {
                similarity_matrix(mg.graph(), q.embedding, image_enc.embedding)?
            }
        };
        let sim = mg.graph_ref().value(sim_var).clone();
        let (loss, skipped) = qmm_loss(
            mg,
            inputs.queries,
            image_enc.vit_seq,
            inputs.pair_labels,
            inputs.labels_qp,
            &sim,
            cfg,
            rng,
        )?;
        breakdown.mining_skipped += skipped;
        breakdown.qmm = add_term(mg, loss, cfg.weights.qmm)?;
    }

    let total = weighted.ok_or_else(|| {
        Error::contract("no active loss term was computable for this batch")
    })?;
    breakdown.total = mg.graph_ref().value(total).item()?.to_f64();
    Ok((total, breakdown))
}
