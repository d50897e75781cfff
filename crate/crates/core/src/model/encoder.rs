//! Patch-based image encoder and the shared modal encoder.
//!
//! The image tower is a pre-norm transformer over linearly projected pixel
//! patches plus a CLS slot. The modal encoder is one stack of layers used
//! three ways: text runs self-attention and feed-forward sublayers over token
//! embeddings; the image path runs the same sublayers over the image tower's
//! output sequence; the fusion path additionally cross-attends from text
//! states into the image sequence. CLS states feed small projection heads
//! into one shared, unit-norm embedding space, and two-way classifier heads
//! score image-title and query-multimodal matches.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::EncoderConfig;
use super::tokenizer::{TokenMatrix, PAD_ID};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::rng;

const MASKED_SCORE: f64 = -1e9;

/// Text encoded through the modal encoder.
pub struct TextEncoding {
    /// Final-norm CLS state, `[batch, model_dim]`.
    pub cls: Var,
    /// Unit-norm projection into the shared space, `[batch, projection_dim]`.
    pub embedding: Var,
}

/// Image encoded through the image tower and the modal encoder's image path.
pub struct ImageEncoding {
    /// Image tower output sequence, `[batch, image_tokens, model_dim]`;
    /// fusion cross-attends into this.
    pub vit_seq: Var,
    /// Final-norm CLS state of the image path, `[batch, model_dim]`.
    pub cls: Var,
    /// Unit-norm projection into the shared space.
    pub embedding: Var,
}

/// Text fused with one image through the cross-attention path.
pub struct FusionEncoding {
    pub cls: Var,
    pub embedding: Var,
}

/// Binary match heads on fusion CLS states. Logit index 1 is "match".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchHead {
    /// Image-title matching.
    ImageText,
    /// Query-multimodal matching.
    QueryMulti,
}

impl MatchHead {
    fn prefix(self) -> &'static str {
        match self {
            MatchHead::ImageText => "head.itm",
            MatchHead::QueryMulti => "head.qmm",
        }
    }
}

/// Expected parameter names and shapes for a configuration, sorted by name.
pub fn expected_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let f = cfg.ffn_dim;
    let p = cfg.projection_dim;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));

    push("token.embedding".into(), vec![cfg.vocab_size, d]);
    push("text.pos".into(), vec![cfg.max_text_len, d]);
    push("vit.patch.weight".into(), vec![cfg.patch_dim(), d]);
    push("vit.patch.bias".into(), vec![d]);
    push("vit.cls".into(), vec![1, d]);
    push("vit.pos".into(), vec![cfg.image_tokens(), d]);

    let block = |prefix: String, cross: bool, push: &mut dyn FnMut(String, Vec<usize>)| {
        for ln in ["ln1", "ln2"] {
            push(format!("{prefix}.{ln}.gamma"), vec![d]);
            push(format!("{prefix}.{ln}.beta"), vec![d]);
        }
        for proj in ["q", "k", "v", "out"] {
            push(format!("{prefix}.attn.{proj}.weight"), vec![d, d]);
            push(format!("{prefix}.attn.{proj}.bias"), vec![d]);
        }
        if cross {
            push(format!("{prefix}.ln_cross.gamma"), vec![d]);
            push(format!("{prefix}.ln_cross.beta"), vec![d]);
            for proj in ["q", "k", "v", "out"] {
                push(format!("{prefix}.cross.{proj}.weight"), vec![d, d]);
                push(format!("{prefix}.cross.{proj}.bias"), vec![d]);
            }
        }
        push(format!("{prefix}.ffn.fc1.weight"), vec![d, f]);
        push(format!("{prefix}.ffn.fc1.bias"), vec![f]);
        push(format!("{prefix}.ffn.fc2.weight"), vec![f, d]);
        push(format!("{prefix}.ffn.fc2.bias"), vec![d]);
    };

    for i in 0..cfg.vit_layers {
        block(format!("vit.layer{i}"), false, &mut push);
    }
    push("vit.final.gamma".into(), vec![d]);
    push("vit.final.beta".into(), vec![d]);

    for i in 0..cfg.encoder_layers {
        block(format!("encoder.layer{i}"), true, &mut push);
    }
    push("encoder.final.gamma".into(), vec![d]);
    push("encoder.final.beta".into(), vec![d]);

    for head in ["text", "image", "fusion"] {
        push(format!("proj.{head}.weight"), vec![d, p]);
        push(format!("proj.{head}.bias"), vec![p]);
    }
    for head in ["itm", "qmm"] {
        push(format!("head.{head}.weight"), vec![d, 2]);
        push(format!("head.{head}.bias"), vec![2]);
    }

    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Fresh parameters: truncated normal (std 0.02) for weights and embeddings,
/// ones for norm scales, zeros for biases and norm shifts. Draw order is the
/// sorted name order, so a seed fully determines the result.
pub fn init_params<S: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet<S>> {
    cfg.validate()?;
    if cfg.vocab_size == 0 {
        return Err(Error::config("encoder.vocab_size", "must be resolved before init"));
    }
    let mut rng = rng::stream(seed, "init");
    let mut params = ParamSet::new();
    for (name, shape) in expected_shapes(cfg) {
        let tensor = if name.ends_with(".gamma") {
            Tensor::filled(&shape, S::ONE)
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            Tensor::truncated_normal(&shape, 0.02, &mut rng)
        };
        params.insert(&name, tensor)?;
    }
    Ok(params)
}

/// Checks that a parameter set matches the configuration exactly.
pub fn validate_params<S: Scalar>(cfg: &EncoderConfig, params: &ParamSet<S>) -> Result<()> {
    let expected = expected_shapes(cfg);
    if params.len() != expected.len() {
        return Err(Error::contract(format!(
            "parameter count mismatch: checkpoint has {}, configuration expects {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .map_err(|_| Error::contract(format!("checkpoint is missing parameter {name:?}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::contract(format!(
                "parameter {name:?} has shape {:?}, configuration expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Extracts non-overlapping square patches from `[batch, 3, H, W]` images in
/// raster order; each output row is one patch flattened channel-major.
pub fn patchify<S: Scalar>(cfg: &EncoderConfig, images: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = (cfg.image_size, cfg.image_size);
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
        return Err(Error::shape(
            "patchify",
            format!("expected [batch, 3, {h}, {w}], got {s:?}"),
        ));
    }
    let batch = s[0];
    let ps = cfg.patch_size;
    let per_side = cfg.patches_per_side();
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut data = Vec::with_capacity(batch * cfg.num_patches() * pd);
    for b in 0..batch {
        let img = &src[b * 3 * h * w..(b + 1) * 3 * h * w];
        for pr in 0..per_side {
            for pc in 0..per_side {
                for c in 0..3 {
                    for py in 0..ps {
                        let row = pr * ps + py;
                        let base = c * h * w + row * w + pc * ps;
                        data.extend_from_slice(&img[base..base + ps]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * cfg.num_patches(), pd], data)
}

/// One forward-pass context: a graph plus the registered parameter leaves.
///
/// Construct one per training step or evaluation batch, call the encode
/// methods, then read values or run backward through [`ModelGraph::graph`].
pub struct ModelGraph<'c, S: Scalar> {
    cfg: &'c EncoderConfig,
    g: Graph<S>,
    vars: HashMap<String, Var>,
    attention_probs: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'c, S: Scalar> ModelGraph<'c, S> {
    /// Registers every parameter as a leaf; `trainable` controls whether
    /// gradients flow into them.
    pub fn new(cfg: &'c EncoderConfig, params: &ParamSet<S>, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        validate_params(cfg, params)?;
        let mut g = Graph::new();
        let mut vars = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let var = if trainable {
                g.param(name, tensor.clone())?
            } else {
                g.constant(tensor.clone())?
            };
            vars.insert(name.clone(), var);
        }
        Ok(ModelGraph { cfg, g, vars, attention_probs: Vec::new(), dropout: None })
    }

    /// Enables inverted dropout for this context (training only).
    pub fn set_dropout(&mut self, probability: f64, rng: ChaCha8Rng) {
        if probability > 0.0 {
            self.dropout = Some((probability, rng));
        }
    }

    pub fn graph(&mut self) -> &mut Graph<S> {
        &mut self.g
    }

    pub fn graph_ref(&self) -> &Graph<S> {
        &self.g
    }

    pub fn config(&self) -> &EncoderConfig {
        self.cfg
    }

    /// Attention probability nodes recorded so far, in call order.
    pub fn attention_probs(&self) -> &[Var] {
        &self.attention_probs
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("no parameter leaf named {name:?}")))
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta)
    }

    /// Repeats a `[rows, cols]` leaf across a batch axis.
    fn tile(&mut self, v: Var, rows: usize, cols: usize, batch: usize) -> Result<Var> {
        let flat = self.g.reshape(v, &[1, rows * cols])?;
        let ones = self.g.constant(Tensor::filled(&[batch, 1], S::ONE))?;
        let tiled = self.g.matmul(ones, flat)?;
        self.g.reshape(tiled, &[batch, rows, cols])
    }

    fn maybe_dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = &mut self.dropout else {
            return Ok(x);
        };
        let keep = 1.0 - *p;
        let scale = S::from_f64(1.0 / keep);
        let shape = self.g.value(x).shape().to_vec();
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { S::ZERO })
            .collect();
        let mask = self.g.constant(Tensor::new(shape, data)?)?;
        self.g.mul(x, mask)
    }

    /// Additive key mask for a padded batch: `[batch, heads, len, len]` with
    /// a large negative at padded key positions. `None` when nothing is
    /// padded.
    fn self_mask(&mut self, tokens: &TokenMatrix) -> Result<Option<Var>> {
        if tokens.lengths.iter().all(|&l| l == tokens.len) {
            return Ok(None);
        }
        let (b, l, h) = (tokens.batch, tokens.len, self.cfg.num_heads);
        let neg = S::from_f64(MASKED_SCORE);
        let mut data = Vec::with_capacity(b * h * l * l);
        for &length in &tokens.lengths {
            let row: Vec<S> = (0..l).map(|k| if k < length { S::ZERO } else { neg }).collect();
            for _ in 0..h * l {
                data.extend_from_slice(&row);
            }
        }
        let mask = self.g.constant(Tensor::new(vec![b, h, l, l], data)?)?;
        Ok(Some(mask))
    }

    /// Multi-head attention from `q_src` `[b, lq, d]` over `kv_src`
    /// `[b, lk, d]` using the four projections under `prefix`.
    fn attention(&mut self, q_src: Var, kv_src: Var, prefix: &str, mask: Option<Var>) -> Result<Var> {
        let (b, lq, d) = {
            let s = self.g.value(q_src).shape();
            (s[0], s[1], s[2])
        };
        let lk = self.g.value(kv_src).shape()[1];
        let (h, dh) = (self.cfg.num_heads, self.cfg.head_dim());

        let split = |mg: &mut Self, src: Var, l: usize, proj: &str| -> Result<Var> {
            let flat = mg.g.reshape(src, &[b * l, d])?;
            let projected = mg.linear(flat, &format!("{prefix}.{proj}"))?;
            let headed = mg.g.reshape(projected, &[b, l, h, dh])?;
            mg.g.transpose(headed, 1, 2)
        };
        let q = split(self, q_src, lq, "q")?;
        let k = split(self, kv_src, lk, "k")?;
        let v = split(self, kv_src, lk, "v")?;

        let kt = self.g.transpose(k, 2, 3)?;
        let scores = self.g.matmul(q, kt)?;
        let scaled = self.g.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()))?;
        let masked = match mask {
            Some(m) => self.g.add(scaled, m)?,
            None => scaled,
        };
        let probs = self.g.softmax(masked)?;
        self.attention_probs.push(probs);

        let ctx = self.g.matmul(probs, v)?;
        let merged = self.g.transpose(ctx, 1, 2)?;
        let flat = self.g.reshape(merged, &[b * lq, d])?;
        let out = self.linear(flat, &format!("{prefix}.out"))?;
        let out = self.maybe_dropout(out)?;
        self.g.reshape(out, &[b, lq, d])
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (b, l, d) = {
            let s = self.g.value(x).shape();
            (s[0], s[1], s[2])
        };
        let flat = self.g.reshape(x, &[b * l, d])?;
        let hidden = self.linear(flat, &format!("{prefix}.fc1"))?;
        let act = self.g.gelu(hidden)?;
        let out = self.linear(act, &format!("{prefix}.fc2"))?;
        let out = self.maybe_dropout(out)?;
        self.g.reshape(out, &[b, l, d])
    }

    /// Image tower: patch projection, CLS, learned positions, pre-norm
    /// blocks, final norm. Returns the full sequence `[b, image_tokens, d]`.
    pub fn vit_forward(&mut self, images: &Tensor<S>) -> Result<Var> {
        let patches = patchify(self.cfg, images)?;
        let batch = images.shape()[0];
        let (t, d) = (self.cfg.image_tokens(), self.cfg.model_dim);

        let flat = self.g.constant(patches)?;
        let projected = self.linear(flat, "vit.patch")?;
        let x = self.g.reshape(projected, &[batch, t - 1, d])?;

        let cls_leaf = self.p("vit.cls")?;
        let cls = self.tile(cls_leaf, 1, d, batch)?;
        let with_cls = self.g.concat(&[cls, x], 1)?;

        let pos_leaf = self.p("vit.pos")?;
        let pos = self.tile(pos_leaf, t, d, batch)?;
        let mut x = self.g.add(with_cls, pos)?;

        for i in 0..self.cfg.vit_layers {
            let prefix = format!("vit.layer{i}");
            let a = self.norm(x, &format!("{prefix}.ln1"))?;
            let a = self.attention(a, a, &format!("{prefix}.attn"), None)?;
            x = self.g.add(x, a)?;
            let f = self.norm(x, &format!("{prefix}.ln2"))?;
            let f = self.ffn(f, &format!("{prefix}.ffn"))?;
            x = self.g.add(x, f)?;
        }
        self.norm(x, "vit.final")
    }

    /// Token embeddings plus positions, `[b, len, d]`.
    fn text_embed(&mut self, tokens: &TokenMatrix) -> Result<Var> {
        if tokens.len > self.cfg.max_text_len {
            return Err(Error::contract(format!(
                "token batch length {} exceeds max_text_len {}",
                tokens.len, self.cfg.max_text_len
            )));
        }
        let table = self.p("token.embedding")?;
        let emb = self.g.embedding(table, &tokens.ids, &[tokens.batch, tokens.len])?;
        let pos_leaf = self.p("text.pos")?;
        let pos_slice = self.g.slice(pos_leaf, 0, 0, tokens.len)?;
        let pos = self.tile(pos_slice, tokens.len, self.cfg.model_dim, tokens.batch)?;
        self.g.add(emb, pos)
    }

    /// Runs the modal encoder over a state sequence. `tokens` supplies the
    /// pad mask for text inputs; `cross_into` enables the fusion path.
    fn encoder_pass(
        &mut self,
        mut x: Var,
        tokens: Option<&TokenMatrix>,
        cross_into: Option<Var>,
    ) -> Result<Var> {
        let mask = match tokens {
            Some(t) => self.self_mask(t)?,
            None => None,
        };
        for i in 0..self.cfg.encoder_layers {
            let prefix = format!("encoder.layer{i}");
            let a = self.norm(x, &format!("{prefix}.ln1"))?;
            let a = self.attention(a, a, &format!("{prefix}.attn"), mask)?;
            x = self.g.add(x, a)?;
            if let Some(image_seq) = cross_into {
                let c = self.norm(x, &format!("{prefix}.ln_cross"))?;
                let c = self.attention(c, image_seq, &format!("{prefix}.cross"), None)?;
                x = self.g.add(x, c)?;
            }
            let f = self.norm(x, &format!("{prefix}.ln2"))?;
            let f = self.ffn(f, &format!("{prefix}.ffn"))?;
            x = self.g.add(x, f)?;
        }
        self.norm(x, "encoder.final")
    }

    /// CLS state of a final sequence, `[b, d]`.
    fn pool_cls(&mut self, x: Var) -> Result<Var> {
        let (b, d) = {
            let s = self.g.value(x).shape();
            (s[0], s[2])
        };
        let cls = self.g.slice(x, 1, 0, 1)?;
        self.g.reshape(cls, &[b, d])
    }

    /// Projects a CLS state into the shared space and normalizes it.
    fn project(&mut self, cls: Var, head: &str) -> Result<Var> {
        let projected = self.linear(cls, &format!("proj.{head}"))?;
        self.g.l2_normalize(projected)
    }

    /// Text path: queries and titles share it (and the text projection).
    pub fn encode_text(&mut self, tokens: &TokenMatrix) -> Result<TextEncoding> {
        let x = self.text_embed(tokens)?;
        let seq = self.encoder_pass(x, Some(tokens), None)?;
        let cls = self.pool_cls(seq)?;
        let embedding = self.project(cls, "text")?;
        Ok(TextEncoding { cls, embedding })
    }

    /// Image path: image tower then the modal encoder without cross-attention.
    pub fn encode_image(&mut self, images: &Tensor<S>) -> Result<ImageEncoding> {
        let vit_seq = self.vit_forward(images)?;
        let seq = self.encoder_pass(vit_seq, None, None)?;
        let cls = self.pool_cls(seq)?;
        let embedding = self.project(cls, "image")?;
        Ok(ImageEncoding { vit_seq, cls, embedding })
    }

    /// Fusion path over an already-computed image sequence, so mined
    /// negative pairings reuse the per-image tower work.
    pub fn encode_fusion(&mut self, tokens: &TokenMatrix, vit_seq: Var) -> Result<FusionEncoding> {
        let b = self.g.value(vit_seq).shape()[0];
        if b != tokens.batch {
            return Err(Error::contract(format!(
                "fusion batch mismatch: {} texts vs {b} image sequences",
                tokens.batch
            )));
        }
        let x = self.text_embed(tokens)?;
        let seq = self.encoder_pass(x, Some(tokens), Some(vit_seq))?;
        let cls = self.pool_cls(seq)?;
        let embedding = self.project(cls, "fusion")?;
        Ok(FusionEncoding { cls, embedding })
    }

    /// Rows of `vit_seq` rearranged per `indices`, for negative pairings.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let b = self.g.value(x).shape()[0];
        let mut parts = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= b {
                return Err(Error::contract(format!("gather index {i} out of range for batch {b}")));
            }
            parts.push(self.g.slice(x, 0, i, 1)?);
        }
        self.g.concat(&parts, 0)
    }

    /// Two-way match logits `[b, 2]` from a fusion CLS state.
    pub fn match_logits(&mut self, head: MatchHead, cls: Var) -> Result<Var> {
        self.linear(cls, head.prefix())
    }
}

/// Count of PAD-masked key positions a token matrix implies, used in tests.
pub fn padded_positions(tokens: &TokenMatrix) -> usize {
    tokens.ids.iter().filter(|&&id| id == PAD_ID).count()
}
