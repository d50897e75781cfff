//! Corpus generation: a seeded product pool with rendered images, then three
//! training stages plus a held-out labeled split over disjoint products.
//! Stage files are JSONL, one record per line, deterministic byte-for-byte
//! for a fixed seed.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::catalog::{
    compose_query, lexicon, satisfies, Category, ProductSpec, QueryDraft, MATERIALS,
    MONITOR_REFRESH, PHONE_STORAGE, STUFFING,
};
use crate::corpus::render::{render_image, save_image, ImageFormat};
use crate::error::{Error, Result};
use crate::model::Vocab;
use crate::rng;

/// Corpus stage a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Title-image pairs, no queries.
    Pairs,
    /// Click-style positive triplets, no labels.
    Clicks,
    /// Annotated triplets with 0/1 relevance labels.
    Labeled,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pairs => "pairs",
            Stage::Clicks => "clicks",
            Stage::Labeled => "labeled",
        }
    }
}

/// Title-noise markers carried per record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseFlags {
    /// Irrelevant high-frequency tokens appended to the title.
    pub stuffed: bool,
    /// One title attribute replaced by a wrong value.
    pub misleading: bool,
}

/// One corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub query: String,
    pub title: String,
    /// Relative to the corpus directory.
    pub image_path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<u8>,
    pub stage: Stage,
    pub product_id: String,
    pub query_id: String,
    pub noise_flags: NoiseFlags,
}

/// Generation knobs; mirrors the `gen-data` CLI flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Records per training stage.
    pub counts: [usize; 3],
    /// Records in the held-out labeled split.
    pub eval_count: usize,
    /// Distinct products reserved for the held-out split.
    pub eval_products: usize,
    /// Fraction of titles that get stuffing tokens appended.
    pub noise_rate: f64,
    /// Fraction of titles with one attribute swapped for a wrong value.
    pub misleading_rate: f64,
    pub image_size: usize,
    pub categories: Vec<Category>,
    pub image_format: ImageFormat,
    /// Per-pixel noise amplitude in unit range.
    pub noise_amplitude: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            counts: [5000, 2000, 1000],
            eval_count: 400,
            eval_products: 120,
            noise_rate: 0.15,
            misleading_rate: 0.0,
            image_size: 16,
            categories: Category::ALL.to_vec(),
            image_format: ImageFormat::Png,
            noise_amplitude: 0.05,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counts.iter().any(|&c| c == 0) {
            return Err(Error::config("corpus.counts", "every stage needs at least 1 record"));
        }
        for (path, count) in
            [("corpus.counts[2]", self.counts[2]), ("corpus.eval_count", self.eval_count)]
        {
            if count % 2 != 0 {
                return Err(Error::config(
                    path,
                    "labeled splits hold positives and negatives 1:1, so the count must be even",
                ));
            }
        }
        for (path, rate) in [
            ("corpus.noise_rate", self.noise_rate),
            ("corpus.misleading_rate", self.misleading_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(path, "must lie in [0, 1]"));
            }
        }
        if self.noise_amplitude < 0.0 || self.noise_amplitude > 0.5 {
            return Err(Error::config("corpus.noise_amplitude", "must lie in [0, 0.5]"));
        }
        if self.image_size < 8 {
            return Err(Error::config("corpus.image_size", "must be at least 8"));
        }
        if self.categories.is_empty() {
            return Err(Error::config("corpus.categories", "need at least one category"));
        }
        if self.eval_products < 2 {
            return Err(Error::config("corpus.eval_products", "need at least 2"));
        }
        Ok(())
    }
}

/// What generation produced, for logs and tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train_products: usize,
    pub eval_products: usize,
    pub records: [usize; 3],
    pub eval_records: usize,
    /// Fraction of click-stage records whose query string also appears in
    /// another record of that stage.
    pub duplicate_query_density: f64,
}

/// File names inside a corpus directory.
pub mod files {
    pub const VOCAB: &str = "vocab.json";
    pub const PRODUCTS: &str = "products.jsonl";
    pub const STAGE: [&str; 3] = ["stage1.jsonl", "stage2.jsonl", "stage3.jsonl"];
    pub const EVAL: &str = "eval.jsonl";
    pub const IMAGE_DIR: &str = "images";
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the product catalog back from a corpus directory.
pub fn load_products(path: &Path) -> Result<Vec<ProductSpec>> {
    if !path.exists() {
        return Err(Error::MissingInput { path: path.to_path_buf() });
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let spec: ProductSpec = serde_json::from_str(line).map_err(|e| {
            Error::adapter(format!("{}:{}: bad product row: {e}", path.display(), i + 1))
        })?;
        out.push(spec);
    }
    Ok(out)
}

/// Title text plus noise flags for one product.
fn compose_title(
    spec: &ProductSpec,
    noise_rate: f64,
    misleading_rate: f64,
    rng: &mut ChaCha8Rng,
) -> (String, NoiseFlags) {
    let mut flags = NoiseFlags::default();
    let mut spec = spec.clone();
    if rng.gen::<f64>() < misleading_rate {
        flags.misleading = true;
        match spec.category {
            Category::Dress => {
                let current = spec.material.clone().expect("dress has material");
                let other: Vec<&str> =
                    MATERIALS.iter().copied().filter(|m| *m != current).collect();
                spec.material = Some(other[rng.gen_range(0..other.len())].to_string());
            }
            Category::Monitor => {
                let current = spec.params[0].clone();
                let other: Vec<&str> =
                    MONITOR_REFRESH.iter().copied().filter(|p| *p != current).collect();
                spec.params[0] = other[rng.gen_range(0..other.len())].to_string();
            }
            Category::Phone => {
                let current = spec.params[0].clone();
                let other: Vec<&str> =
                    PHONE_STORAGE.iter().copied().filter(|p| *p != current).collect();
                spec.params[0] = other[rng.gen_range(0..other.len())].to_string();
            }
        }
    }
    let mut tokens: Vec<String> = spec.title_tokens().iter().map(|s| s.to_string()).collect();
    if rng.gen::<f64>() < noise_rate {
        flags.stuffed = true;
        let extra = 2 + rng.gen_range(0..2);
        for _ in 0..extra {
            tokens.push(STUFFING[rng.gen_range(0..STUFFING.len())].to_string());
        }
    }
    (tokens.join(" "), flags)
}

/// Interns query strings to stable ids in first-appearance order.
struct QueryIds {
    map: HashMap<String, String>,
    next: usize,
}

impl QueryIds {
    fn new() -> Self {
        QueryIds { map: HashMap::new(), next: 0 }
    }

    fn id(&mut self, query: &str) -> String {
        if let Some(id) = self.map.get(query) {
            return id.clone();
        }
        let id = format!("q{:04}", self.next);
        self.next += 1;
        self.map.insert(query.to_string(), id.clone());
        id
    }
}

/// Draws a product that fails the query: different category, or same
/// category with at least one queried attribute off.
fn find_negative<'a>(
    query: &QueryDraft,
    target: &ProductSpec,
    pool: &'a [ProductSpec],
    rng: &mut ChaCha8Rng,
) -> Option<&'a ProductSpec> {
    for _ in 0..500 {
        let candidate = &pool[rng.gen_range(0..pool.len())];
        if candidate.product_id != target.product_id && !satisfies(query, target, candidate) {
            return Some(candidate);
        }
    }
    None
}

/// Positive/negative labeled pairs over a product pool, shuffled.
fn labeled_records(
    count: usize,
    pool: &[ProductSpec],
    image_paths: &HashMap<String, String>,
    cfg: &CorpusConfig,
    ids: &mut QueryIds,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let target = &pool[rng.gen_range(0..pool.len())];
        let mut found = None;
        for _ in 0..100 {
            let q = compose_query(target, rng);
            if let Some(n) = find_negative(&q, target, pool, rng) {
                found = Some((q, n));
                break;
            }
        }
        let (query, negative) = found.ok_or_else(|| {
            Error::contract(
                "product pool is too uniform to draw a hard negative; enlarge it or add categories",
            )
        })?;
        let text = query.text();
        let qid = ids.id(&text);
        for (spec, label) in [(target, 1u8), (negative, 0u8)] {
            let (title, flags) = compose_title(spec, cfg.noise_rate, cfg.misleading_rate, rng);
            out.push(DatasetRecord {
                query: text.clone(),
                title,
                image_path: image_paths[&spec.product_id].clone(),
                label: Some(label),
                stage: Stage::Labeled,
                product_id: spec.product_id.clone(),
                query_id: qid.clone(),
                noise_flags: flags,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Generates the complete corpus under `out_dir`.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let image_dir = out_dir.join(files::IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    // Product pools: stage 1 uses each training product exactly once, so the
    // pool size equals the stage-1 count; held-out products are extra.
    let n_train = cfg.counts[0];
    let mut spec_rng = rng::stream(cfg.seed, "corpus-products");
    let mut all_products = Vec::with_capacity(n_train + cfg.eval_products);
    for i in 0..n_train + cfg.eval_products {
        let category = cfg.categories[i % cfg.categories.len()];
        all_products.push(ProductSpec::sample(i, category, &mut spec_rng));
    }
    let (train_pool, eval_pool) = all_products.split_at(n_train);

    let mut image_paths: HashMap<String, String> = HashMap::new();
    for (i, spec) in all_products.iter().enumerate() {
        let rel = format!(
            "{}/{}.{}",
            files::IMAGE_DIR,
            spec.product_id,
            cfg.image_format.extension()
        );
        let mut px_rng = rng::substream(cfg.seed, "corpus-pixels", i as u64);
        let rgb = render_image(spec, cfg.image_size, cfg.noise_amplitude, &mut px_rng);
        save_image(&out_dir.join(&rel), &rgb, cfg.image_size, cfg.image_format)?;
        image_paths.insert(spec.product_id.clone(), rel);
    }

    Vocab::from_words(lexicon()).save(&out_dir.join(files::VOCAB))?;
    write_jsonl(&out_dir.join(files::PRODUCTS), &all_products)?;

    let mut ids = QueryIds::new();

    // Stage 1: every training product once, no query.
    let mut s1_rng = rng::stream(cfg.seed, "corpus-stage1");
    let stage1: Vec<DatasetRecord> = train_pool
        .iter()
        .map(|spec| {
            let (title, flags) =
                compose_title(spec, cfg.noise_rate, cfg.misleading_rate, &mut s1_rng);
            DatasetRecord {
                query: String::new(),
                title,
                image_path: image_paths[&spec.product_id].clone(),
                label: None,
                stage: Stage::Pairs,
                product_id: spec.product_id.clone(),
                query_id: String::new(),
                noise_flags: flags,
            }
        })
        .collect();
    write_jsonl(&out_dir.join(files::STAGE[0]), &stage1)?;

    // Stage 2: click-style positives drawn with replacement.
    let mut s2_rng = rng::stream(cfg.seed, "corpus-stage2");
    let stage2: Vec<DatasetRecord> = (0..cfg.counts[1])
        .map(|_| {
            let spec = &train_pool[s2_rng.gen_range(0..train_pool.len())];
            let query = compose_query(spec, &mut s2_rng).text();
            let (title, flags) =
                compose_title(spec, cfg.noise_rate, cfg.misleading_rate, &mut s2_rng);
            DatasetRecord {
                query: query.clone(),
                title,
                image_path: image_paths[&spec.product_id].clone(),
                label: None,
                stage: Stage::Clicks,
                product_id: spec.product_id.clone(),
                query_id: ids.id(&query),
                noise_flags: flags,
            }
        })
        .collect();
    write_jsonl(&out_dir.join(files::STAGE[1]), &stage2)?;

    // Stage 3 and the held-out split: labeled pairs, disjoint pools.
    let mut s3_rng = rng::stream(cfg.seed, "corpus-stage3");
    let stage3 =
        labeled_records(cfg.counts[2], train_pool, &image_paths, cfg, &mut ids, &mut s3_rng)?;
    write_jsonl(&out_dir.join(files::STAGE[2]), &stage3)?;

    let mut eval_rng = rng::stream(cfg.seed, "corpus-eval");
    let eval =
        labeled_records(cfg.eval_count, eval_pool, &image_paths, cfg, &mut ids, &mut eval_rng)?;
    write_jsonl(&out_dir.join(files::EVAL), &eval)?;

    let unique: std::collections::HashSet<&str> =
        stage2.iter().map(|r| r.query.as_str()).collect();
    let duplicate_query_density = 1.0 - unique.len() as f64 / stage2.len() as f64;

    Ok(CorpusSummary {
        train_products: n_train,
        eval_products: cfg.eval_products,
        records: [stage1.len(), stage2.len(), stage3.len()],
        eval_records: eval.len(),
        duplicate_query_density,
    })
}
