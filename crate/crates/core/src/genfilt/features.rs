//! Feature generation: structured title features and short image captions
//! for every product, produced by the built-in synthetic generator or an
//! external adapter speaking line-delimited JSON, and cached to disk.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::corpus::catalog::{BRANDS, COLORS, MATERIALS, STUFFING};
use crate::corpus::render::{classify_image, load_image};
use crate::corpus::Dataset;
use crate::error::{Error, Result};

/// Cache file name inside an output directory.
pub const FEATURES_FILE: &str = "genfilt.features.jsonl";

/// Prompt template handed to a title-side generator. The wording is frozen
/// verbatim, `Firthly` typo included; adapters may key on the exact text.
pub const TITLE_PROMPT_TEMPLATE: &str = "As a product search engine, please understand the \
    input of the product title, extract the core word, material, brand, color, and model \
    parameters from the title and provide structured output.\nThe input title: {title}\nTo \
    solve the problem, please execute the following steps: Firstly, understand the input \
    product title and extract the vocabulary that describes the main product as the core \
    word. Secondly, analyze the main material of the product and replace it with \"NULL\" if \
    none is specified. Thirdly, analyze the brand of the product and replace it with \
    \"NULL\" if none is specified. Firthly, analyze the color of the product and replace it \
    with \"NULL\" if not specified. Finally, output the structured parsing results.";

/// Prompt handed to an image-side generator.
pub const IMAGE_PROMPT: &str = "Briefly summarize the items in the picture in a few words.";

/// The title prompt with the placeholder substituted.
pub fn title_prompt(title: &str) -> String {
    TITLE_PROMPT_TEMPLATE.replace("{title}", title)
}

/// Absent attributes serialize as the literal string `NULL`, matching the
/// structured output the prompts ask for; an empty string is never valid.
mod null_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<String>, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(value.as_deref().unwrap_or("NULL"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<String>, D::Error> {
        let text = String::deserialize(de)?;
        Ok(if text == "NULL" { None } else { Some(text) })
    }
}

/// Structured extraction from one product title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TitleFeatures {
    /// Vocabulary describing the main product; never empty on success.
    pub core: String,
    #[serde(with = "null_string")]
    pub material: Option<String>,
    #[serde(with = "null_string")]
    pub brand: Option<String>,
    #[serde(with = "null_string")]
    pub color: Option<String>,
}

impl TitleFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.core.trim().is_empty() {
            return Err(Error::adapter("title features carry an empty core word"));
        }
        for (name, field) in
            [("material", &self.material), ("brand", &self.brand), ("color", &self.color)]
        {
            if matches!(field.as_deref(), Some("")) {
                return Err(Error::adapter(format!(
                    "title feature {name} is an empty string; absent values must be NULL"
                )));
            }
        }
        Ok(())
    }

    /// All present tokens as one string, for similarity scoring.
    pub fn text(&self) -> String {
        let mut parts = vec![self.core.as_str()];
        for field in [&self.material, &self.brand, &self.color] {
            if let Some(v) = field {
                parts.push(v);
            }
        }
        parts.join(" ")
    }
}

/// Generated features for one product, keyed by its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedFeatures {
    pub id: String,
    pub title_features: TitleFeatures,
    pub image_caption: String,
}

impl GeneratedFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::adapter("generated features carry an empty id"));
        }
        if self.image_caption.trim().is_empty() {
            return Err(Error::adapter(format!("{}: empty image caption", self.id)));
        }
        self.title_features.validate()
    }
}

/// What a generator is asked to process: one title or one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Title,
    Image,
}

/// One line of the adapter request stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRequest {
    pub id: String,
    pub kind: RequestKind,
    /// Title text, or the path of the image file.
    pub payload: String,
    pub prompt: String,
}

/// One line of the adapter response stream. `features` answers a title
/// request, `caption` an image request; any status other than `ok` marks
/// the request failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<TitleFeatures>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub status: String,
}

impl FeatureResponse {
    fn ok(id: &str) -> Self {
        FeatureResponse { id: id.to_string(), features: None, caption: None, status: "ok".into() }
    }

    fn failed(id: &str, why: String) -> Self {
        FeatureResponse { id: id.to_string(), features: None, caption: None, status: why }
    }
}

/// A feature source: the synthetic extractor or an external adapter.
/// Returns one response per request; individual failures are reported in
/// the response status, not as errors.
pub trait FeatureGenerator {
    fn generate(&mut self, requests: &[FeatureRequest]) -> Result<Vec<FeatureResponse>>;
}

/// How the generator is provided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorSpec {
    /// Built-in extraction from the corpus lexicon and renderer.
    Synthetic,
    /// Spawn a command; requests go to its stdin, responses come from its
    /// stdout, one JSON object per line.
    Subprocess { command: Vec<String> },
    /// Write all requests to one file and read responses from another,
    /// for generators that run out of band.
    FilePair { requests: PathBuf, responses: PathBuf },
}

/// Builds the configured generator. The image size is what the synthetic
/// captioner decodes corpus images at.
pub fn build_generator(spec: &GeneratorSpec, image_size: usize) -> Box<dyn FeatureGenerator> {
    match spec {
        GeneratorSpec::Synthetic => Box::new(SyntheticGenerator { image_size }),
        GeneratorSpec::Subprocess { command } => {
            Box::new(SubprocessGenerator { command: command.clone() })
        }
        GeneratorSpec::FilePair { requests, responses } => Box::new(FilePairGenerator {
            requests: requests.clone(),
            responses: responses.clone(),
        }),
    }
}

// ── Synthetic generator ─────────────────────────────────────────────────

/// Extracts features directly: titles are matched against the attribute
/// inventories, captions come from classifying the rendered pixels.
pub struct SyntheticGenerator {
    pub image_size: usize,
}

/// Splits a title into the extracted attribute slots and the remaining
/// core vocabulary. Stuffing filler is dropped; a second value for an
/// already-filled slot is dropped too.
fn parse_title(title: &str) -> Result<TitleFeatures> {
    let mut features =
        TitleFeatures { core: String::new(), material: None, brand: None, color: None };
    let mut core: Vec<&str> = Vec::new();
    for token in title.split_whitespace() {
        if MATERIALS.contains(&token) {
            features.material.get_or_insert_with(|| token.to_string());
        } else if BRANDS.contains(&token) {
            features.brand.get_or_insert_with(|| token.to_string());
        } else if COLORS.iter().any(|(name, _)| *name == token) {
            features.color.get_or_insert_with(|| token.to_string());
        } else if !STUFFING.contains(&token) {
            core.push(token);
        }
    }
    if core.is_empty() {
        return Err(Error::adapter(format!("title {title:?} has no core vocabulary")));
    }
    features.core = core.join(" ");
    Ok(features)
}

impl FeatureGenerator for SyntheticGenerator {
    fn generate(&mut self, requests: &[FeatureRequest]) -> Result<Vec<FeatureResponse>> {
        let mut out = Vec::with_capacity(requests.len());
        for request in requests {
            out.push(match request.kind {
                RequestKind::Title => match parse_title(&request.payload) {
                    Ok(features) => FeatureResponse {
                        features: Some(features),
                        ..FeatureResponse::ok(&request.id)
                    },
                    Err(e) => FeatureResponse::failed(&request.id, e.to_string()),
                },
                RequestKind::Image => {
                    let caption = load_image(Path::new(&request.payload), self.image_size)
                        .and_then(|rgb| classify_image(&rgb, self.image_size))
                        .map(|reading| reading.caption());
                    match caption {
                        Ok(caption) => FeatureResponse {
                            caption: Some(caption),
                            ..FeatureResponse::ok(&request.id)
                        },
                        Err(e) => FeatureResponse::failed(&request.id, e.to_string()),
                    }
                }
            });
        }
        Ok(out)
    }
}

// ── External adapters ───────────────────────────────────────────────────

fn parse_response_lines(source: &str, text: &str) -> Result<Vec<FeatureResponse>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let response: FeatureResponse = serde_json::from_str(line).map_err(|e| {
            Error::adapter(format!("{source} line {}: {e}", lineno + 1))
        })?;
        out.push(response);
    }
    Ok(out)
}

/// Streams requests through a spawned command.
pub struct SubprocessGenerator {
    pub command: Vec<String>,
}

impl FeatureGenerator for SubprocessGenerator {
    fn generate(&mut self, requests: &[FeatureRequest]) -> Result<Vec<FeatureResponse>> {
        let program = self
            .command
            .first()
            .ok_or_else(|| Error::adapter("subprocess generator needs a command"))?;
        let mut child = Command::new(program)
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::adapter(format!("spawning {program}: {e}")))?;

        let mut request_text = String::new();
        for request in requests {
            request_text.push_str(&serde_json::to_string(request).expect("request serializes"));
            request_text.push('\n');
        }
        // Writing happens on a helper thread so a child that answers as it
        // reads cannot deadlock against a full stdin pipe.
        let mut stdin = child.stdin.take().expect("stdin was piped");
        let writer = std::thread::spawn(move || {
            stdin.write_all(request_text.as_bytes()).and_then(|()| stdin.flush())
        });
        let mut response_text = String::new();
        let mut stdout = child.stdout.take().expect("stdout was piped");
        std::io::Read::read_to_string(&mut stdout, &mut response_text)
            .map_err(|e| Error::adapter(format!("reading from {program}: {e}")))?;
        writer
            .join()
            .map_err(|_| Error::adapter("request writer panicked"))?
            .map_err(|e| Error::adapter(format!("writing to {program}: {e}")))?;
        let status = child
            .wait()
            .map_err(|e| Error::adapter(format!("waiting for {program}: {e}")))?;
        if !status.success() {
            return Err(Error::adapter(format!("{program} exited with {status}")));
        }
        parse_response_lines(program, &response_text)
    }
}

/// Writes requests to one file and expects responses in another, so a
/// generator can run out of band between two invocations.
pub struct FilePairGenerator {
    pub requests: PathBuf,
    pub responses: PathBuf,
}

impl FeatureGenerator for FilePairGenerator {
    fn generate(&mut self, requests: &[FeatureRequest]) -> Result<Vec<FeatureResponse>> {
        let file = File::create(&self.requests).map_err(|e| Error::io(&self.requests, e))?;
        let mut w = BufWriter::new(file);
        for request in requests {
            let line = serde_json::to_string(request).expect("request serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(&self.requests, e))?;
        }
        w.flush().map_err(|e| Error::io(&self.requests, e))?;
        if !self.responses.exists() {
            return Err(Error::adapter(format!(
                "wrote {} requests to {}; run the generator and place its responses at {}, \
                 then rerun",
                requests.len(),
                self.requests.display(),
                self.responses.display()
            )));
        }
        let text = std::fs::read_to_string(&self.responses)
            .map_err(|e| Error::io(&self.responses, e))?;
        parse_response_lines(&self.responses.display().to_string(), &text)
    }
}

// ── Store and generation driver ─────────────────────────────────────────

/// Generated features for a corpus, keyed by product id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureStore {
    map: HashMap<String, GeneratedFeatures>,
}

impl FeatureStore {
    pub fn new() -> Self {
        FeatureStore::default()
    }

    pub fn insert(&mut self, features: GeneratedFeatures) -> Result<()> {
        features.validate()?;
        if self.map.contains_key(&features.id) {
            return Err(Error::adapter(format!("duplicate features for {}", features.id)));
        }
        self.map.insert(features.id.clone(), features);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&GeneratedFeatures> {
        self.map.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.map.contains_key(id)
    }

    /// Absorbs another store, e.g. a fresh top-up pass into a loaded cache.
    /// Ids present on both sides must carry identical features.
    pub fn merge(&mut self, other: FeatureStore) -> Result<()> {
        for (id, features) in other.map {
            match self.map.get(&id) {
                Some(existing) if *existing != features => {
                    return Err(Error::adapter(format!("conflicting features for {id}")));
                }
                Some(_) => {}
                None => {
                    self.map.insert(id, features);
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Writes the store as JSONL, sorted by id so identical stores produce
    /// identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ids: Vec<&String> = self.map.keys().collect();
        ids.sort();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for id in ids {
            let line = serde_json::to_string(&self.map[id]).expect("features serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput { path: path.to_path_buf() });
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = FeatureStore::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let features: GeneratedFeatures = serde_json::from_str(&line).map_err(|e| {
                Error::adapter(format!("{} line {}: {e}", path.display(), lineno + 1))
            })?;
            store.insert(features)?;
        }
        Ok(store)
    }
}

/// What the generation pass covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GenerationStats {
    pub products: usize,
    pub generated: usize,
    /// Products left without features; filtering skips their pairs.
    pub failed: usize,
}

/// One product's raw generation inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductInputs {
    pub product_id: String,
    pub title: String,
    /// Path of the rendered image file.
    pub image_path: PathBuf,
}

/// Collects each referenced product's inputs once, in first appearance
/// order across the given datasets.
pub fn unique_product_inputs(datasets: &[&Dataset]) -> Vec<ProductInputs> {
    let mut order = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for dataset in datasets {
        for record in &dataset.records {
            if seen.insert(record.product_id.as_str(), ()).is_some() {
                continue;
            }
            order.push(ProductInputs {
                product_id: record.product_id.clone(),
                title: record.title.clone(),
                image_path: dataset.root().join(&record.image_path),
            });
        }
    }
    order
}

/// Generates features for every product the datasets reference, in first
/// appearance order. Each product contributes one title request (its first
/// seen title) and one image request; a product whose either side fails
/// stays out of the store.
pub fn generate_corpus_features(
    datasets: &[&Dataset],
    generator: &mut dyn FeatureGenerator,
) -> Result<(FeatureStore, GenerationStats)> {
    generate_product_features(&unique_product_inputs(datasets), generator)
}

/// Record-level driver behind [`generate_corpus_features`], for callers that
/// already know which products still need features.
pub fn generate_product_features(
    products: &[ProductInputs],
    generator: &mut dyn FeatureGenerator,
) -> Result<(FeatureStore, GenerationStats)> {
    let mut order: Vec<&str> = Vec::new();
    let mut requests = Vec::new();
    for product in products {
        order.push(&product.product_id);
        requests.push(FeatureRequest {
            id: format!("{}:title", product.product_id),
            kind: RequestKind::Title,
            payload: product.title.clone(),
            prompt: title_prompt(&product.title),
        });
        requests.push(FeatureRequest {
            id: format!("{}:image", product.product_id),
            kind: RequestKind::Image,
            payload: product.image_path.display().to_string(),
            prompt: IMAGE_PROMPT.to_string(),
        });
    }

    let responses = generator.generate(&requests)?;
    let mut by_id: HashMap<&str, &FeatureResponse> = HashMap::new();
    for response in &responses {
        if by_id.insert(response.id.as_str(), response).is_some() {
            return Err(Error::adapter(format!("duplicate response id {}", response.id)));
        }
    }

    let mut store = FeatureStore::new();
    let mut failed = 0;
    for product_id in &order {
        let title = by_id.get(format!("{product_id}:title").as_str()).copied();
        let image = by_id.get(format!("{product_id}:image").as_str()).copied();
        let assembled = match (title, image) {
            (Some(t), Some(i)) if t.status == "ok" && i.status == "ok" => {
                match (&t.features, &i.caption) {
                    (Some(features), Some(caption)) => Some(GeneratedFeatures {
                        id: product_id.to_string(),
                        title_features: features.clone(),
                        image_caption: caption.clone(),
                    }),
                    _ => None,
                }
            }
            _ => None,
        };
        match assembled {
            Some(features) if features.validate().is_ok() => store.insert(features)?,
            _ => failed += 1,
        }
    }
    let stats =
        GenerationStats { products: order.len(), generated: store.len(), failed };
    Ok((store, stats))
}
