//! Dataset loading and batch collation: JSONL records plus an in-memory
//! image store, shuffled into fixed-size batches with padded token matrices
//! and initial label matrices.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::generate::{DatasetRecord, Stage};
use crate::corpus::render::{load_image, to_planar};
use crate::error::{Error, Result};
use crate::losses::LabelMatrix;
use crate::model::{tokenize, TokenMatrix, TokenSequence, Vocab, CLS_ID};
use crate::numerics::{Scalar, Tensor};

/// A loaded stage file with its corpus directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub stage: Stage,
    root: PathBuf,
}

impl Dataset {
    /// Loads and validates one stage file. Every record must carry the
    /// expected stage tag, and labels exactly when the stage is labeled.
    pub fn load(path: &Path, expected: Stage) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput { path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: DatasetRecord = serde_json::from_str(line).map_err(|e| {
                Error::contract(format!(
                    "{} line {}: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if record.stage != expected {
                return Err(Error::contract(format!(
                    "{} line {}: stage {:?} in a {:?} file",
                    path.display(),
                    lineno + 1,
                    record.stage,
                    expected
                )));
            }
            let labeled = expected == Stage::Labeled;
            if record.label.is_some() != labeled {
                return Err(Error::contract(format!(
                    "{} line {}: label field must be {} for stage {:?}",
                    path.display(),
                    lineno + 1,
                    if labeled { "present" } else { "absent" },
                    expected
                )));
            }
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::contract(format!("{} holds no records", path.display())));
        }
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(Dataset { records, stage: expected, root })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

/// All images a dataset references, decoded once up front.
#[derive(Debug, Clone)]
pub struct ImageStore {
    bytes: HashMap<String, Vec<u8>>,
    size: usize,
}

impl ImageStore {
    pub fn load(dataset: &Dataset, image_size: usize) -> Result<Self> {
        let mut bytes = HashMap::new();
        for record in &dataset.records {
            if bytes.contains_key(&record.image_path) {
                continue;
            }
            let rgb = load_image(&dataset.root.join(&record.image_path), image_size)?;
            bytes.insert(record.image_path.clone(), rgb);
        }
        Ok(ImageStore { bytes, size: image_size })
    }

    pub fn get(&self, image_path: &str) -> Result<&[u8]> {
        self.bytes
            .get(image_path)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("image {image_path} not in store")))
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// One collated training batch.
#[derive(Debug, Clone)]
pub struct CollatedBatch<S: Scalar> {
    pub queries: TokenMatrix,
    pub titles: TokenMatrix,
    /// `[batch, 3, size, size]` in unit range.
    pub images: Tensor<S>,
    /// Relevance of `(query_i, product_i)`: record label, or 1 for
    /// label-free stages.
    pub pair_labels: Vec<u8>,
    /// Initial query-product positives: the diagonal of the pair labels.
    pub labels_qp: LabelMatrix,
    /// Initial image-title positives: the identity (each title describes
    /// its own image).
    pub labels_it: LabelMatrix,
    pub product_ids: Vec<String>,
    pub query_texts: Vec<String>,
    /// Dataset indices of the members, for tracing.
    pub indices: Vec<usize>,
}

/// Splits `[0, n)` into shuffled batches. Partial tails are kept only when
/// `drop_last` is false and they hold at least two members (a single example
/// cannot form in-batch negatives).
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    drop_last: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config("schedule.batch_size", "must be at least 2"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() == batch_size || (!drop_last && chunk.len() >= 2) {
            out.push(chunk.to_vec());
        }
    }
    Ok(out)
}

/// Collates chosen records into tensors and label matrices.
pub fn collate<S: Scalar>(
    dataset: &Dataset,
    store: &ImageStore,
    vocab: &Vocab,
    max_text_len: usize,
    indices: &[usize],
) -> Result<CollatedBatch<S>> {
    if indices.len() < 2 {
        return Err(Error::contract("a batch needs at least 2 members"));
    }
    let b = indices.len();
    let mut query_seqs = Vec::with_capacity(b);
    let mut title_seqs = Vec::with_capacity(b);
    let mut pair_labels = Vec::with_capacity(b);
    let mut product_ids = Vec::with_capacity(b);
    let mut query_texts = Vec::with_capacity(b);
    let size = store.size();
    let mut image_data: Vec<S> = Vec::with_capacity(b * 3 * size * size);
    for &i in indices {
        let record = dataset
            .records
            .get(i)
            .ok_or_else(|| Error::contract(format!("record index {i} out of range")))?;
        // Query-free stages carry empty query strings; they collate to a
        // bare CLS row, which the stage's loss terms never encode.
        let query = if record.query.is_empty() {
            TokenSequence { ids: vec![CLS_ID] }
        } else {
            tokenize(vocab, &record.query, max_text_len)?
        };
        query_seqs.push(query);
        title_seqs.push(tokenize(vocab, &record.title, max_text_len)?);
        pair_labels.push(record.label.unwrap_or(1));
        product_ids.push(record.product_id.clone());
        query_texts.push(record.query.clone());
        let planar: Tensor<S> = to_planar(store.get(&record.image_path)?, size);
        image_data.extend_from_slice(planar.data());
    }
    let images = Tensor::new(vec![b, 3, size, size], image_data)?;
    let mut labels_qp = LabelMatrix::zeros(b);
    for (i, &l) in pair_labels.iter().enumerate() {
        if l != 0 {
            labels_qp.set(i, i, true);
        }
    }
    Ok(CollatedBatch {
        queries: TokenMatrix::from_sequences(&query_seqs)?,
        titles: TokenMatrix::from_sequences(&title_seqs)?,
        images,
        pair_labels,
        labels_qp,
        labels_it: LabelMatrix::identity(b),
        product_ids,
        query_texts,
        indices: indices.to_vec(),
    })
}
