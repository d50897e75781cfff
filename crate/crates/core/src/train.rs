//! Three-stage training schedule: contrastive pretraining on title-image
//! pairs, full-loss training on click triplets with label correction, and
//! fine-tuning on annotated triplets. Each invocation writes per-step CSV
//! logs and a checkpoint per completed stage, and is deterministic for a
//! seed in a fixed precision mode.

use std::fs::{create_dir_all, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{collate, epoch_batches, files, CollatedBatch, Dataset, ImageStore, Stage};
use crate::error::{Error, Result};
use crate::genfilt::{
    build_generator, filter_batch_labels, generate_product_features, unique_product_inputs,
    EmbeddingScorer, FeatureStore, FilterStats, GenFiltConfig, SimilarityBackend,
    SimilarityScorer, TokenOverlapScorer, FEATURES_FILE,
};
use crate::losses::{total_loss, ActiveTerms, LossBreakdown, LossConfig, TotalLossInputs};
use crate::model::{init_params, EncoderConfig, ModelGraph, Vocab};
use crate::numerics::{
    clip_gradients, load as load_checkpoint, save as save_checkpoint, AdamW, AdamWConfig,
    LrSchedule, ParamSet, Scalar,
};
use crate::rng;

/// One stage's slice of the schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Stage file name inside the data directory.
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drop partial tail batches instead of training on them.
    pub drop_last: bool,
    /// Loss terms this stage trains.
    pub active: ActiveTerms,
    /// Whether label correction runs on this stage's batches.
    pub genfilt: bool,
    pub max_lr: f64,
    pub warmup_steps: u64,
    /// Global-norm gradient clip, or `null` to leave gradients unscaled.
    pub grad_clip: Option<f64>,
}

impl StageConfig {
    /// The built-in schedule for stage `number` (1-based).
    pub fn stage_default(number: usize) -> Self {
        assert!((1..=3).contains(&number), "stage number out of range");
        let idx = number - 1;
        StageConfig {
            dataset: files::STAGE[idx].to_string(),
            epochs: [3, 4, 3][idx],
            // Stage 1 pairs share only category-level signal between title
            // and image, so its loss floor is near ln(batch/categories);
            // a small batch keeps the drop from initialization visible.
            batch_size: [4, 16, 16][idx],
            drop_last: false,
            active: if number == 1 { ActiveTerms::contrastive_pretrain() } else { ActiveTerms::all() },
            genfilt: number != 1,
            // Weights start at scale 0.02, and Adam steps move each one by
            // close to the learning rate itself, so rates much past 3e-3
            // bounce the contrastive losses around their uniform point
            // instead of descending.
            max_lr: [2e-3, 1e-3, 5e-4][idx],
            warmup_steps: [50, 50, 20][idx],
            grad_clip: Some(1.0),
        }
    }

    fn validate(&self, number: usize) -> Result<()> {
        let field = |name: &str| format!("schedule.stages[{}].{name}", number - 1);
        if self.dataset.is_empty() {
            return Err(Error::config(&field("dataset"), "must name a stage file"));
        }
        if self.epochs == 0 {
            return Err(Error::config(&field("epochs"), "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(&field("batch_size"), "must be at least 2"));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::config(&field("max_lr"), "must be positive"));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::config(&field("grad_clip"), "must be positive when set"));
        }
        if number == 1 && self.active != ActiveTerms::contrastive_pretrain() {
            return Err(Error::config(&field("active"), "stage 1 trains ITC only"));
        }
        Ok(())
    }
}

/// The full three-stage schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub stages: [StageConfig; 3],
    pub optimizer: AdamWConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            stages: [
                StageConfig::stage_default(1),
                StageConfig::stage_default(2),
                StageConfig::stage_default(3),
            ],
            optimizer: AdamWConfig::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        for (idx, stage) in self.stages.iter().enumerate() {
            stage.validate(idx + 1)?;
        }
        self.optimizer.validate()
    }
}

/// Which stages one invocation runs. Stages always execute in order; a
/// single stage picks up the previous stage's checkpoint from the output
/// directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    All,
    /// One stage by its 1-based number.
    One(usize),
}

/// Everything one training invocation needs beyond the schedule itself.
#[derive(Debug, Clone)]
pub struct TrainInputs<'a> {
    pub encoder: &'a EncoderConfig,
    pub loss: &'a LossConfig,
    pub genfilt: &'a GenFiltConfig,
    pub schedule: &'a ScheduleConfig,
    /// Corpus directory holding the stage files, vocabulary and images.
    pub data_dir: &'a Path,
    /// Where logs, checkpoints and the feature cache land.
    pub out_dir: &'a Path,
    pub seed: u64,
    pub selection: StageSelection,
}

/// One stage's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    /// 1-based stage number.
    pub stage: usize,
    pub steps: u64,
    /// Mean total loss per epoch.
    pub epoch_mean_total: Vec<f64>,
    /// Total loss at the last step.
    pub final_total: f64,
    /// Label-correction counts summed over the stage.
    pub filter: FilterStats,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// What one invocation trained.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub stages: Vec<StageSummary>,
}

/// Checkpoint file name for a completed stage.
pub fn checkpoint_file(stage: usize) -> String {
    format!("checkpoint.stage{stage}.ckpt")
}

/// Checkpoint file name for a stage aborted on a non-finite loss.
pub fn aborted_checkpoint_file(stage: usize) -> String {
    format!("checkpoint.stage{stage}.aborted.ckpt")
}

/// Per-step CSV log file name for a stage.
pub fn log_file(stage: usize) -> String {
    format!("train.stage{stage}.csv")
}

/// Column header of the per-step CSV logs.
pub const LOG_HEADER: &str =
    "stage,epoch,step,global_step,lr,itc,itm,qmm,qic,qtc,qmc,total,mining_skipped";

/// Runs the selected stages, reading the previous stage's checkpoint from
/// the output directory when the selection does not start at stage 1.
pub fn run_training_schedule<S: Scalar>(inputs: &TrainInputs) -> Result<TrainSummary> {
    inputs.encoder.validate()?;
    inputs.loss.validate()?;
    inputs.genfilt.validate()?;
    inputs.schedule.validate()?;
    let (first, last) = match inputs.selection {
        StageSelection::All => (1, 3),
        StageSelection::One(n) if (1..=3).contains(&n) => (n, n),
        StageSelection::One(_) => {
            return Err(Error::config("train.stage", "must be 1, 2 or 3"));
        }
    };
    create_dir_all(inputs.out_dir).map_err(|e| Error::io(inputs.out_dir, e))?;

    let vocab = Vocab::load(&inputs.data_dir.join(files::VOCAB))?;
    if vocab.len() != inputs.encoder.vocab_size {
        return Err(Error::config(
            "encoder.vocab_size",
            format!(
                "must match the corpus vocabulary ({} words, config says {})",
                vocab.len(),
                inputs.encoder.vocab_size
            ),
        ));
    }

    let mut params: ParamSet<S> = if first == 1 {
        init_params(inputs.encoder, inputs.seed)?
    } else {
        let previous = inputs.out_dir.join(checkpoint_file(first - 1));
        if !previous.exists() {
            return Err(Error::MissingInput { path: previous });
        }
        load_checkpoint(&previous)?
    };

    let mut summary = TrainSummary { stages: Vec::new() };
    for number in first..=last {
        summary.stages.push(run_stage(inputs, number, &mut params, &vocab)?);
    }
    Ok(summary)
}

/// Expected stage tag of each schedule position.
const STAGE_TAGS: [Stage; 3] = [Stage::Pairs, Stage::Clicks, Stage::Labeled];

fn run_stage<S: Scalar>(
    inputs: &TrainInputs,
    number: usize,
    params: &mut ParamSet<S>,
    vocab: &Vocab,
) -> Result<StageSummary> {
    let stage_cfg = &inputs.schedule.stages[number - 1];
    let dataset = Dataset::load(&inputs.data_dir.join(&stage_cfg.dataset), STAGE_TAGS[number - 1])?;
    if dataset.len() < 2 {
        return Err(Error::contract(format!(
            "stage {number} needs at least 2 records for in-batch negatives, found {}",
            dataset.len()
        )));
    }
    let store = ImageStore::load(&dataset, inputs.encoder.image_size)?;

    let filtering = stage_cfg.genfilt && inputs.genfilt.enabled();
    let features = if filtering { ensure_features(inputs, &dataset)? } else { FeatureStore::new() };
    // The scorer snapshots the parameters entering the stage; corrections
    // within a stage do not drift with the updates they shape.
    let mut scorer = if filtering { Some(build_scorer(inputs, params, vocab)) } else { None };

    let n = dataset.len();
    let per_epoch = n / stage_cfg.batch_size
        + usize::from(!stage_cfg.drop_last && n % stage_cfg.batch_size >= 2);
    if per_epoch == 0 {
        return Err(Error::config(
            &format!("schedule.stages[{}].batch_size", number - 1),
            format!("no full batch fits the {n} records of {}", stage_cfg.dataset),
        ));
    }
    let total_steps = (per_epoch * stage_cfg.epochs) as u64;
    let lr_schedule = LrSchedule::new(stage_cfg.max_lr, stage_cfg.warmup_steps, total_steps)?;
    let mut optimizer: AdamW<S> = AdamW::new(inputs.schedule.optimizer);

    let log_path = inputs.out_dir.join(log_file(number));
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let ioerr = |e: std::io::Error| Error::io(&log_path, e);
    writeln!(log, "{LOG_HEADER}").map_err(ioerr)?;

    let mut filter_stats = FilterStats::default();
    let mut epoch_mean_total = Vec::with_capacity(stage_cfg.epochs);
    let mut final_total = f64::NAN;
    let mut global_step: u64 = 0;
    // The newest parameters whose loss came out finite; an abort saves
    // these, not the update that followed them.
    let mut last_good: Option<ParamSet<S>> = None;
    for epoch in 0..stage_cfg.epochs {
        let mut batch_rng =
            rng::substream(inputs.seed, &format!("train-batches-stage{number}"), epoch as u64);
        let batches = epoch_batches(n, stage_cfg.batch_size, stage_cfg.drop_last, &mut batch_rng)?;
        let mut epoch_total = 0.0;
        for (step, indices) in batches.iter().enumerate() {
            let mut batch =
                collate::<S>(&dataset, &store, vocab, inputs.encoder.max_text_len, indices)?;
            if let Some(scorer) = scorer.as_deref_mut() {
                let stats = filter_batch_labels(
                    &batch.query_texts,
                    &batch.product_ids,
                    &features,
                    scorer,
                    inputs.genfilt,
                    &mut batch.labels_qp,
                    &mut batch.labels_it,
                )?;
                filter_stats.absorb(stats);
                pin_annotated_negatives(&mut batch);
            }

            let lr = lr_schedule.lr(global_step);
            let outcome = train_step(
                inputs,
                stage_cfg,
                number,
                &batch,
                params,
                &mut optimizer,
                &mut last_good,
                lr,
                global_step,
            );
            let breakdown = match outcome {
                Ok(b) => b,
                Err(Error::Domain { op, detail }) => {
                    let rescue = inputs.out_dir.join(aborted_checkpoint_file(number));
                    save_checkpoint(&rescue, last_good.as_ref().unwrap_or(params))?;
                    return Err(Error::contract(format!(
                        "stage {number} aborted at epoch {epoch} step {step}: the loss went \
                         non-finite in {op}: {detail}; last good parameters saved to {}",
                        rescue.display()
                    )));
                }
                Err(e) => return Err(e),
            };

            writeln!(
                log,
                "{number},{epoch},{step},{global_step},{lr:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                breakdown.itc,
                breakdown.itm,
                breakdown.qmm,
                breakdown.qic,
                breakdown.qtc,
                breakdown.qmc,
                breakdown.total,
                breakdown.mining_skipped,
            )
            .map_err(ioerr)?;
            epoch_total += breakdown.total;
            final_total = breakdown.total;
            global_step += 1;
        }
        epoch_mean_total.push(epoch_total / batches.len() as f64);
    }
    log.flush().map_err(ioerr)?;

    let checkpoint = inputs.out_dir.join(checkpoint_file(number));
    save_checkpoint(&checkpoint, params)?;
    Ok(StageSummary {
        stage: number,
        steps: global_step,
        epoch_mean_total,
        final_total,
        filter: filter_stats,
        checkpoint,
        log: log_path,
    })
}

/// One forward/backward/update pass. A `Domain` error here means an
/// activation or the loss went non-finite; the caller turns that into an
/// abort with a rescue checkpoint.
#[allow(clippy::too_many_arguments)]
fn train_step<S: Scalar>(
    inputs: &TrainInputs,
    stage_cfg: &StageConfig,
    number: usize,
    batch: &CollatedBatch<S>,
    params: &mut ParamSet<S>,
    optimizer: &mut AdamW<S>,
    last_good: &mut Option<ParamSet<S>>,
    lr: f64,
    global_step: u64,
) -> Result<LossBreakdown> {
    let mut mg = ModelGraph::new(inputs.encoder, params, true)?;
    if inputs.encoder.dropout > 0.0 {
        let rng =
            rng::substream(inputs.seed, &format!("train-dropout-stage{number}"), global_step);
        mg.set_dropout(inputs.encoder.dropout, rng);
    }
    let loss_inputs = TotalLossInputs {
        queries: &batch.queries,
        titles: &batch.titles,
        images: &batch.images,
        pair_labels: &batch.pair_labels,
        labels_qp: &batch.labels_qp,
        labels_it: &batch.labels_it,
    };
    let mut mining_rng =
        rng::substream(inputs.seed, &format!("train-mining-stage{number}"), global_step);
    let (loss, breakdown) =
        total_loss(&mut mg, &loss_inputs, inputs.loss, &stage_cfg.active, &mut mining_rng)?;
    *last_good = Some(params.clone());
    let grads = mg.graph_ref().backward(loss)?;
    let mut named = mg.graph_ref().named_gradients(&grads);
    if let Some(max_norm) = stage_cfg.grad_clip {
        clip_gradients(&mut named, max_norm);
    }
    optimizer.step(params, &named, lr)?;
    Ok(breakdown)
}

/// Reapplies annotated negatives after label correction: a label-0 row
/// pins every entry pairing its query with its product back to 0. Human
/// labels outrank heuristic correction.
pub fn pin_annotated_negatives<S: Scalar>(batch: &mut CollatedBatch<S>) {
    let b = batch.pair_labels.len();
    for i in 0..b {
        if batch.pair_labels[i] != 0 {
            continue;
        }
        for a in 0..b {
            if batch.query_texts[a] != batch.query_texts[i] {
                continue;
            }
            for j in 0..b {
                if batch.product_ids[j] == batch.product_ids[i] {
                    batch.labels_qp.set(a, j, false);
                }
            }
        }
    }
}

/// Loads the output directory's feature cache and generates features for
/// any products this dataset adds, extending the cache on disk.
fn ensure_features(inputs: &TrainInputs, dataset: &Dataset) -> Result<FeatureStore> {
    let cache_path = inputs.out_dir.join(FEATURES_FILE);
    let mut store =
        if cache_path.exists() { FeatureStore::load(&cache_path)? } else { FeatureStore::new() };
    let missing: Vec<_> = unique_product_inputs(&[dataset])
        .into_iter()
        .filter(|p| !store.contains(&p.product_id))
        .collect();
    if !missing.is_empty() {
        let mut generator = build_generator(&inputs.genfilt.generator, inputs.encoder.image_size);
        let (fresh, _) = generate_product_features(&missing, generator.as_mut())?;
        store.merge(fresh)?;
        store.save(&cache_path)?;
    }
    Ok(store)
}

fn build_scorer<S: Scalar>(
    inputs: &TrainInputs,
    params: &ParamSet<S>,
    vocab: &Vocab,
) -> Box<dyn SimilarityScorer> {
    match inputs.genfilt.backend {
        SimilarityBackend::TokenOverlap => Box::new(TokenOverlapScorer),
        SimilarityBackend::ModelEmbedding => Box::new(EmbeddingScorer::new(
            inputs.encoder.clone(),
            params.clone(),
            vocab.clone(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_validates_and_round_trips() {
        let cfg = ScheduleConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stages[0].dataset, "stage1.jsonl");
        assert_eq!([cfg.stages[0].epochs, cfg.stages[1].epochs, cfg.stages[2].epochs], [3, 4, 3]);
        assert!(!cfg.stages[0].genfilt && cfg.stages[1].genfilt && cfg.stages[2].genfilt);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ScheduleConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.stages[1].max_lr, cfg.stages[1].max_lr);
    }

    #[test]
    fn stage_one_must_stay_contrastive_only() {
        let mut cfg = ScheduleConfig::default();
        cfg.stages[0].active = ActiveTerms::all();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("schedule.stages[0].active"), "{err}");
        assert!(err.contains("ITC only"), "{err}");
    }

    #[test]
    fn bad_stage_fields_name_their_paths() {
        let mut cfg = ScheduleConfig::default();
        cfg.stages[1].batch_size = 1;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("schedule.stages[1].batch_size"), "{err}");

        let mut cfg = ScheduleConfig::default();
        cfg.stages[2].grad_clip = Some(0.0);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("schedule.stages[2].grad_clip"), "{err}");
    }
}
