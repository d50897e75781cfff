//! Corpus pipeline oracles: deterministic regeneration, labeled-split
//! balance, attribute identifiability on the emitted records, modality
//! routing, and batching/collation behaviour.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use queryfuse::corpus::{
    classify_image, collate, epoch_batches, files, generate_corpus, load_image, Category,
    CorpusConfig, CorpusSummary, Dataset, DatasetRecord, ImageStore, ProductSpec, Stage,
};
use queryfuse::model::{Vocab, CLS_ID};
use queryfuse::rng;
use tempfile::TempDir;

// ── Shared fixture ──────────────────────────────────────────────────────

/// Small corpus shared by the read-only tests; generated once.
struct Fixture {
    dir: TempDir,
    cfg: CorpusConfig,
    summary: CorpusSummary,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn products(&self) -> HashMap<String, ProductSpec> {
        let text = std::fs::read_to_string(self.path().join(files::PRODUCTS)).unwrap();
        text.lines()
            .map(|line| {
                let spec: ProductSpec = serde_json::from_str(line).unwrap();
                (spec.product_id.clone(), spec)
            })
            .collect()
    }

    fn records(&self, file: &str) -> Vec<DatasetRecord> {
        let text = std::fs::read_to_string(self.path().join(file)).unwrap();
        text.lines().map(|line| serde_json::from_str(line).unwrap()).collect()
    }

    fn labeled_records(&self) -> Vec<DatasetRecord> {
        let mut out = self.records(files::STAGE[2]);
        out.extend(self.records(files::EVAL));
        out
    }
}

fn fixture_config() -> CorpusConfig {
    CorpusConfig {
        seed: 11,
        counts: [60, 90, 40],
        eval_count: 24,
        eval_products: 16,
        image_size: 12,
        ..CorpusConfig::default()
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = fixture_config();
        let summary = generate_corpus(&cfg, dir.path()).unwrap();
        Fixture { dir, cfg, summary }
    })
}

/// Attribute tokens a record exposes: its (possibly stuffed) title plus
/// what the product's rendered image expresses.
fn covered_tokens<'a>(record: &'a DatasetRecord, spec: &'a ProductSpec) -> HashSet<&'a str> {
    let mut out: HashSet<&str> = record.title.split(' ').collect();
    out.extend(spec.image_tokens());
    out
}

// ── Generation: determinism ─────────────────────────────────────────────

fn corpus_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out: Vec<_> = [files::VOCAB, files::PRODUCTS, files::EVAL]
        .iter()
        .chain(files::STAGE.iter())
        .map(|name| dir.join(name))
        .collect();
    let mut images: Vec<_> = std::fs::read_dir(dir.join(files::IMAGE_DIR))
        .unwrap()
        .map(|entry| entry.unwrap().path())
        .collect();
    images.sort();
    out.extend(images);
    out
}

#[test]
fn same_seed_regenerates_identical_bytes() {
    let first = fixture();
    let second = TempDir::new().unwrap();
    generate_corpus(&first.cfg, second.path()).unwrap();

    let a = corpus_files(first.path());
    let b = corpus_files(second.path());
    assert_eq!(a.len(), b.len());
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(pa.file_name(), pb.file_name());
        let (da, db) = (std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        assert_eq!(da, db, "{} differs between identically seeded runs", pa.display());
    }
}

#[test]
fn different_seed_changes_the_catalog() {
    let base = fixture();
    let other_dir = TempDir::new().unwrap();
    let other_cfg = CorpusConfig { seed: base.cfg.seed + 1, ..base.cfg.clone() };
    generate_corpus(&other_cfg, other_dir.path()).unwrap();

    let a = std::fs::read(base.path().join(files::PRODUCTS)).unwrap();
    let b = std::fs::read(other_dir.path().join(files::PRODUCTS)).unwrap();
    assert_ne!(a, b);
}

// ── Generation: split structure ─────────────────────────────────────────

#[test]
fn summary_counts_match_the_emitted_files() {
    let fx = fixture();
    assert_eq!(fx.summary.records, [60, 90, 40]);
    assert_eq!(fx.summary.eval_records, 24);
    assert_eq!(fx.summary.train_products, 60);
    assert_eq!(fx.summary.eval_products, 16);
    for (file, expected) in [
        (files::STAGE[0], 60),
        (files::STAGE[1], 90),
        (files::STAGE[2], 40),
        (files::EVAL, 24),
    ] {
        assert_eq!(fx.records(file).len(), expected, "{file}");
    }
    assert_eq!(fx.products().len(), 60 + 16);
}

#[test]
fn pair_stage_covers_every_training_product_exactly_once() {
    let fx = fixture();
    let stage1 = fx.records(files::STAGE[0]);
    let ids: HashSet<&str> = stage1.iter().map(|r| r.product_id.as_str()).collect();
    assert_eq!(ids.len(), stage1.len(), "a product repeats within the pair stage");
    for record in &stage1 {
        assert_eq!(record.stage, Stage::Pairs);
        assert!(record.query.is_empty());
        assert!(record.query_id.is_empty());
        assert_eq!(record.label, None);
    }
}

#[test]
fn labeled_splits_balance_positives_and_negatives_exactly() {
    let fx = fixture();
    for (file, total) in [(files::STAGE[2], 40), (files::EVAL, 24)] {
        let records = fx.records(file);
        let positives = records.iter().filter(|r| r.label == Some(1)).count();
        let negatives = records.iter().filter(|r| r.label == Some(0)).count();
        assert_eq!(positives, total / 2, "{file}");
        assert_eq!(negatives, total / 2, "{file}");
    }
}

#[test]
fn held_out_products_never_appear_in_training_stages() {
    let fx = fixture();
    let mut train_ids: HashSet<String> = HashSet::new();
    for file in files::STAGE {
        train_ids.extend(fx.records(file).into_iter().map(|r| r.product_id));
    }
    let eval_ids: HashSet<String> =
        fx.records(files::EVAL).into_iter().map(|r| r.product_id).collect();
    assert!(train_ids.is_disjoint(&eval_ids));
    assert_eq!(eval_ids.len(), fx.cfg.eval_products.min(eval_ids.len()));
}

#[test]
fn query_ids_intern_one_id_per_distinct_query() {
    let fx = fixture();
    let mut by_text: HashMap<String, String> = HashMap::new();
    let mut by_id: HashMap<String, String> = HashMap::new();
    let mut records = fx.records(files::STAGE[1]);
    records.extend(fx.labeled_records());
    for record in &records {
        assert!(record.query_id.starts_with('q'), "{}", record.query_id);
        let seen = by_text.entry(record.query.clone()).or_insert_with(|| record.query_id.clone());
        assert_eq!(seen, &record.query_id, "query {:?} got two ids", record.query);
        let text = by_id.entry(record.query_id.clone()).or_insert_with(|| record.query.clone());
        assert_eq!(text, &record.query, "id {} covers two queries", record.query_id);
    }
}

#[test]
fn click_stage_repeats_queries_densely() {
    let fx = fixture();
    let stage2 = fx.records(files::STAGE[1]);
    let unique: HashSet<&str> = stage2.iter().map(|r| r.query.as_str()).collect();
    let density = 1.0 - unique.len() as f64 / stage2.len() as f64;
    assert!((density - fx.summary.duplicate_query_density).abs() < 1e-12);
    assert!(
        density >= 0.2,
        "duplicate-query density {density:.3} is too low to exercise false-negative correction"
    );
}

// ── Generation: identifiability and routing ─────────────────────────────

#[test]
fn positives_are_covered_and_negatives_break_on_a_queried_token() {
    let fx = fixture();
    let products = fx.products();
    for record in fx.labeled_records() {
        let spec = &products[&record.product_id];
        let covered = covered_tokens(&record, spec);
        let missing: Vec<&str> =
            record.query.split(' ').filter(|t| !covered.contains(t)).collect();
        match record.label {
            Some(1) => assert!(
                missing.is_empty(),
                "positive {} does not express queried {missing:?}",
                record.product_id
            ),
            Some(0) => assert!(
                !missing.is_empty(),
                "negative {} satisfies every token of {:?}",
                record.product_id,
                record.query
            ),
            other => panic!("labeled record carries {other:?}"),
        }
    }
}

#[test]
fn rendered_images_express_the_attributes_the_titles_omit() {
    let fx = fixture();
    let products = fx.products();
    let stage3 = fx.records(files::STAGE[2]);
    let sample: HashSet<&str> =
        stage3.iter().take(24).map(|r| r.product_id.as_str()).collect();
    for id in sample {
        let spec = &products[id];
        let path = fx.path().join(files::IMAGE_DIR).join(format!(
            "{}.{}",
            spec.product_id,
            fx.cfg.image_format.extension()
        ));
        let rgb = load_image(&path, fx.cfg.image_size).unwrap();
        let reading = classify_image(&rgb, fx.cfg.image_size).unwrap();
        assert_eq!(reading.category, spec.category, "{id}");
        assert_eq!(reading.color, spec.color, "{id}");
        assert_eq!(reading.pattern.as_deref(), spec.pattern.as_deref(), "{id}");
    }
}

#[test]
fn titles_follow_the_modality_routing_table() {
    let fx = fixture();
    let products = fx.products();
    for record in fx.records(files::STAGE[0]) {
        let spec = &products[&record.product_id];
        let title: HashSet<&str> = record.title.split(' ').collect();
        assert!(
            !title.contains(spec.color.as_str()),
            "{}: color belongs to the image, not the title",
            spec.product_id
        );
        match spec.category {
            Category::Dress => {
                let pattern = spec.pattern.as_deref().unwrap();
                assert!(!title.contains(pattern), "{}: pattern leaked", spec.product_id);
                assert!(title.contains(spec.material.as_deref().unwrap()));
                assert!(title.contains(spec.brand.as_str()));
            }
            Category::Monitor | Category::Phone => {
                for param in &spec.params {
                    assert!(title.contains(param.as_str()), "{}: {param}", spec.product_id);
                }
                assert!(title.contains(spec.brand.as_str()));
            }
        }
    }
}

#[test]
fn labeled_counts_must_stay_even() {
    let cfg = CorpusConfig { eval_count: 25, ..fixture_config() };
    let err = generate_corpus(&cfg, TempDir::new().unwrap().path()).unwrap_err();
    assert!(err.to_string().contains("corpus.eval_count"), "{err}");
}

// ── Batching ────────────────────────────────────────────────────────────

#[test]
fn epoch_batches_drop_or_keep_the_tail_by_policy() {
    let mut rng = rng::stream(3, "batch-test");
    let dropped = epoch_batches(10, 4, true, &mut rng).unwrap();
    assert_eq!(dropped.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);

    let kept = epoch_batches(10, 4, false, &mut rng).unwrap();
    assert_eq!(kept.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);

    // A tail of one cannot form in-batch negatives, so it goes regardless.
    let singleton_tail = epoch_batches(9, 4, false, &mut rng).unwrap();
    assert_eq!(singleton_tail.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
}

#[test]
fn epoch_batches_partition_the_index_range() {
    let mut rng = rng::stream(4, "batch-test");
    let batches = epoch_batches(23, 5, false, &mut rng).unwrap();
    let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..23).collect::<Vec<_>>());
}

#[test]
fn epoch_batches_repeat_under_the_same_stream() {
    let first = epoch_batches(40, 8, true, &mut rng::stream(7, "epoch-0")).unwrap();
    let again = epoch_batches(40, 8, true, &mut rng::stream(7, "epoch-0")).unwrap();
    let other = epoch_batches(40, 8, true, &mut rng::stream(7, "epoch-1")).unwrap();
    assert_eq!(first, again);
    assert_ne!(first, other);
}

#[test]
fn epoch_batches_reject_degenerate_sizes() {
    let mut rng = rng::stream(5, "batch-test");
    let err = epoch_batches(10, 1, false, &mut rng).unwrap_err();
    assert!(err.to_string().contains("schedule.batch_size"), "{err}");
}

// ── Collation ───────────────────────────────────────────────────────────

#[test]
fn collate_builds_tensors_and_label_matrices_from_records() {
    let fx = fixture();
    let dataset = Dataset::load(&fx.path().join(files::STAGE[2]), Stage::Labeled).unwrap();
    let store = ImageStore::load(&dataset, fx.cfg.image_size).unwrap();
    let vocab = Vocab::load(&fx.path().join(files::VOCAB)).unwrap();

    let indices = [0usize, 1, 2, 3];
    let batch = collate::<f32>(&dataset, &store, &vocab, 12, &indices).unwrap();

    let size = fx.cfg.image_size;
    assert_eq!(batch.images.shape(), &[4, 3, size, size]);
    assert!(batch.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(batch.queries.batch, 4);
    assert_eq!(batch.titles.batch, 4);
    assert_eq!(batch.indices, indices);

    for (row, &i) in indices.iter().enumerate() {
        let record = &dataset.records[i];
        assert_eq!(batch.pair_labels[row], record.label.unwrap());
        assert_eq!(batch.product_ids[row], record.product_id);
        assert_eq!(batch.query_texts[row], record.query);
        assert_eq!(batch.queries.ids[row * batch.queries.len], CLS_ID);
        assert_eq!(batch.titles.ids[row * batch.titles.len], CLS_ID);
    }
    for i in 0..4 {
        for j in 0..4 {
            let expected = i == j && batch.pair_labels[i] == 1;
            assert_eq!(batch.labels_qp.get(i, j), expected);
            assert_eq!(batch.labels_it.get(i, j), i == j);
        }
    }
}

#[test]
fn collate_turns_query_free_records_into_bare_cls_rows() {
    let fx = fixture();
    let dataset = Dataset::load(&fx.path().join(files::STAGE[0]), Stage::Pairs).unwrap();
    let store = ImageStore::load(&dataset, fx.cfg.image_size).unwrap();
    let vocab = Vocab::load(&fx.path().join(files::VOCAB)).unwrap();

    let batch = collate::<f32>(&dataset, &store, &vocab, 12, &[0, 1]).unwrap();
    assert_eq!(batch.queries.len, 1);
    assert_eq!(batch.queries.lengths, vec![1, 1]);
    assert_eq!(batch.queries.ids, vec![CLS_ID, CLS_ID]);
    assert_eq!(batch.pair_labels, vec![1, 1]);
    for i in 0..2 {
        for j in 0..2 {
            assert_eq!(batch.labels_qp.get(i, j), i == j);
        }
    }
}

#[test]
fn collate_rejects_batches_too_small_for_negatives() {
    let fx = fixture();
    let dataset = Dataset::load(&fx.path().join(files::STAGE[2]), Stage::Labeled).unwrap();
    let store = ImageStore::load(&dataset, fx.cfg.image_size).unwrap();
    let vocab = Vocab::load(&fx.path().join(files::VOCAB)).unwrap();
    assert!(collate::<f32>(&dataset, &store, &vocab, 12, &[0]).is_err());
}

// ── Loading and validation ──────────────────────────────────────────────

#[test]
fn dataset_load_rejects_stage_mismatches() {
    let fx = fixture();
    let err = Dataset::load(&fx.path().join(files::STAGE[2]), Stage::Clicks).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 1") && msg.contains("stage"), "{msg}");
}

#[test]
fn dataset_load_enforces_the_label_presence_rule() {
    let dir = TempDir::new().unwrap();

    let unlabeled = dir.path().join("bad_labeled.jsonl");
    std::fs::write(
        &unlabeled,
        concat!(
            r#"{"query":"dress","title":"dress silk","image_path":"images/p.png","#,
            r#""stage":"labeled","product_id":"p00000","query_id":"q0000","#,
            r#""noise_flags":{"stuffed":false,"misleading":false}}"#,
            "\n"
        ),
    )
    .unwrap();
    let err = Dataset::load(&unlabeled, Stage::Labeled).unwrap_err();
    assert!(err.to_string().contains("label field must be present"), "{err}");

    let labeled_pairs = dir.path().join("bad_pairs.jsonl");
    std::fs::write(
        &labeled_pairs,
        concat!(
            r#"{"query":"","title":"dress silk","image_path":"images/p.png","label":1,"#,
            r#""stage":"pairs","product_id":"p00000","query_id":"","#,
            r#""noise_flags":{"stuffed":false,"misleading":false}}"#,
            "\n"
        ),
    )
    .unwrap();
    let err = Dataset::load(&labeled_pairs, Stage::Pairs).unwrap_err();
    assert!(err.to_string().contains("label field must be absent"), "{err}");
}

#[test]
fn dataset_load_reports_malformed_lines_by_number() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("broken.jsonl");
    let good = concat!(
        r#"{"query":"dress","title":"dress silk","image_path":"images/p.png","#,
        r#""stage":"clicks","product_id":"p00000","query_id":"q0000","#,
        r#""noise_flags":{"stuffed":false,"misleading":false}}"#
    );
    std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
    let err = Dataset::load(&path, Stage::Clicks).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");

    std::fs::write(&path, format!("{good}\n")).unwrap();
    let renamed = good.replace("\"query\"", "\"qry\"");
    std::fs::write(&path, format!("{renamed}\n")).unwrap();
    let err = Dataset::load(&path, Stage::Clicks).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

#[test]
fn dataset_load_requires_the_file_to_exist() {
    let dir = TempDir::new().unwrap();
    let err = Dataset::load(&dir.path().join("absent.jsonl"), Stage::Pairs).unwrap_err();
    assert!(matches!(err, queryfuse::Error::MissingInput { .. }), "{err}");
}

#[test]
fn image_store_rejects_paths_it_never_loaded() {
    let fx = fixture();
    let dataset = Dataset::load(&fx.path().join(files::STAGE[0]), Stage::Pairs).unwrap();
    let store = ImageStore::load(&dataset, fx.cfg.image_size).unwrap();
    assert!(store.get("images/nope.png").is_err());
    assert!(store.get(&dataset.records[0].image_path).is_ok());
}
