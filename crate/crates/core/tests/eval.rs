use std::collections::BTreeSet;
use std::path::PathBuf;

use queryfuse::corpus::{files, generate_corpus, CorpusConfig};
use queryfuse::eval::{
    auc, image_weight, modality_weights, pr_curve, principal_components, project_neighborhood,
    recall_at_k, run_eval, score_pair, EvalConfig, EvalInputs, ModalEmbeddings, ModelEvaluator,
    ScoringMode,
};
use queryfuse::genfilt::ProductInputs;
use queryfuse::model::{init_params, EncoderConfig, Vocab};
use queryfuse::rng;
use queryfuse::Error;
use rand::Rng;
use tempfile::TempDir;

// ── Classification metrics ──────────────────────────────────────────────

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut ordered = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                ordered += 1.0;
            } else if scores[i] == scores[j] {
                ordered += 0.5;
            }
        }
    }
    ordered / pairs
}

#[test]
fn auc_matches_its_closed_forms() {
    let perfect = auc(&[0.9, 0.8, 0.7, 0.1], &[true, true, false, false]).unwrap();
    assert_eq!(perfect, 1.0);
    let tied = auc(&[0.4, 0.4, 0.4, 0.4], &[true, false, true, false]).unwrap();
    assert_eq!(tied, 0.5);
    // Three of the four positive-negative pairs are ordered correctly.
    let mixed = auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
    assert_eq!(mixed, 0.75);
}

#[test]
fn auc_and_pr_match_brute_force_on_random_instances() {
    let mut rng = rng::stream(11, "eval-auc-oracle");
    for _ in 0..100 {
        let n = rng.gen_range(4..40);
        let scores: Vec<f64> =
            (0..n).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
        let labels: Vec<bool> = loop {
            let l: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
                break l;
            }
        };
        let fast = auc(&scores, &labels).unwrap();
        let slow = brute_force_auc(&scores, &labels);
        assert!((fast - slow).abs() < 1e-12, "auc {fast} vs brute force {slow}");

        let curve = pr_curve(&scores, &labels).unwrap();
        let mut thresholds: Vec<f64> = scores.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        assert_eq!(curve.len(), thresholds.len(), "one point per distinct score");
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        for (point, t) in curve.iter().zip(&thresholds) {
            let tp = scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| **s >= *t && **l)
                .count() as f64;
            let fp = scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| **s >= *t && !**l)
                .count() as f64;
            assert_eq!(point.threshold, *t);
            assert!((point.recall - tp / pos).abs() < 1e-12);
            assert!((point.precision - tp / (tp + fp)).abs() < 1e-12);
        }
    }
}

#[test]
fn auc_ignores_monotone_transforms_of_the_scores() {
    let mut rng = rng::stream(12, "eval-auc-monotone");
    for _ in 0..20 {
        let n = rng.gen_range(5..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let base = auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() - 3.0).collect();
        let after = auc(&warped, &labels).unwrap();
        assert!((base - after).abs() < 1e-9);
    }
}

#[test]
fn degenerate_metric_inputs_are_rejected() {
    assert!(matches!(auc(&[0.5, 0.6], &[true, true]), Err(Error::Contract { .. })));
    assert!(matches!(auc(&[], &[]), Err(Error::Contract { .. })));
    assert!(matches!(auc(&[0.5], &[true, false]), Err(Error::Contract { .. })));
    assert!(matches!(
        auc(&[f64::NAN, 0.2], &[true, false]),
        Err(Error::Contract { .. })
    ));
    assert!(matches!(pr_curve(&[0.5, 0.6], &[false, false]), Err(Error::Contract { .. })));
}

#[test]
fn pr_curve_walks_its_confusion_tables() {
    // Separable scores keep precision at 1 until every positive is in,
    // after which trailing thresholds only admit negatives.
    let sep = pr_curve(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap();
    assert!(sep.iter().take_while(|p| p.threshold >= 0.8).all(|p| p.precision == 1.0));
    assert_eq!(sep[1].recall, 1.0);
    assert_eq!(sep.last().map(|p| p.precision), Some(0.5));

    // One positive above one negative: full recall immediately, then the
    // negative halves precision.
    let two = pr_curve(&[0.9, 0.8], &[true, false]).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!((two[0].recall, two[0].precision), (1.0, 1.0));
    assert_eq!((two[1].recall, two[1].precision), (1.0, 0.5));

    // Anti-separated scores end at precision equal to prevalence.
    let flipped = pr_curve(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap();
    let last = flipped.last().unwrap();
    assert_eq!(last.recall, 1.0);
    assert_eq!(last.precision, 0.5);
    let recalls: Vec<f64> = flipped.iter().map(|p| p.recall).collect();
    assert!(recalls.windows(2).all(|w| w[0] <= w[1]), "recall non-decreasing");
}

// ── Recall at K ─────────────────────────────────────────────────────────

fn pool_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i:04}")).collect()
}

#[test]
fn recall_is_one_under_an_oracle_scorer_and_exact_under_a_fixed_rank() {
    let pool = pool_ids(30);
    let truth: Vec<String> = (0..10).map(|i| pool[i * 3].clone()).collect();
    let oracle = recall_at_k(&truth, &pool, &[5, 10, 20], 12, 3, |qi, pid| {
        f64::from(pid == truth[qi])
    })
    .unwrap();
    assert!(oracle.iter().all(|p| p.value == 1.0));

    // Six distractors always outscore the truth, four never do: rank 7.
    let pool: Vec<String> = (0..10).map(|i| format!("d{i}")).chain(["g".to_string()]).collect();
    let truth = vec!["g".to_string(); 8];
    let seventh = recall_at_k(&truth, &pool, &[5, 10, 20], 10, 3, |_, pid| match pid {
        "g" => 0.5,
        "d0" | "d1" | "d2" | "d3" | "d4" | "d5" => 0.9,
        _ => 0.1,
    })
    .unwrap();
    let values: Vec<f64> = seventh.iter().map(|p| p.value).collect();
    assert_eq!(values, vec![0.0, 1.0, 1.0]);
}

#[test]
fn recall_ties_rank_by_product_id() {
    let mut pool = pool_ids(12);
    pool.push("a-first".to_string());
    pool.push("z-last".to_string());
    let first = recall_at_k(&["a-first".to_string()], &pool, &[1], 13, 9, |_, _| 0.0).unwrap();
    assert_eq!(first[0].value, 1.0, "lowest id wins an all-tied ranking");
    let last = recall_at_k(&["z-last".to_string()], &pool, &[13], 13, 9, |_, _| 0.0).unwrap();
    assert_eq!(last[0].value, 0.0, "highest id loses every tie");
}

fn hash_score(seed: u64, qi: usize, pid: &str) -> f64 {
    let mut x = seed ^ (qi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in pid.bytes() {
        x = (x ^ u64::from(b)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn recall_under_a_random_scorer_stays_inside_binomial_bounds() {
    let pool = pool_ids(300);
    let queries = 10_000;
    let truth: Vec<String> = (0..queries).map(|i| pool[i % pool.len()].clone()).collect();
    let observed =
        recall_at_k(&truth, &pool, &[5, 10, 20], 100, 41, |qi, pid| hash_score(1, qi, pid))
            .unwrap();
    for point in &observed {
        let p = point.k as f64 / 101.0;
        let sigma = (p * (1.0 - p) / queries as f64).sqrt();
        assert!(
            (point.value - p).abs() < 3.0 * sigma,
            "R@{} = {} strays from the uniform-rank null {p}",
            point.k,
            point.value
        );
    }

    // A different sampling seed moves each estimate by sampling noise only.
    let reseeded =
        recall_at_k(&truth, &pool, &[5, 10, 20], 100, 42, |qi, pid| hash_score(1, qi, pid))
            .unwrap();
    for (a, b) in observed.iter().zip(&reseeded) {
        let p = a.k as f64 / 101.0;
        let sigma = (2.0 * p * (1.0 - p) / queries as f64).sqrt();
        assert!((a.value - b.value).abs() < 3.0 * sigma);
    }
}

#[test]
fn recall_rejects_a_small_pool_and_a_missing_truth() {
    let pool = pool_ids(5);
    let err = recall_at_k(&[pool[0].clone()], &pool, &[5], 10, 3, |_, _| 0.0).unwrap_err();
    assert!(matches!(err, Error::Config { ref path, .. } if path == "eval.candidates_per_query"));
    let err =
        recall_at_k(&["absent".to_string()], &pool_ids(30), &[5], 10, 3, |_, _| 0.0).unwrap_err();
    assert!(err.to_string().contains("not in the pool"), "{err}");
}

// ── Modality weights ────────────────────────────────────────────────────

#[test]
fn image_weight_shifts_cosines_before_normalizing() {
    assert_eq!(image_weight(0.3, 0.3), Some(0.5));
    let uneven = image_weight(0.6, 0.4).unwrap();
    assert!((uneven - 1.6 / 3.0).abs() < 1e-12);
    assert_eq!(image_weight(-1.0, -1.0), None);

    let mut rng = rng::stream(13, "eval-weight-range");
    for _ in 0..200 {
        let w = image_weight(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).unwrap();
        assert!((0.0..=1.0).contains(&w));
    }
}

#[test]
fn modality_weights_average_per_category() {
    let rows = vec![
        ("dress".to_string(), 0.6, 0.4),
        ("dress".to_string(), 0.3, 0.3),
        ("phone".to_string(), -1.0, -1.0),
        ("phone".to_string(), 0.0, 0.5),
    ];
    let table = modality_weights(&rows);
    assert_eq!(table.len(), 2);
    assert_eq!((table[0].category.as_str(), table[0].products, table[0].skipped), ("dress", 2, 0));
    let expected = (1.6 / 3.0 + 0.5) / 2.0;
    assert!((table[0].weight_image - expected).abs() < 1e-12);
    assert!((table[0].weight_image + table[0].weight_text - 1.0).abs() < 1e-12);
    assert_eq!((table[1].category.as_str(), table[1].products, table[1].skipped), ("phone", 2, 1));
    assert!((table[1].weight_image - 1.0 / 2.5).abs() < 1e-12);
}

// ── Principal components ────────────────────────────────────────────────

#[test]
fn principal_components_solve_the_covariance_eigenproblem() {
    let mut rng = rng::stream(14, "eval-pca");
    let (n, d) = (20, 6);
    let data: Vec<Vec<f64>> =
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let pca = principal_components(&data).unwrap();

    let centered: Vec<Vec<f64>> = data
        .iter()
        .map(|row| row.iter().zip(&pca.mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += row[i] * row[j] / n as f64;
            }
        }
    }

    assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1] - 1e-12), "descending spectrum");
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let spectrum_sum: f64 = pca.eigenvalues.iter().sum();
    assert!((trace - spectrum_sum).abs() < 1e-9, "eigenvalues partition the variance");

    for (component, lambda) in pca.components.iter().zip(&pca.eigenvalues) {
        let norm: f64 = component.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        for i in 0..d {
            let av: f64 = (0..d).map(|j| cov[i][j] * component[j]).sum();
            assert!((av - lambda * component[i]).abs() < 1e-8, "eigenpair residual");
        }
    }
    let cross: f64 = pca.components[0].iter().zip(&pca.components[1]).map(|(a, b)| a * b).sum();
    assert!(cross.abs() < 1e-9, "components orthogonal");

    // Dropping all but the top two directions loses exactly the trailing
    // eigenvalues' worth of variance.
    let mut residual = 0.0;
    for row in &centered {
        let c0: f64 = row.iter().zip(&pca.components[0]).map(|(x, c)| x * c).sum();
        let c1: f64 = row.iter().zip(&pca.components[1]).map(|(x, c)| x * c).sum();
        let norm2: f64 = row.iter().map(|x| x * x).sum();
        residual += (norm2 - c0 * c0 - c1 * c1) / n as f64;
    }
    let trailing: f64 = pca.eigenvalues[2..].iter().sum();
    assert!((residual - trailing).abs() < 1e-6, "residual {residual} vs trailing {trailing}");
}

#[test]
fn identical_points_project_identically_and_a_degenerate_cloud_errors() {
    let mut data = vec![
        vec![1.0, 0.0, 2.0],
        vec![0.0, 1.5, -1.0],
        vec![2.0, 2.0, 0.5],
    ];
    data.push(data[0].clone());
    let pca = principal_components(&data).unwrap();
    assert_eq!(pca.project(&data[0]), pca.project(&data[3]));

    let same = vec![vec![0.7, 0.7, 0.7]; 5];
    let err = principal_components(&same).unwrap_err();
    assert!(err.to_string().contains("degenerate"), "{err}");
}

// ── Model-side scoring ──────────────────────────────────────────────────

fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        model_dim: 16,
        vit_layers: 1,
        encoder_layers: 1,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size,
        max_text_len: 8,
        image_size: 8,
        patch_size: 4,
        projection_dim: 6,
        dropout: 0.0,
    }
}

fn raw_image(dir: &TempDir, name: &str, fill: u8) -> PathBuf {
    let path = dir.path().join(name);
    let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| fill.wrapping_add(i as u8)).collect();
    std::fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn scoring_identities_hold_on_fresh_parameters() {
    let vocab = Vocab::from_words(["dress", "red", "phone", "blue"].map(String::from));
    let cfg = tiny_encoder(vocab.len());
    let params = init_params::<f64>(&cfg, 17).unwrap();
    let evaluator = ModelEvaluator::new(&cfg, &params, &vocab).unwrap();

    let dir = TempDir::new().unwrap();
    let products = vec![
        ProductInputs {
            product_id: "p1".to_string(),
            title: "dress red".to_string(),
            image_path: raw_image(&dir, "p1.rgb", 10),
        },
        ProductInputs {
            product_id: "p2".to_string(),
            title: "phone blue".to_string(),
            image_path: raw_image(&dir, "p2.rgb", 140),
        },
    ];
    let queries =
        evaluator.embed_texts(&["dress red".to_string(), "phone".to_string()], 8).unwrap();
    let embs = evaluator.embed_products(&products, 8).unwrap();

    // The query and title paths share weights, so the same token stream
    // lands on the same unit vector.
    let same = score_pair(&queries[0], &embs[0], ScoringMode::QueryTitle);
    assert!((same - 1.0).abs() < 1e-6, "identical streams score {same}");

    for q in &queries {
        for e in &embs {
            for mode in ScoringMode::ALL {
                let s = score_pair(q, e, mode);
                assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s), "{mode:?} score {s}");
            }
            let dc = score_pair(q, e, ScoringMode::DivideConquer);
            let qt = score_pair(q, e, ScoringMode::QueryTitle);
            let qi = score_pair(q, e, ScoringMode::QueryImage);
            assert!((dc - 0.5 * (qt + qi)).abs() < 1e-12, "decision fusion is the mean");
        }
    }

    let pos = vec![embs[0].clone(), embs[0].clone()];
    let neg = vec![embs[1].clone(), embs[1].clone()];
    let points = project_neighborhood(&queries[0], &pos, &neg).unwrap();
    assert_eq!(points.len(), 1 + 3 * 2 + 3 * 2);
    assert_eq!((points[0].role, points[0].modality), ("query", "query"));
    let err = project_neighborhood(&queries[0], &pos[..1].to_vec(), &neg).unwrap_err();
    assert!(err.to_string().contains("at least 2"), "{err}");
}

// ── End-to-end run ──────────────────────────────────────────────────────

#[test]
fn run_eval_writes_a_deterministic_report() {
    let data = TempDir::new().unwrap();
    let corpus = CorpusConfig {
        seed: 31,
        counts: [30, 10, 10],
        eval_count: 60,
        eval_products: 16,
        image_size: 12,
        ..CorpusConfig::default()
    };
    generate_corpus(&corpus, data.path()).unwrap();
    let vocab = Vocab::load(&data.path().join(files::VOCAB)).unwrap();
    let mut cfg = tiny_encoder(vocab.len());
    cfg.image_size = 12;
    cfg.max_text_len = 12;
    let params = init_params::<f32>(&cfg, 23).unwrap();
    let eval_cfg = EvalConfig { candidates_per_query: 8, batch_size: 16, ..EvalConfig::default() };

    let run = |out: &TempDir| {
        run_eval(&EvalInputs {
            encoder: &cfg,
            params: &params,
            vocab: &vocab,
            eval: &eval_cfg,
            data_dir: data.path(),
            out_dir: out.path(),
            seed: 5,
            checkpoint: "fixture".to_string(),
        })
        .unwrap()
    };
    let out_a = TempDir::new().unwrap();
    let report = run(&out_a);

    let mode_names: BTreeSet<&str> = report.modes.keys().map(String::as_str).collect();
    assert_eq!(mode_names, BTreeSet::from(["dc", "qi", "qm", "qt"]));
    for mode in report.modes.values() {
        assert!((0.0..=1.0).contains(&mode.auc));
        let values: Vec<f64> = mode.recall.iter().map(|p| p.value).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]), "recall monotone in K: {values:?}");
        assert!(mode.pr.iter().all(|p| (0.0..=1.0).contains(&p.precision)));
    }
    assert_eq!(report.weights.len(), 3, "one row per category");
    for row in &report.weights {
        assert!((row.weight_image + row.weight_text - 1.0).abs() < 1e-12);
    }
    assert_eq!(report.checkpoint, "fixture");
    assert!(report.pool_products > eval_cfg.candidates_per_query);

    let artifacts = [
        "report.json",
        "projection.csv",
        "weights.csv",
        "pr_curve_qm.csv",
        "recall_qt.csv",
    ];
    for name in artifacts {
        assert!(out_a.path().join(name).exists(), "{name} missing");
    }
    let projection = std::fs::read_to_string(out_a.path().join("projection.csv")).unwrap();
    assert!(projection.starts_with("role,modality,x,y\nquery,query,"));

    let out_b = TempDir::new().unwrap();
    run(&out_b);
    for name in artifacts {
        let a = std::fs::read(out_a.path().join(name)).unwrap();
        let b = std::fs::read(out_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn eval_config_validation_names_the_offending_field() {
    let mut cfg = EvalConfig { recall_ks: vec![], ..EvalConfig::default() };
    assert_config_path(&cfg, "eval.recall_ks");
    cfg.recall_ks = vec![10, 5];
    assert_config_path(&cfg, "eval.recall_ks");
    cfg = EvalConfig { candidates_per_query: 0, ..EvalConfig::default() };
    assert_config_path(&cfg, "eval.candidates_per_query");
    cfg = EvalConfig { projection_negatives: 1, ..EvalConfig::default() };
    assert_config_path(&cfg, "eval.projection_positives");
    cfg = EvalConfig { batch_size: 0, ..EvalConfig::default() };
    assert_config_path(&cfg, "eval.batch_size");
}

fn assert_config_path(cfg: &EvalConfig, expected: &str) {
    match cfg.validate().unwrap_err() {
        Error::Config { path, .. } => assert_eq!(path, expected),
        other => panic!("expected a config error, got {other}"),
    }
}
