//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line with the measured numbers.
//!
//! Run with `cargo test -p morallens-cli --test acceptance -- --nocapture`.
//! The quantitative checks run against synthetic cohorts whose planted
//! structure and Monte-Carlo separability ceiling serve as the oracle.

use std::collections::BTreeMap;
use std::time::Instant;

use morallens::eval::{
    auroc, nested_cv, one_vs_all_eval, stratified_kfold, weighted_auroc, ClassAuroc, CvConfig,
};
use morallens::experiments::{
    run_activity_bin_study, run_quality_study, ActivityBinPlan, QualityStudyPlan, View,
};
use morallens::forest::{
    entropy_impurity, feature_importances, gini_impurity, train_forest, Criterion, HyperGrid,
    HyperParams,
};
use morallens::ingest::{Cohort, Modality};
use morallens::matrix::{build_matrix, SelectionMode};
use morallens::psych::{assemble_targets, binarize_at_median, score_pvq, BinaryLabel, Keying};
use morallens::rng::rng_from;
use morallens::synth::{generate_cohort, GeneratorSpec, ModalitySpec, SignalSpec, TargetMarginals};
use rand::Rng;

// ---------------------------------------------------------------------------
// Shared oracles and fixtures
// ---------------------------------------------------------------------------

/// Independent AUROC oracle: explicit pairwise comparison, ties at 0.5.
fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Random scored instance with n <= 50 and deliberate ties (coarse grid).
fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(4..=50);
    let grid: u32 = rng.random_range(2..12);
    let scores: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0..grid) as f64 / grid as f64)
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
    labels[0] = true;
    labels[1] = false;
    (scores, labels)
}

/// The planted-signal cohort of the quantitative criteria: 2,000 users, 500
/// noise items plus 10 signal items at rate ratio `multiplier`:1, balanced
/// binary target.
fn planted_spec(multiplier: f64, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        n_users: 2000,
        seed,
        days: 28,
        dispersion: 1.2,
        modalities: vec![ModalitySpec {
            modality: Modality::DesktopWeb,
            vocab_size: 510,
            popularity_exponent: 1.05,
            activity_log_mean: 4.2,
            activity_log_sd: 0.8,
        }],
        targets: vec![TargetMarginals {
            attribute: "gender".into(),
            marginals: BTreeMap::from([("Female".into(), 0.5), ("Male".into(), 0.5)]),
        }],
        signals: vec![SignalSpec {
            target: "gender".into(),
            class: "Female".into(),
            modality: Modality::DesktopWeb,
            item_indices: (40..50).collect(),
            multiplier,
        }],
        bayes_samples: 100_000,
    }
}

fn signal_keys() -> Vec<String> {
    (40..50)
        .map(|i| format!("web:site{i:04}.example"))
        .collect()
}

/// Generate, ingest, and label a spec's cohort on the desktop modality.
fn ingest_planted(spec: &GeneratorSpec, min_activity: u32) -> (Cohort, Vec<u32>, Vec<String>, f64) {
    let keying = Keying::default_v1();
    let bundle = generate_cohort(spec, &keying).expect("generation succeeds");
    let events = bundle.events["desktop_web"].clone();
    let (cohort, _) = Cohort::assemble(
        events,
        bundle.surveys.clone(),
        min_activity,
        &[Modality::DesktopWeb],
    )
    .expect("cohort assembles");
    let targets = assemble_targets(cohort.users(), cohort.surveys(), &keying).unwrap();
    let gender = targets.target("gender").unwrap();
    let (rows, y) = targets.labelled_rows(gender);
    assert_eq!(rows.len(), cohort.n_users());
    let labels = targets.targets[gender].labels.clone();
    let bayes = bundle
        .ledger
        .bayes_reference
        .get("gender")
        .copied()
        .unwrap_or(0.5);
    (cohort, y, labels, bayes)
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_auroc_matches_brute_force_oracle() {
    let started = Instant::now();
    let mut rng = rng_from(0xACC1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (scores, labels) = random_instance(&mut rng);
        let fast = auroc(&scores, &labels).unwrap().auroc;
        let oracle = brute_force_auroc(&scores, &labels);
        worst = worst.max((fast - oracle).abs());
    }
    let elapsed = started.elapsed();
    assert!(worst < 1e-12, "max |rank - brute force| = {worst:e}");
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "[PASS] criterion 1: rank AUROC = brute force on 500 instances (max diff {worst:.2e}, {elapsed:?})"
    );
}

#[test]
fn criterion_02_auroc_algebra_is_exact() {
    let mut rng = rng_from(0xACC2);
    for _ in 0..200 {
        let (scores, labels) = random_instance(&mut rng);
        let base = auroc(&scores, &labels).unwrap().auroc;

        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let flip = auroc(&scores, &flipped).unwrap().auroc;
        assert_eq!(flip, 1.0 - base, "label-flip complement must be exact");

        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let neg = auroc(&negated, &labels).unwrap().auroc;
        assert_eq!(neg, 1.0 - base, "score-negation complement must be exact");

        // Strictly increasing transform: 3x + exp(x/4).
        let transformed: Vec<f64> = scores.iter().map(|s| 3.0 * s + (s / 4.0).exp()).collect();
        let mono = auroc(&transformed, &labels).unwrap().auroc;
        assert_eq!(mono, base, "monotone-transform invariance must be exact");
    }
    println!("[PASS] criterion 2: flip/negation/monotone identities exact on 200 instances");
}

#[test]
fn criterion_03_weighted_auroc_matches_direct_recomputation() {
    let mut rng = rng_from(0xACC3);
    for _ in 0..100 {
        let k = rng.random_range(2..7);
        let mut raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter_mut().for_each(|p| *p /= total);
        let entries: Vec<ClassAuroc> = raw
            .iter()
            .enumerate()
            .map(|(c, &prevalence)| ClassAuroc {
                class: format!("c{c}"),
                prevalence,
                auroc: Some(rng.random_range(0.0..1.0)),
            })
            .collect();
        let got = weighted_auroc(&entries).unwrap();
        // Direct recomputation, accumulated in reverse order.
        let num: f64 = entries
            .iter()
            .rev()
            .map(|e| e.prevalence * e.auroc.unwrap())
            .sum();
        let den: f64 = entries.iter().rev().map(|e| e.prevalence).sum();
        assert!((got - num / den).abs() < 1e-12);
    }
    // Constant per-class value is returned for any prevalence vector.
    let mut rng = rng_from(0xACC4);
    for _ in 0..50 {
        let v: f64 = rng.random_range(0.0..1.0);
        let entries: Vec<ClassAuroc> = (0..4)
            .map(|c| ClassAuroc {
                class: format!("c{c}"),
                prevalence: rng.random_range(0.01..1.0),
                auroc: Some(v),
            })
            .collect();
        assert!((weighted_auroc(&entries).unwrap() - v).abs() < 1e-12);
    }
    println!("[PASS] criterion 3: weighted AUROC = prevalence-weighted mean on 100 tables");
}

#[test]
fn criterion_04_impurity_reference_values() {
    assert_eq!(gini_impurity(&[2.0, 2.0]).unwrap(), 0.5);
    assert_eq!(gini_impurity(&[4.0, 0.0]).unwrap(), 0.0);
    assert!((gini_impurity(&[3.0, 1.0]).unwrap() - 0.375).abs() < 1e-15);
    assert_eq!(entropy_impurity(&[1.0, 1.0]).unwrap(), 1.0);
    assert!((entropy_impurity(&[3.0, 1.0]).unwrap() - 0.811278).abs() < 1e-6);
    println!("[PASS] criterion 4: gini(2,2)=0.5 gini(4,0)=0 gini(3,1)=0.375 entropy(1,1)=1 entropy(3,1)=0.811278");
}

#[test]
fn criterion_05_planted_signal_recovery() {
    let started = Instant::now();
    let spec = planted_spec(4.0, 0x5157);
    let (cohort, y, class_labels, bayes) = ingest_planted(&spec, 30);
    let x = build_matrix(&cohort, Modality::DesktopWeb).unwrap();

    let grid = HyperGrid {
        n_trees: vec![150],
        max_features_multiplier: vec![1.0],
        max_depth: vec![7, 15],
        criterion: vec![Criterion::Gini],
        min_samples_leaf: 5,
    };
    let cfg = CvConfig::default();
    let report = nested_cv(&x, &y, &class_labels, &grid, &cfg, 0xCAFE).unwrap();
    assert!(
        report.mean >= 0.85,
        "nested-CV mean weighted AUROC {:.4} below 0.85",
        report.mean
    );
    assert!(
        report.mean <= bayes + 0.03,
        "nested-CV mean {:.4} beats the model ceiling {bayes:.4} + 0.03",
        report.mean
    );

    // Importance recovery: median over 10 seeds of |top-20 ∩ planted|.
    let signal: Vec<String> = signal_keys();
    let mut hits = Vec::new();
    for seed in 0..10u64 {
        let params = HyperParams {
            n_trees: 150,
            max_depth: 15,
            seed: 0xBEEF + seed,
            ..HyperParams::default()
        };
        let model = train_forest(&x, &y, &class_labels, &params).unwrap();
        let ranked = feature_importances(&model);
        let top20: Vec<&str> = ranked.iter().take(20).map(|(k, _)| k.as_str()).collect();
        hits.push(
            signal
                .iter()
                .filter(|s| top20.contains(&s.as_str()))
                .count(),
        );
    }
    hits.sort_unstable();
    let median_hits = hits[hits.len() / 2];
    assert!(
        median_hits >= 8,
        "median top-20 signal hits {median_hits} < 8 ({hits:?})"
    );
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 600,
        "runtime {elapsed:?} exceeds the 10-minute target"
    );
    println!(
        "[PASS] criterion 5: planted-signal AUROC {:.4} (ceiling {:.4}), median top-20 hits {median_hits}/10, {elapsed:?}",
        report.mean, bayes
    );
}

#[test]
fn criterion_06_null_control_stays_at_chance() {
    let grid = HyperGrid {
        n_trees: vec![150],
        max_features_multiplier: vec![1.0],
        max_depth: vec![7],
        criterion: vec![Criterion::Gini],
        min_samples_leaf: 5,
    };
    let cfg = CvConfig::default();
    let mut means = Vec::new();
    for seed in 0..10u64 {
        let spec = planted_spec(1.0, 0x6000 + seed);
        let (cohort, y, class_labels, bayes) = ingest_planted(&spec, 30);
        assert!(
            (bayes - 0.5).abs() < 0.02,
            "null model ceiling {bayes} is chance"
        );
        let x = build_matrix(&cohort, Modality::DesktopWeb).unwrap();
        let report = nested_cv(&x, &y, &class_labels, &grid, &cfg, 0x7000 + seed).unwrap();
        assert!(
            (0.45..=0.55).contains(&report.mean),
            "seed {seed}: null AUROC {:.4} outside [0.45, 0.55]",
            report.mean
        );
        means.push(report.mean);
    }
    println!(
        "[PASS] criterion 6: null AUROC within [0.45, 0.55] on 10 seeds (range {:.4}..{:.4})",
        means.iter().cloned().fold(f64::INFINITY, f64::min),
        means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
}

#[test]
fn criterion_07_activity_bins_separate_and_stabilize() {
    // Wide activity spread so the low bins are populated, and signal items
    // deep enough in the popularity tail that low-activity users rarely
    // reach them: activity is what carries the information here.
    let mut spec = planted_spec(4.0, 0x7A11);
    spec.n_users = 3000;
    spec.modalities[0].activity_log_mean = 3.7;
    spec.modalities[0].activity_log_sd = 1.0;
    spec.signals[0].item_indices = (150..160).collect();

    let keying = Keying::default_v1();
    let bundle = generate_cohort(&spec, &keying).unwrap();
    let (cohort, _) = Cohort::assemble(
        bundle.events["desktop_web"].clone(),
        bundle.surveys.clone(),
        1,
        &[Modality::DesktopWeb],
    )
    .unwrap();
    let targets = assemble_targets(cohort.users(), cohort.surveys(), &keying).unwrap();

    let plan = ActivityBinPlan {
        n_train_bins: 20,
        n_test_bins: 100,
        first_edge: 19,
        folds: 5,
        params: HyperParams {
            n_trees: 100,
            max_depth: 7,
            ..HyperParams::default()
        },
        ..ActivityBinPlan::default()
    };
    let report = run_activity_bin_study(
        &cohort,
        &targets,
        "gender",
        View::DesktopWeb,
        &plan,
        0x7B0B,
        1,
    )
    .unwrap();

    let top_bin = report.train_edges.len();
    let top = report.mean_over_test_bins(top_bin, 30);
    let bottom = report.mean_over_test_bins(1, 30);
    assert!(
        top - bottom >= 0.05,
        "top-bin model {top:.4} does not beat bottom-bin model {bottom:.4} by 0.05"
    );

    let stable = report.curve_std_over_test_bins(top_bin, 30, 100);
    let unstable = report.curve_std_over_test_bins(top_bin, 1, 30);
    assert!(
        stable < unstable,
        "AUROC std over bins 30..100 ({stable:.4}) not below std over 1..30 ({unstable:.4})"
    );
    println!(
        "[PASS] criterion 7: top vs bottom bin {top:.4} vs {bottom:.4}; curve std {unstable:.4} -> {stable:.4} beyond bin 30"
    );
}

#[test]
fn criterion_08_quality_study_ranked_vs_random() {
    // Heavy-activity cohort so plenty of users clear the 200-item bar.
    let mut spec = planted_spec(4.0, 0x8A11);
    spec.n_users = 1200;
    spec.modalities[0].activity_log_mean = 5.3;
    spec.modalities[0].activity_log_sd = 0.5;

    let keying = Keying::default_v1();
    let bundle = generate_cohort(&spec, &keying).unwrap();
    let (cohort, _) = Cohort::assemble(
        bundle.events["desktop_web"].clone(),
        bundle.surveys.clone(),
        30,
        &[Modality::DesktopWeb],
    )
    .unwrap();
    let targets = assemble_targets(cohort.users(), cohort.surveys(), &keying).unwrap();

    let plan = QualityStudyPlan {
        active_threshold: 200,
        levels: 20,
        level_max: 200,
        folds: 5,
        params: HyperParams {
            n_trees: 50,
            max_depth: 7,
            ..HyperParams::default()
        },
        ..QualityStudyPlan::default()
    };

    let n_seeds = 10u64;
    let levels = plan.level_values();
    let mut ranked_mean = vec![0.0f64; levels.len()];
    let mut ranked_stds: Vec<f64> = Vec::new();
    let mut random_stds: Vec<f64> = Vec::new();
    for seed in 0..n_seeds {
        let report = run_quality_study(
            &cohort,
            &targets,
            &["gender".to_string()],
            View::DesktopWeb,
            &plan,
            0x9000 + seed,
            1,
        )
        .unwrap();
        let ranked = report.curve("gender", SelectionMode::TopKByFrequency);
        let random = report.curve("gender", SelectionMode::RandomK);
        assert_eq!(ranked.len(), levels.len());
        for (i, (_, mean, _)) in ranked.iter().enumerate() {
            ranked_mean[i] += mean / n_seeds as f64;
        }
        for (k, _, std) in &ranked {
            if *k <= 40 {
                ranked_stds.push(*std);
            }
        }
        for (k, _, std) in &random {
            if *k <= 40 {
                random_stds.push(*std);
            }
        }
    }

    // Ranked curve non-decreasing within tolerance (against its running max).
    let mut running_max = f64::NEG_INFINITY;
    for (i, &mean) in ranked_mean.iter().enumerate() {
        assert!(
            mean >= running_max - 0.02,
            "ranked curve dips at k={}: {mean:.4} vs max {running_max:.4}",
            levels[i]
        );
        running_max = running_max.max(mean);
    }
    let mean_ranked_std = ranked_stds.iter().sum::<f64>() / ranked_stds.len() as f64;
    let mean_random_std = random_stds.iter().sum::<f64>() / random_stds.len() as f64;
    assert!(
        mean_random_std > mean_ranked_std,
        "random-selection band {mean_random_std:.4} not wider than ranked {mean_ranked_std:.4} for k <= 40"
    );
    println!(
        "[PASS] criterion 8: ranked curve monotone within 0.02 ({:.4}..{:.4}); std bands random {mean_random_std:.4} > ranked {mean_ranked_std:.4}",
        ranked_mean.first().unwrap(),
        ranked_mean.last().unwrap()
    );
}

#[test]
fn criterion_09_subcommands_are_byte_deterministic() {
    let bin = env!("CARGO_BIN_EXE_morallens");
    let root = std::env::temp_dir().join(format!("morallens_accept_{}", std::process::id()));
    std::fs::create_dir_all(&root).unwrap();

    let gen_config = root.join("gen.toml");
    std::fs::write(
        &gen_config,
        r#"
n_users = 300
bayes_samples = 5000

[[modalities]]
modality = "desktop_web"
vocab_size = 150
activity_log_mean = 3.4
activity_log_sd = 0.8

[[signals]]
target = "gender"
class = "Female"
modality = "desktop_web"
item_indices = [30, 31, 32, 33, 34]
multiplier = 4.0
"#,
    )
    .unwrap();
    let eval_config = root.join("eval.toml");
    std::fs::write(
        &eval_config,
        format!(
            r#"
survey = "{root}/a/survey.csv"
desktop_log = "{root}/a/desktop_web.jsonl"
min_activity = 5
targets = ["gender"]
save_models = true

[grid]
n_trees = [30]
max_features_multiplier = [1.0]
max_depth = [7]
criterion = ["gini"]
"#,
            root = root.display()
        ),
    )
    .unwrap();
    let act_config = root.join("act.toml");
    std::fs::write(
        &act_config,
        format!(
            r#"
survey = "{root}/a/survey.csv"
desktop_log = "{root}/a/desktop_web.jsonl"
min_activity = 1
target = "gender"

[plan]
n_train_bins = 4
n_test_bins = 10
first_edge = 12
folds = 3

[plan.params]
n_trees = 20
"#,
            root = root.display()
        ),
    )
    .unwrap();
    let qual_config = root.join("qual.toml");
    std::fs::write(
        &qual_config,
        format!(
            r#"
survey = "{root}/a/survey.csv"
desktop_log = "{root}/a/desktop_web.jsonl"
min_activity = 1
targets = ["gender"]

[plan]
active_threshold = 25
levels = 3
level_max = 40
folds = 3

[plan.params]
n_trees = 20
"#,
            root = root.display()
        ),
    )
    .unwrap();

    let run = |args: &[&str]| {
        let output = std::process::Command::new(bin)
            .args(args)
            .output()
            .expect("subcommand runs");
        assert!(
            output.status.success(),
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    };
    let path = |tail: String| root.join(tail).display().to_string();

    // Two independent pipelines (a and b) with identical configs and seeds;
    // the first synth output also feeds evaluate/experiment/importance.
    for side in ["a", "b"] {
        run(&[
            "synth",
            "--config",
            gen_config.to_str().unwrap(),
            "--seed",
            "42",
            "--out",
            &path(side.into()),
        ]);
    }
    for side in ["sa", "sb"] {
        run(&[
            "score",
            "--surveys",
            &path("a/survey.csv".into()),
            "--out",
            &path(side.into()),
        ]);
    }
    for (side, jobs) in [("ea", "1"), ("eb", "2")] {
        run(&[
            "evaluate",
            "--config",
            eval_config.to_str().unwrap(),
            "--seed",
            "7",
            "--jobs",
            jobs,
            "--out",
            &path(side.into()),
        ]);
    }
    for side in ["aa", "ab"] {
        run(&[
            "experiment",
            "activity",
            "--config",
            act_config.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            &path(side.into()),
        ]);
    }
    for side in ["qa", "qb"] {
        run(&[
            "experiment",
            "quality",
            "--config",
            qual_config.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            &path(side.into()),
        ]);
    }
    for side in ["ia", "ib"] {
        run(&[
            "importance",
            "--model",
            &path("ea/models/gender_desktop_web.model.json".into()),
            "--out",
            &path(side.into()),
        ]);
    }

    let mut compared = 0usize;
    for (a, b) in [
        ("a", "b"),
        ("sa", "sb"),
        ("ea", "eb"),
        ("aa", "ab"),
        ("qa", "qb"),
        ("ia", "ib"),
    ] {
        compared += assert_dirs_identical(&root.join(a), &root.join(b));
    }
    std::fs::remove_dir_all(&root).ok();
    println!(
        "[PASS] criterion 9: reruns of all 6 subcommands byte-identical across {compared} files (timing excluded)"
    );
}

/// Recursively compare two output directories byte for byte; manifests are
/// compared with `timing_ms` (and the worker count) masked out.
fn assert_dirs_identical(a: &std::path::Path, b: &std::path::Path) -> usize {
    let mut names_a: Vec<_> = walk(a);
    let mut names_b: Vec<_> = walk(b);
    names_a.sort();
    names_b.sort();
    assert_eq!(names_a, names_b, "{a:?} vs {b:?} file sets differ");
    let mut compared = 0;
    for rel in names_a {
        let bytes_a = std::fs::read(a.join(&rel)).unwrap();
        let bytes_b = std::fs::read(b.join(&rel)).unwrap();
        if rel.ends_with("manifest.json") {
            let mut ja: serde_json::Value = serde_json::from_slice(&bytes_a).unwrap();
            let mut jb: serde_json::Value = serde_json::from_slice(&bytes_b).unwrap();
            for j in [&mut ja, &mut jb] {
                j["timing_ms"] = 0.into();
                j["jobs"] = 0.into();
            }
            assert_eq!(ja, jb, "manifest {rel} differs beyond timing");
        } else {
            assert_eq!(bytes_a, bytes_b, "file {rel} differs between reruns");
        }
        compared += 1;
    }
    compared
}

fn walk(dir: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(at) = stack.pop() {
        for entry in std::fs::read_dir(&at).unwrap() {
            let entry = entry.unwrap();
            if entry.file_type().unwrap().is_dir() {
                stack.push(entry.path());
            } else {
                out.push(
                    entry
                        .path()
                        .strip_prefix(dir)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
    }
    out
}

#[test]
fn criterion_10_psychometrics_and_binary_reduction() {
    // Adjusted value scores sum to zero per respondent.
    let keying = Keying::default_v1();
    let mut rng = rng_from(0xACCA);
    for _ in 0..500 {
        let items: Vec<u8> = (0..keying.n_pvq_items())
            .map(|_| rng.random_range(1..=7u8))
            .collect();
        let scores = score_pvq(&items, &keying).unwrap();
        let total: f64 = scores.adjusted.iter().sum();
        assert!(total.abs() < 1e-12, "adjusted sum {total:e}");
    }

    // Median binarization: class imbalance bounded by the tie count.
    for _ in 0..200 {
        let n = rng.random_range(3..400);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let bin = binarize_at_median(&scores).unwrap();
        let high = bin
            .labels
            .iter()
            .filter(|&&l| l == BinaryLabel::High)
            .count();
        let low = bin.labels.len() - high;
        assert!(
            (high as i64 - low as i64).unsigned_abs() as usize <= bin.tie_count,
            "imbalance {} vs ties {}",
            (high as i64 - low as i64).abs(),
            bin.tie_count
        );
    }

    // One-against-all on a two-class target collapses to the binary path.
    let spec = planted_spec(4.0, 0x10AD);
    let (cohort, y, class_labels, _) = ingest_planted(&spec, 30);
    let x = build_matrix(&cohort, Modality::DesktopWeb).unwrap();
    let grid = HyperGrid {
        n_trees: vec![40],
        max_features_multiplier: vec![1.0],
        max_depth: vec![7],
        criterion: vec![Criterion::Gini],
        min_samples_leaf: 5,
    };
    let cfg = CvConfig::default();
    let direct = nested_cv(&x, &y, &class_labels, &grid, &cfg, 0xD1CE).unwrap();
    let ovr = one_vs_all_eval(&x, &y, &class_labels, &grid, &cfg, 0xD1CE).unwrap();
    assert!((direct.mean - ovr.mean).abs() < 1e-12);
    for (df, of) in direct.folds.iter().zip(&ovr.folds) {
        assert!((df.weighted_auroc.unwrap() - of.weighted_auroc.unwrap()).abs() < 1e-12);
    }
    println!(
        "[PASS] criterion 10: PVQ centering sums ~0, median imbalance <= ties, 2-class one-vs-all == binary ({:.4})",
        direct.mean
    );
}

#[test]
fn criterion_11_outer_folds_partition_every_row() {
    let mut rng = rng_from(0xACCB);
    for _ in 0..50 {
        let n = rng.random_range(25..400);
        let n_classes = rng.random_range(2..5u32);
        let mut y: Vec<u32> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        for c in 0..n_classes {
            // Every class present at least twice.
            y[2 * c as usize] = c;
            y[2 * c as usize + 1] = c;
        }
        let folds = stratified_kfold(&y, 5, rng.random_range(0..u64::MAX)).unwrap();
        let mut seen = vec![false; n];
        for fold in &folds {
            for &row in fold {
                assert!(!seen[row], "row {row} in two test folds");
                seen[row] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "folds must cover every row");
    }
    println!("[PASS] criterion 11: outer test folds partition the rows on 50 random instances");
}
