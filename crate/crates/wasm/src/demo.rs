//! Demo computations behind the wasm exports: small synthetic cohorts,
//! a trained forest with its ROC curve and importances, and the ranked vs
//! random feature-selection comparison. Pure functions, host-testable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use morallens::eval::auroc;
use morallens::experiments::{run_quality_study, QualityStudyPlan, View};
use morallens::forest::{feature_importances, train_forest, HyperParams};
use morallens::ingest::{Cohort, Modality};
use morallens::matrix::{build_matrix, SelectionMode};
use morallens::psych::{assemble_targets, Keying, TargetTable};
use morallens::rng::{derive_seed, rng_from};
use morallens::synth::{
    bayes_reference_auroc, generate_cohort, GeneratorSpec, ModalitySpec, SignalSpec,
    TargetMarginals,
};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoParams {
    pub n_users: usize,
    pub vocab_size: usize,
    pub signal_items: usize,
    pub multiplier: f64,
    pub activity_log_mean: f64,
    pub activity_log_sd: f64,
    pub n_trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            n_users: 600,
            vocab_size: 300,
            signal_items: 10,
            multiplier: 4.0,
            activity_log_mean: 3.6,
            activity_log_sd: 0.8,
            n_trees: 50,
            max_depth: 7,
            seed: 42,
        }
    }
}

impl DemoParams {
    /// Keep the browser responsive.
    fn clamped(&self) -> Self {
        Self {
            n_users: self.n_users.clamp(50, 3000),
            vocab_size: self.vocab_size.clamp(40, 800),
            signal_items: self.signal_items.clamp(1, 30),
            multiplier: self.multiplier.clamp(1.0, 64.0),
            activity_log_mean: self.activity_log_mean.clamp(1.5, 5.5),
            activity_log_sd: self.activity_log_sd.clamp(0.2, 1.5),
            n_trees: self.n_trees.clamp(5, 200),
            max_depth: self.max_depth.clamp(2, 15),
            seed: self.seed,
        }
    }

    fn spec(&self) -> GeneratorSpec {
        let first = self.vocab_size / 5; // mid-popularity signal items
        GeneratorSpec {
            n_users: self.n_users,
            seed: self.seed,
            days: 28,
            dispersion: 1.2,
            modalities: vec![ModalitySpec {
                modality: Modality::DesktopWeb,
                vocab_size: self.vocab_size,
                popularity_exponent: 1.05,
                activity_log_mean: self.activity_log_mean,
                activity_log_sd: self.activity_log_sd,
            }],
            targets: vec![TargetMarginals {
                attribute: "gender".into(),
                marginals: BTreeMap::from([("Female".into(), 0.5), ("Male".into(), 0.5)]),
            }],
            signals: vec![SignalSpec {
                target: "gender".into(),
                class: "Female".into(),
                modality: Modality::DesktopWeb,
                item_indices: (first..first + self.signal_items).collect(),
                multiplier: self.multiplier,
            }],
            bayes_samples: 0,
        }
    }
}

fn make_cohort(spec: &GeneratorSpec) -> Result<(Cohort, TargetTable), String> {
    let keying = Keying::default_v1();
    let bundle = generate_cohort(spec, &keying).map_err(|e| e.to_string())?;
    let (cohort, _) = Cohort::assemble(
        bundle.events["desktop_web"].clone(),
        bundle.surveys,
        1,
        &[Modality::DesktopWeb],
    )
    .map_err(|e| e.to_string())?;
    let targets =
        assemble_targets(cohort.users(), cohort.surveys(), &keying).map_err(|e| e.to_string())?;
    Ok((cohort, targets))
}

fn gender_rows(
    cohort: &Cohort,
    targets: &TargetTable,
) -> (morallens::matrix::SparseMatrix, Vec<u32>, Vec<String>) {
    let x = build_matrix(cohort, Modality::DesktopWeb).expect("desktop events exist");
    let t = targets.target("gender").expect("gender target");
    let (rows, y) = targets.labelled_rows(t);
    let labels = targets.targets[t].labels.clone();
    (x.select_rows(&rows), y, labels)
}

// ---------------------------------------------------------------------------
// Operation 1: cohort preview
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct PreviewOut {
    pub n_users: usize,
    pub vocab_size: usize,
    /// Unique-item histogram: (bin upper edge, user count), log-spaced.
    pub activity_histogram: Vec<(usize, usize)>,
    pub mean_unique_items: f64,
    pub max_unique_items: usize,
    /// Share of users above the standard activity filter.
    pub retained_at_30: f64,
    pub female_share: f64,
    /// Separability ceiling of the planted signal (Monte-Carlo).
    pub bayes_ceiling: f64,
    pub signal_items: Vec<String>,
}

pub fn preview(params: &DemoParams) -> Result<PreviewOut, String> {
    let p = params.clamped();
    let spec = p.spec();
    let (cohort, targets) = make_cohort(&spec)?;
    let (x, y, _) = gender_rows(&cohort, &targets);

    let activity: Vec<usize> = (0..x.n_rows()).map(|r| x.row_nnz(r)).collect();
    let max_act = activity.iter().copied().max().unwrap_or(1);
    let mut edges = Vec::new();
    let mut edge = 4usize;
    while edge < max_act {
        edges.push(edge);
        edge = (edge * 3 / 2).max(edge + 1);
    }
    edges.push(max_act);
    let mut histogram = Vec::with_capacity(edges.len());
    let mut prev = 0usize;
    for &e in &edges {
        let count = activity.iter().filter(|&&a| a > prev && a <= e).count();
        histogram.push((e, count));
        prev = e;
    }

    let female = y.iter().filter(|&&l| l == 0).count();
    let retained = activity.iter().filter(|&&a| a >= 30).count();
    Ok(PreviewOut {
        n_users: x.n_rows(),
        vocab_size: spec.modalities[0].vocab_size,
        activity_histogram: histogram,
        mean_unique_items: activity.iter().sum::<usize>() as f64 / activity.len() as f64,
        max_unique_items: max_act,
        retained_at_30: retained as f64 / activity.len() as f64,
        female_share: female as f64 / y.len() as f64,
        bayes_ceiling: bayes_reference_auroc(&spec, "gender", 20_000),
        signal_items: spec.signals[0]
            .item_indices
            .iter()
            .map(|&i| morallens::synth::item_name(Modality::DesktopWeb, i))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Operation 2: train a forest, score the held-out fifth
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct EvalOut {
    pub auroc: f64,
    pub bayes_ceiling: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// (FPR, TPR) points of the held-out ROC curve.
    pub roc_curve: Vec<(f64, f64)>,
    /// (item key, importance, is planted signal), descending.
    pub top_importances: Vec<(String, f64, bool)>,
}

pub fn train_and_evaluate(params: &DemoParams) -> Result<EvalOut, String> {
    let p = params.clamped();
    let spec = p.spec();
    let (cohort, targets) = make_cohort(&spec)?;
    let (x, y, class_labels) = gender_rows(&cohort, &targets);

    // Seeded 80/20 split.
    let mut order: Vec<usize> = (0..x.n_rows()).collect();
    let mut rng = rng_from(derive_seed(p.seed, 0x55, 0));
    use rand::Rng as _;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let cut = (order.len() * 4) / 5;
    let (train_rows, test_rows) = order.split_at(cut);
    let mut train_rows = train_rows.to_vec();
    let mut test_rows = test_rows.to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();

    let train_x = {
        let support = x.column_support(&train_rows);
        x.select_rows(&train_rows).restrict_columns(&support)
    };
    let train_y: Vec<u32> = train_rows.iter().map(|&r| y[r]).collect();
    let test_x = x.select_rows(&test_rows);
    let test_y: Vec<u32> = test_rows.iter().map(|&r| y[r]).collect();

    let model = train_forest(
        &train_x,
        &train_y,
        &class_labels,
        &HyperParams {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            seed: derive_seed(p.seed, 0xF0, 0),
            ..HyperParams::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let probs = model.predict_proba_mapped(&test_x);
    let scores = model.class_scores(&probs, 1);
    let labels: Vec<bool> = test_y.iter().map(|&l| l == 1).collect();
    let roc = auroc(&scores, &labels).map_err(|e| e.to_string())?;

    let planted: Vec<String> = spec.signals[0]
        .item_indices
        .iter()
        .map(|&i| {
            format!(
                "web:{}",
                morallens::synth::item_name(Modality::DesktopWeb, i)
            )
        })
        .collect();
    let top_importances: Vec<(String, f64, bool)> = feature_importances(&model)
        .into_iter()
        .take(15)
        .map(|(key, imp)| {
            let is_signal = planted.contains(&key);
            (key, imp, is_signal)
        })
        .collect();

    Ok(EvalOut {
        auroc: roc.auroc,
        bayes_ceiling: bayes_reference_auroc(&spec, "gender", 20_000),
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        roc_curve: roc.curve,
        top_importances,
    })
}

// ---------------------------------------------------------------------------
// Operation 3: ranked vs random selection curves
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct SelectionOut {
    pub levels: Vec<usize>,
    /// (k, mean AUROC, std) for the top-k-by-frequency regime.
    pub ranked: Vec<(usize, f64, f64)>,
    /// Same for seeded random selection.
    pub random: Vec<(usize, f64, f64)>,
    pub n_active: usize,
    pub active_threshold: usize,
}

pub fn selection_curves(params: &DemoParams) -> Result<SelectionOut, String> {
    let p = params.clamped();
    let spec = p.spec();
    let (cohort, targets) = make_cohort(&spec)?;

    // Scale the active-user bar to the configured activity so the demo works
    // at any slider setting.
    let active_threshold = (p.activity_log_mean.exp() * 0.8).round().max(5.0) as usize;
    let level_max = (active_threshold as f64 * 0.9).round().max(4.0) as usize;
    let plan = QualityStudyPlan {
        active_threshold,
        levels: 8,
        level_max,
        folds: 3,
        params: HyperParams {
            n_trees: p.n_trees.min(60),
            max_depth: p.max_depth,
            ..HyperParams::default()
        },
        ..QualityStudyPlan::default()
    };
    let report = run_quality_study(
        &cohort,
        &targets,
        &["gender".to_string()],
        View::DesktopWeb,
        &plan,
        p.seed,
        1,
    )
    .map_err(|e| e.to_string())?;
    Ok(SelectionOut {
        levels: plan.level_values(),
        ranked: report.curve("gender", SelectionMode::TopKByFrequency),
        random: report.curve("gender", SelectionMode::RandomK),
        n_active: report.n_active,
        active_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preview_reports_histogram_and_ceiling() {
        let out = preview(&DemoParams::default()).unwrap();
        assert_eq!(out.n_users, 600);
        let total: usize = out.activity_histogram.iter().map(|(_, c)| c).sum();
        assert_eq!(total, out.n_users, "histogram covers every user");
        assert!(out.bayes_ceiling > 0.7, "planted demo signal is visible");
        assert!((0.0..=1.0).contains(&out.female_share));
    }

    #[test]
    fn evaluation_beats_chance_and_stays_under_ceiling() {
        let out = train_and_evaluate(&DemoParams::default()).unwrap();
        assert!(out.auroc > 0.7, "demo AUROC {}", out.auroc);
        assert!(out.auroc <= out.bayes_ceiling + 0.05);
        assert_eq!(*out.roc_curve.first().unwrap(), (0.0, 0.0));
        assert_eq!(*out.roc_curve.last().unwrap(), (1.0, 1.0));
        assert!(out.top_importances.iter().any(|(_, _, planted)| *planted));
    }

    #[test]
    fn selection_curves_have_the_requested_shape() {
        let params = DemoParams {
            n_users: 300,
            n_trees: 20,
            ..DemoParams::default()
        };
        let out = selection_curves(&params).unwrap();
        assert_eq!(out.ranked.len(), 8);
        assert_eq!(out.random.len(), 8);
        assert!(out.n_active > 0);
    }

    #[test]
    fn params_parse_from_partial_json() {
        let p: DemoParams = serde_json::from_str(r#"{"n_users": 250, "seed": 7}"#).unwrap();
        assert_eq!(p.n_users, 250);
        assert_eq!(p.multiplier, 4.0);
    }
}
