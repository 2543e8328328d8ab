//! Experiment drivers: the attribute x modality table, the activity-bin
//! sensitivity study, and the information-quality study.
//!
//! Every driver is a pure function of (cohort, config, seed). Work units own
//! derived seeds and aggregate in plan order, so reports are byte-stable
//! under any worker count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    self, auroc, nested_cv, one_vs_all_eval, weighted_auroc, ClassAuroc, CvConfig, CvReport,
    EvalError,
};
use crate::forest::{train_forest_jobs, ForestModel, HyperGrid, HyperParams};
use crate::ingest::{Cohort, Modality};
use crate::jobs;
use crate::matrix::{build_matrix, MatrixError, SelectionMode, SelectionPlan, SparseMatrix};
use crate::psych::TargetTable;
use crate::rng::{derive_seed, derive_seed2, rng_from, stream};
use crate::stats;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("target {0:?} not found in the target table")]
    UnknownTarget(String),
    #[error("target {0:?} is untrainable (degenerate label distribution)")]
    UntrainableTarget(String),
    #[error("activity study needs a binary target, {0:?} has {1} classes")]
    NonBinaryTarget(String, usize),
    #[error(
        "training bin {bin} cannot supply {needed} samples of class {class:?} (has {available})"
    )]
    UnfillableCap {
        bin: usize,
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("no user reaches the active threshold of {0} unique items")]
    NoActiveUsers(usize),
    #[error("bin edges must be strictly increasing")]
    BadEdges,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The four predictor views of the attribute table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    DesktopWeb,
    MobileWeb,
    MobileApps,
    FusedMobile,
}

impl View {
    pub const ALL: [View; 4] = [
        View::DesktopWeb,
        View::MobileWeb,
        View::MobileApps,
        View::FusedMobile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            View::DesktopWeb => "desktop_web",
            View::MobileWeb => "mobile_web",
            View::MobileApps => "mobile_apps",
            View::FusedMobile => "fused_mobile",
        }
    }
}

/// One cohort plus its scored targets.
pub struct ViewData {
    pub cohort: Cohort,
    pub targets: TargetTable,
}

/// The ingested datasets an experiment can draw on. Desktop and mobile are
/// separate cohorts with separate target tables (medians are
/// cohort-relative).
pub struct StudyData {
    pub desktop: Option<ViewData>,
    pub mobile: Option<ViewData>,
}

impl StudyData {
    fn view_source(&self, view: View) -> Option<&ViewData> {
        match view {
            View::DesktopWeb => self.desktop.as_ref(),
            _ => self.mobile.as_ref(),
        }
    }
}

/// Build the feature matrix for a view.
pub fn view_matrix(cohort: &Cohort, view: View) -> Result<SparseMatrix, MatrixError> {
    match view {
        View::DesktopWeb => build_matrix(cohort, Modality::DesktopWeb),
        View::MobileWeb => build_matrix(cohort, Modality::MobileWeb),
        View::MobileApps => build_matrix(cohort, Modality::MobileApp),
        View::FusedMobile => {
            let web = build_matrix(cohort, Modality::MobileWeb)?;
            let apps = build_matrix(cohort, Modality::MobileApp)?;
            SparseMatrix::fuse_early(&web, &apps)
        }
    }
}

// ---------------------------------------------------------------------------
// Attribute table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub target: String,
    pub display: String,
    pub view: View,
    pub report: Option<CvReport>,
    pub error: Option<String>,
    /// Mirrors the bold marker: best mean among the row's evaluable cells.
    pub best_in_row: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributeTableReport {
    pub cells: Vec<CellReport>,
}

impl AttributeTableReport {
    /// Table-shaped summary: one row per target, one mean (std) column per
    /// view, best cell starred.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("target");
        for view in View::ALL {
            out.push_str(&format!(",{}", view.name()));
        }
        out.push('\n');
        let mut by_target: Vec<&str> = Vec::new();
        for cell in &self.cells {
            if !by_target.contains(&cell.target.as_str()) {
                by_target.push(&cell.target);
            }
        }
        for target in by_target {
            out.push_str(target);
            for view in View::ALL {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.target == target && c.view == view);
                match cell {
                    Some(c) => match (&c.report, &c.error) {
                        (Some(r), _) => {
                            let star = if c.best_in_row { "*" } else { "" };
                            out.push_str(&format!(",{:.4} ({:.4}){star}", r.mean, r.std));
                        }
                        (None, Some(e)) => out.push_str(&format!(",error: {e}")),
                        (None, None) => out.push(','),
                    },
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Long-form rows: target, modality, fold, auroc, chosen_params, plus
    /// mean/std summary rows per cell.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("target,modality,fold,auroc,chosen_params\n");
        for cell in &self.cells {
            let Some(report) = &cell.report else { continue };
            for fold in &report.folds {
                let auroc_text = fold
                    .weighted_auroc
                    .map(|a| format!("{a:.6}"))
                    .unwrap_or_else(|| "unevaluable".into());
                let chosen = fold
                    .chosen
                    .iter()
                    .map(describe_params)
                    .collect::<Vec<_>>()
                    .join(" | ");
                out.push_str(&format!(
                    "{},{},{},{},\"{}\"\n",
                    cell.target,
                    cell.view.name(),
                    fold.fold,
                    auroc_text,
                    chosen
                ));
            }
            out.push_str(&format!(
                "{},{},mean,{:.6},\n{},{},std,{:.6},\n",
                cell.target,
                cell.view.name(),
                report.mean,
                cell.target,
                cell.view.name(),
                report.std
            ));
        }
        out
    }
}

pub fn describe_params(p: &HyperParams) -> String {
    format!(
        "trees={} mult={} depth={} leaf={} criterion={:?}",
        p.n_trees, p.max_features_multiplier, p.max_depth, p.min_samples_leaf, p.criterion
    )
}

/// Evaluate one target on one prepared matrix via nested CV (binary) or
/// one-against-all (multi-class).
fn evaluate_target_on_matrix(
    x: &SparseMatrix,
    targets: &TargetTable,
    target_index: usize,
    grid: &HyperGrid,
    cv: &CvConfig,
    seed: u64,
) -> Result<CvReport, ExperimentError> {
    let def = &targets.targets[target_index];
    if def.untrainable {
        return Err(ExperimentError::UntrainableTarget(def.name.clone()));
    }
    let (rows, y) = targets.labelled_rows(target_index);
    let sub = x.select_rows(&rows);
    let report = if def.labels.len() == 2 {
        nested_cv(&sub, &y, &def.labels, grid, cv, seed)?
    } else {
        one_vs_all_eval(&sub, &y, &def.labels, grid, cv, seed)?
    };
    Ok(report)
}

/// One cross-validated model per (target, view); cell failures are recorded
/// and the run continues. Absent modalities yield absent cells.
pub fn run_attribute_table(
    data: &StudyData,
    target_filter: Option<&[String]>,
    grid: &HyperGrid,
    cv: &CvConfig,
    seed: u64,
) -> AttributeTableReport {
    // Target list from whichever cohort is present; names are identical.
    let reference = data
        .desktop
        .as_ref()
        .or(data.mobile.as_ref())
        .expect("at least one cohort");
    let wanted: Vec<String> = match target_filter {
        Some(names) => names.to_vec(),
        None => reference
            .targets
            .targets
            .iter()
            .map(|t| t.name.clone())
            .collect(),
    };

    let mut cells = Vec::new();
    for (ti, target) in wanted.iter().enumerate() {
        let mut row: Vec<CellReport> = Vec::new();
        for (vi, view) in View::ALL.into_iter().enumerate() {
            let Some(source) = data.view_source(view) else {
                continue; // modality absent: cell omitted from the report
            };
            let cell_seed = derive_seed2(seed, stream::GRID_CELL, ti as u64, vi as u64);
            let Some(target_index) = source.targets.target(target) else {
                row.push(CellReport {
                    target: target.clone(),
                    display: target.clone(),
                    view,
                    report: None,
                    error: Some("target missing from this cohort".into()),
                    best_in_row: false,
                });
                continue;
            };
            let display = source.targets.targets[target_index].display.clone();
            let outcome = view_matrix(&source.cohort, view)
                .map_err(ExperimentError::from)
                .and_then(|x| {
                    evaluate_target_on_matrix(
                        &x,
                        &source.targets,
                        target_index,
                        grid,
                        cv,
                        cell_seed,
                    )
                });
            row.push(match outcome {
                Ok(mut report) => {
                    report.target = target.clone();
                    report.modality = view.name().to_string();
                    CellReport {
                        target: target.clone(),
                        display,
                        view,
                        report: Some(report),
                        error: None,
                        best_in_row: false,
                    }
                }
                Err(e) => CellReport {
                    target: target.clone(),
                    display,
                    view,
                    report: None,
                    error: Some(e.to_string()),
                    best_in_row: false,
                },
            });
        }
        // Flag the best evaluable cell of the row.
        if let Some((best, _)) = row
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.report.as_ref().map(|r| (i, r.mean)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite mean"))
        {
            row[best].best_in_row = true;
        }
        cells.extend(row);
    }
    AttributeTableReport { cells }
}

// ---------------------------------------------------------------------------
// Shared pieces for the two sensitivity studies
// ---------------------------------------------------------------------------

/// Stratified 80/20-style split. Returns (train rows, test rows) as indices
/// into `y`.
fn stratified_split(y: &[u32], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_classes = y.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &label) in y.iter().enumerate() {
        by_class[label as usize].push(i);
    }
    let mut rng = rng_from(seed);
    use rand::Rng;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in &mut by_class {
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        let cut = (members.len() as f64 * train_fraction).round() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    assert!(
        train.iter().all(|r| !test.contains(r)),
        "train/test isolation"
    );
    (train, test)
}

/// Train one fixed-parameter classifier set on (x, y): a single forest for
/// binary targets, one forest per class otherwise.
fn train_fixed(
    x: &SparseMatrix,
    y: &[u32],
    labels: &[String],
    params: &HyperParams,
    workers: usize,
) -> Result<Vec<ForestModel>, EvalError> {
    if labels.len() == 2 {
        Ok(vec![train_forest_jobs(x, y, labels, params, workers)?])
    } else {
        let mut models = Vec::with_capacity(labels.len());
        for (c, class) in labels.iter().enumerate() {
            let yc: Vec<u32> = y.iter().map(|&l| (l == c as u32) as u32).collect();
            let names = vec![format!("not:{class}"), class.clone()];
            let params_c = params.with_seed(derive_seed(params.seed, stream::CLASS, c as u64));
            models.push(train_forest_jobs(x, &yc, &names, &params_c, workers)?);
        }
        Ok(models)
    }
}

/// Weighted AUROC of a fixed classifier set on a test matrix. `None` when no
/// class is evaluable.
fn score_fixed(
    models: &[ForestModel],
    test_x: &SparseMatrix,
    test_y: &[u32],
    n_classes: usize,
) -> Option<f64> {
    if models.len() == 1 {
        let probs = models[0].predict_proba_mapped(test_x);
        let scores = models[0].class_scores(&probs, 1);
        let labels: Vec<bool> = test_y.iter().map(|&l| l == 1).collect();
        return auroc(&scores, &labels).ok().map(|r| r.auroc);
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for (c, model) in models.iter().enumerate() {
        let labels: Vec<bool> = test_y.iter().map(|&l| l == c as u32).collect();
        let prevalence = labels.iter().filter(|&&l| l).count() as f64 / labels.len().max(1) as f64;
        let probs = model.predict_proba_mapped(test_x);
        let scores = model.class_scores(&probs, 1);
        per_class.push(ClassAuroc {
            class: model.classes[1].clone(),
            prevalence,
            auroc: auroc(&scores, &labels).ok().map(|r| r.auroc),
        });
    }
    weighted_auroc(&per_class).ok()
}

// ---------------------------------------------------------------------------
// Activity-bin study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivityBinPlan {
    pub n_train_bins: usize,
    pub n_test_bins: usize,
    pub train_fraction: f64,
    /// Upper edge of the first training bin in unique items.
    pub first_edge: usize,
    /// Explicit training-bin edges (overrides the log-spaced default).
    #[serde(default)]
    pub edges_override: Option<Vec<usize>>,
    /// Per-class training caps; computed automatically when empty.
    #[serde(default)]
    pub caps: BTreeMap<String, usize>,
    pub folds: usize,
    /// Fixed configuration used when `search` is unset.
    pub params: HyperParams,
    /// Optional per-bin grid search (inner cross-validation on the capped
    /// sample picks the configuration).
    #[serde(default)]
    pub search: Option<HyperGrid>,
}

impl Default for ActivityBinPlan {
    fn default() -> Self {
        Self {
            n_train_bins: 20,
            n_test_bins: 100,
            train_fraction: 0.8,
            first_edge: 19,
            edges_override: None,
            caps: BTreeMap::new(),
            folds: 5,
            params: HyperParams::default(),
            search: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivityCurvePoint {
    pub train_bin: usize,
    pub train_edge: usize,
    pub test_bin: usize,
    pub test_edge: usize,
    pub n_test: usize,
    pub mean_auroc: Option<f64>,
    pub std_auroc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelProportion {
    pub bin: usize,
    pub edge: usize,
    pub n: usize,
    pub class_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivityStudyReport {
    pub target: String,
    pub modality: String,
    pub train_edges: Vec<usize>,
    pub test_edges: Vec<usize>,
    pub caps: BTreeMap<String, usize>,
    pub train_size: usize,
    pub points: Vec<ActivityCurvePoint>,
    pub train_proportions: Vec<LabelProportion>,
    pub test_proportions: Vec<LabelProportion>,
}

impl ActivityStudyReport {
    /// Mean AUROC over test bins with index >= `from_bin` (1-based), for one
    /// training bin.
    pub fn mean_over_test_bins(&self, train_bin: usize, from_bin: usize) -> f64 {
        let values: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.train_bin == train_bin && p.test_bin >= from_bin)
            .filter_map(|p| p.mean_auroc)
            .collect();
        stats::mean(&values)
    }

    /// Std of the mean-AUROC curve across a 1-based test-bin index range.
    pub fn curve_std_over_test_bins(&self, train_bin: usize, lo: usize, hi: usize) -> f64 {
        let values: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.train_bin == train_bin && p.test_bin >= lo && p.test_bin <= hi)
            .filter_map(|p| p.mean_auroc)
            .collect();
        stats::std_dev(&values)
    }

    /// Plot-ready rows (x = test edge, y = mean, yerr = std) for one curve.
    pub fn curve_rows(&self, train_bin: usize) -> String {
        let mut out = String::from("test_edge mean std\n");
        for p in self.points.iter().filter(|p| p.train_bin == train_bin) {
            if let (Some(m), Some(s)) = (p.mean_auroc, p.std_auroc) {
                out.push_str(&format!("{} {m:.6} {s:.6}\n", p.test_edge));
            }
        }
        out
    }
}

fn log_spaced_edges(first: usize, max: usize, bins: usize) -> Result<Vec<usize>, ExperimentError> {
    let first = first.max(1).min(max);
    let mut edges = Vec::with_capacity(bins);
    if bins == 1 {
        return Ok(vec![max]);
    }
    let ratio = (max as f64 / first as f64).max(1.0);
    for b in 0..bins {
        let raw = first as f64 * ratio.powf(b as f64 / (bins - 1) as f64);
        edges.push(raw.round() as usize);
    }
    // Force strict increase after rounding.
    for i in 1..edges.len() {
        if edges[i] <= edges[i - 1] {
            edges[i] = edges[i - 1] + 1;
        }
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ExperimentError::BadEdges);
    }
    Ok(edges)
}

/// Train one model per cumulative activity bin (users with at most the
/// bin-edge unique items), each on a class-capped sample of identical size
/// and composition, and score every model against cumulative test-activity
/// bins.
pub fn run_activity_bin_study(
    cohort: &Cohort,
    targets: &TargetTable,
    target_name: &str,
    view: View,
    plan: &ActivityBinPlan,
    seed: u64,
    workers: usize,
) -> Result<ActivityStudyReport, ExperimentError> {
    let target_index = targets
        .target(target_name)
        .ok_or_else(|| ExperimentError::UnknownTarget(target_name.to_string()))?;
    let def = &targets.targets[target_index];
    if def.labels.len() != 2 {
        return Err(ExperimentError::NonBinaryTarget(
            target_name.to_string(),
            def.labels.len(),
        ));
    }
    if def.untrainable {
        return Err(ExperimentError::UntrainableTarget(target_name.to_string()));
    }

    let full = view_matrix(cohort, view)?;
    let (rows, y) = targets.labelled_rows(target_index);
    let x = full.select_rows(&rows);
    let activity: Vec<usize> = (0..x.n_rows()).map(|r| x.row_nnz(r)).collect();

    let (train_rows, test_rows) =
        stratified_split(&y, plan.train_fraction, derive_seed(seed, stream::SPLIT, 0));

    // Training-bin edges: log-spaced from the first edge to the maximum
    // observed training activity.
    let max_train_activity = train_rows.iter().map(|&r| activity[r]).max().unwrap_or(1);
    let min_train_activity = train_rows.iter().map(|&r| activity[r]).min().unwrap_or(1);
    let train_edges = match &plan.edges_override {
        Some(edges) => {
            if edges.windows(2).any(|w| w[1] <= w[0]) || edges.is_empty() {
                return Err(ExperimentError::BadEdges);
            }
            edges.clone()
        }
        None => log_spaced_edges(
            plan.first_edge.max(min_train_activity),
            max_train_activity,
            plan.n_train_bins,
        )?,
    };

    // Cumulative test bins: equal-width edges up to the maximum observed
    // test activity.
    let max_test_activity = test_rows.iter().map(|&r| activity[r]).max().unwrap_or(1);
    let test_edges: Vec<usize> = (1..=plan.n_test_bins)
        .map(|m| ((max_test_activity as f64) * m as f64 / plan.n_test_bins as f64).ceil() as usize)
        .map(|e| e.max(1))
        .collect();

    // Per-bin training pools (cumulative) and the class caps.
    let pools: Vec<Vec<usize>> = train_edges
        .iter()
        .map(|&edge| {
            train_rows
                .iter()
                .copied()
                .filter(|&r| activity[r] <= edge)
                .collect()
        })
        .collect();
    let class_count = |pool: &[usize], class: u32| pool.iter().filter(|&&r| y[r] == class).count();
    let mut caps: BTreeMap<String, usize> = plan.caps.clone();
    if caps.is_empty() {
        for (c, label) in def.labels.iter().enumerate() {
            let fillable = pools
                .iter()
                .map(|pool| class_count(pool, c as u32))
                .min()
                .unwrap_or(0);
            caps.insert(label.clone(), fillable);
        }
    }
    for (bin, pool) in pools.iter().enumerate() {
        for (c, label) in def.labels.iter().enumerate() {
            let available = class_count(pool, c as u32);
            let needed = caps[label];
            if needed == 0 || available < needed {
                return Err(ExperimentError::UnfillableCap {
                    bin: bin + 1,
                    class: label.clone(),
                    needed: needed.max(1),
                    available,
                });
            }
        }
    }
    let train_size: usize = caps.values().sum();

    let test_x = x.select_rows(&test_rows);
    let test_y: Vec<u32> = test_rows.iter().map(|&r| y[r]).collect();
    let test_activity: Vec<usize> = test_rows.iter().map(|&r| activity[r]).collect();

    // One job per training bin: cap-sample, 5-fold models, score all rows,
    // then slice the predictions into cumulative test bins.
    type BinResult = Result<(Vec<usize>, Vec<Vec<Option<f64>>>), ExperimentError>;
    let bin_results: Vec<BinResult> = jobs::run_indexed(train_edges.len(), workers, |bin| {
        let pool = &pools[bin];
        let mut rng = rng_from(derive_seed2(seed, stream::BIN_SAMPLE, bin as u64, 0));
        use rand::Rng;
        let mut sample: Vec<usize> = Vec::with_capacity(train_size);
        for (c, label) in def.labels.iter().enumerate() {
            let mut members: Vec<usize> =
                pool.iter().copied().filter(|&r| y[r] == c as u32).collect();
            let take = caps[label];
            for i in 0..take {
                let j = rng.random_range(i..members.len());
                members.swap(i, j);
            }
            sample.extend_from_slice(&members[..take]);
        }
        sample.sort_unstable();
        assert_eq!(sample.len(), train_size, "caps fix the training size");

        let sample_y: Vec<u32> = sample.iter().map(|&r| y[r]).collect();

        // Optional per-bin configuration search on the capped sample.
        let chosen = match &plan.search {
            None => plan.params.clone(),
            Some(grid) => {
                let inner = eval::stratified_kfold(
                    &sample_y,
                    plan.folds,
                    derive_seed2(seed, stream::GRID_CELL, bin as u64, 0),
                )?;
                let combos = grid.combinations();
                let mut best: Option<(usize, f64)> = None;
                for (ci, combo) in combos.iter().enumerate() {
                    let mut values = Vec::new();
                    for (g, held_out) in inner.iter().enumerate() {
                        let itrain: Vec<usize> = (0..sample.len())
                            .filter(|i| !held_out.contains(i))
                            .map(|i| sample[i])
                            .collect();
                        let ix_rows = x.select_rows(&itrain);
                        let support =
                            ix_rows.column_support(&(0..ix_rows.n_rows()).collect::<Vec<_>>());
                        let ix = ix_rows.restrict_columns(&support);
                        let iy: Vec<u32> = itrain.iter().map(|&r| y[r]).collect();
                        let params = combo.with_seed(derive_seed2(
                            seed,
                            stream::GRID_CELL,
                            bin as u64,
                            1 + (ci * inner.len() + g) as u64,
                        ));
                        let model = train_forest_jobs(&ix, &iy, &def.labels, &params, 1)
                            .map_err(EvalError::from)?;
                        let held_rows: Vec<usize> = held_out.iter().map(|&i| sample[i]).collect();
                        let hx = x.select_rows(&held_rows);
                        let probs = model.predict_proba_mapped(&hx);
                        let scores = model.class_scores(&probs, 1);
                        let labels: Vec<bool> = held_rows.iter().map(|&r| y[r] == 1).collect();
                        if let Ok(r) = auroc(&scores, &labels) {
                            values.push(r.auroc);
                        }
                    }
                    if !values.is_empty() {
                        let mean = stats::mean(&values);
                        if best.is_none_or(|(_, b)| mean > b) {
                            best = Some((ci, mean));
                        }
                    }
                }
                match best {
                    Some((ci, _)) => combos[ci].clone(),
                    None => plan.params.clone(),
                }
            }
        };

        let folds = eval::stratified_kfold(
            &sample_y,
            plan.folds,
            derive_seed2(seed, stream::BIN_SAMPLE, bin as u64, 1),
        )?;
        // Per fold-model AUROC per test bin.
        let mut per_fold: Vec<Vec<Option<f64>>> = Vec::with_capacity(folds.len());
        for (fold_index, held_out) in folds.iter().enumerate() {
            let fold_train: Vec<usize> = (0..sample.len())
                .filter(|i| !held_out.contains(i))
                .map(|i| sample[i])
                .collect();
            let fx_rows = x.select_rows(&fold_train);
            let support = fx_rows.column_support(&(0..fx_rows.n_rows()).collect::<Vec<_>>());
            let fx = fx_rows.restrict_columns(&support);
            let fy: Vec<u32> = fold_train.iter().map(|&r| y[r]).collect();
            let params = chosen.with_seed(derive_seed2(
                seed,
                stream::TREE,
                bin as u64,
                fold_index as u64,
            ));
            let model =
                train_forest_jobs(&fx, &fy, &def.labels, &params, 1).map_err(EvalError::from)?;
            let probs = model.predict_proba_mapped(&test_x);
            let scores = model.class_scores(&probs, 1);
            let mut bin_aurocs = Vec::with_capacity(test_edges.len());
            for &edge in &test_edges {
                let subset: Vec<usize> = (0..test_y.len())
                    .filter(|&i| test_activity[i] <= edge)
                    .collect();
                let sub_scores: Vec<f64> = subset.iter().map(|&i| scores[i]).collect();
                let sub_labels: Vec<bool> = subset.iter().map(|&i| test_y[i] == 1).collect();
                bin_aurocs.push(auroc(&sub_scores, &sub_labels).ok().map(|r| r.auroc));
            }
            per_fold.push(bin_aurocs);
        }
        Ok((sample, per_fold))
    });

    let mut points = Vec::new();
    let mut train_proportions = Vec::new();
    for (bin, result) in bin_results.into_iter().enumerate() {
        let (sample, per_fold) = result?;
        let mut class_counts = BTreeMap::new();
        for &r in &sample {
            *class_counts
                .entry(def.labels[y[r] as usize].clone())
                .or_insert(0usize) += 1;
        }
        assert_eq!(
            class_counts,
            caps.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            "identical class composition in every training bin"
        );
        train_proportions.push(LabelProportion {
            bin: bin + 1,
            edge: train_edges[bin],
            n: sample.len(),
            class_counts,
        });
        for (m, &edge) in test_edges.iter().enumerate() {
            let fold_values: Vec<f64> = per_fold.iter().filter_map(|f| f[m]).collect();
            let n_test = (0..test_y.len())
                .filter(|&i| test_activity[i] <= edge)
                .count();
            points.push(ActivityCurvePoint {
                train_bin: bin + 1,
                train_edge: train_edges[bin],
                test_bin: m + 1,
                test_edge: edge,
                n_test,
                mean_auroc: if fold_values.is_empty() {
                    None
                } else {
                    Some(stats::mean(&fold_values))
                },
                std_auroc: if fold_values.is_empty() {
                    None
                } else {
                    Some(stats::std_dev(&fold_values))
                },
            });
        }
    }

    let test_proportions: Vec<LabelProportion> = test_edges
        .iter()
        .enumerate()
        .map(|(m, &edge)| {
            let mut class_counts = BTreeMap::new();
            let mut n = 0usize;
            for (i, &label) in test_y.iter().enumerate() {
                if test_activity[i] <= edge {
                    n += 1;
                    *class_counts
                        .entry(def.labels[label as usize].clone())
                        .or_insert(0usize) += 1;
                }
            }
            LabelProportion {
                bin: m + 1,
                edge,
                n,
                class_counts,
            }
        })
        .collect();

    Ok(ActivityStudyReport {
        target: target_name.to_string(),
        modality: view.name().to_string(),
        train_edges,
        test_edges,
        caps,
        train_size,
        points,
        train_proportions,
        test_proportions,
    })
}

// ---------------------------------------------------------------------------
// Quality study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityStudyPlan {
    /// Unique-item threshold defining an active user.
    pub active_threshold: usize,
    /// Number of feature-count levels, evenly spaced in [1, level_max].
    pub levels: usize,
    pub level_max: usize,
    pub train_fraction: f64,
    pub folds: usize,
    pub params: HyperParams,
}

impl Default for QualityStudyPlan {
    fn default() -> Self {
        Self {
            active_threshold: 200,
            levels: 20,
            level_max: 200,
            train_fraction: 0.8,
            folds: 5,
            params: HyperParams::default(),
        }
    }
}

impl QualityStudyPlan {
    pub fn level_values(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|i| {
                let raw = 1.0
                    + (self.level_max as f64 - 1.0) * i as f64 / (self.levels - 1).max(1) as f64;
                raw.round() as usize
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QualityCurvePoint {
    pub target: String,
    pub mode: SelectionMode,
    pub k: usize,
    pub mean_auroc: Option<f64>,
    pub std_auroc: Option<f64>,
    pub folds_evaluated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct QualityStudyReport {
    pub modality: String,
    pub active_threshold: usize,
    pub n_active: usize,
    pub points: Vec<QualityCurvePoint>,
}

impl QualityStudyReport {
    pub fn curve(&self, target: &str, mode: SelectionMode) -> Vec<(usize, f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.target == target && p.mode == mode)
            .filter_map(|p| Some((p.k, p.mean_auroc?, p.std_auroc?)))
            .collect()
    }

    /// Plot-ready rows (x = k, y = mean, yerr = std).
    pub fn curve_rows(&self, target: &str, mode: SelectionMode) -> String {
        let mut out = String::from("k mean std\n");
        for (k, mean, std) in self.curve(target, mode) {
            out.push_str(&format!("{k} {mean:.6} {std:.6}\n"));
        }
        out
    }
}

/// For each feature-count level and selection regime, train fold models on
/// the selected training columns of active users and score the held-out
/// active test set.
pub fn run_quality_study(
    cohort: &Cohort,
    targets: &TargetTable,
    target_names: &[String],
    view: View,
    plan: &QualityStudyPlan,
    seed: u64,
    workers: usize,
) -> Result<QualityStudyReport, ExperimentError> {
    let full = view_matrix(cohort, view)?;
    let active_rows: Vec<usize> = (0..full.n_rows())
        .filter(|&r| full.row_nnz(r) >= plan.active_threshold)
        .collect();
    if active_rows.is_empty() {
        return Err(ExperimentError::NoActiveUsers(plan.active_threshold));
    }

    let levels = plan.level_values();
    let modes = [SelectionMode::TopKByFrequency, SelectionMode::RandomK];
    let mut points = Vec::new();
    for (ti, target_name) in target_names.iter().enumerate() {
        let target_index = targets
            .target(target_name)
            .ok_or_else(|| ExperimentError::UnknownTarget(target_name.clone()))?;
        let def = &targets.targets[target_index];
        if def.untrainable {
            return Err(ExperimentError::UntrainableTarget(target_name.clone()));
        }
        // Active users that carry a label for this target.
        let labels_all = &targets.labels[target_index];
        let rows: Vec<usize> = active_rows
            .iter()
            .copied()
            .filter(|&r| labels_all[r].is_some())
            .collect();
        let y: Vec<u32> = rows
            .iter()
            .map(|&r| labels_all[r].unwrap() as u32)
            .collect();
        let x = full.select_rows(&rows);

        let (train_rows, test_rows) = stratified_split(
            &y,
            plan.train_fraction,
            derive_seed2(seed, stream::SPLIT, 1, ti as u64),
        );
        let train_x = x.select_rows(&train_rows);
        let train_y: Vec<u32> = train_rows.iter().map(|&r| y[r]).collect();
        let test_x = x.select_rows(&test_rows);
        let test_y: Vec<u32> = test_rows.iter().map(|&r| y[r]).collect();

        // (level, mode) plan points are independent jobs.
        let n_jobs = levels.len() * modes.len();
        type PointResult = Result<(Option<f64>, Option<f64>, usize), ExperimentError>;
        let results: Vec<PointResult> = jobs::run_indexed(n_jobs, workers, |job| {
            let li = job / modes.len();
            let mode = modes[job % modes.len()];
            let k = levels[li];
            let selection = SelectionPlan {
                mode,
                k,
                seed: derive_seed2(seed, stream::SELECTION, ti as u64, job as u64),
            };
            let selected = train_x.apply_selection(&selection);
            let folds = eval::stratified_kfold(
                &train_y,
                plan.folds,
                derive_seed2(seed, stream::LEVEL, ti as u64, job as u64),
            )?;
            let mut fold_values = Vec::with_capacity(folds.len());
            for (fi, held_out) in folds.iter().enumerate() {
                let fold_train: Vec<usize> = (0..train_y.len())
                    .filter(|i| !held_out.contains(i))
                    .collect();
                let fx_rows = selected.select_rows(&fold_train);
                let support = fx_rows.column_support(&(0..fx_rows.n_rows()).collect::<Vec<_>>());
                let fx = fx_rows.restrict_columns(&support);
                let fy: Vec<u32> = fold_train.iter().map(|&i| train_y[i]).collect();
                let params = plan.params.with_seed(derive_seed2(
                    seed,
                    stream::TREE,
                    ti as u64,
                    (job * plan.folds + fi) as u64,
                ));
                let models = train_fixed(&fx, &fy, &def.labels, &params, 1)
                    .map_err(ExperimentError::from)?;
                if let Some(value) = score_fixed(&models, &test_x, &test_y, def.labels.len()) {
                    fold_values.push(value);
                }
            }
            if fold_values.is_empty() {
                Ok((None, None, 0))
            } else {
                Ok((
                    Some(stats::mean(&fold_values)),
                    Some(stats::std_dev(&fold_values)),
                    fold_values.len(),
                ))
            }
        });

        for (job, result) in results.into_iter().enumerate() {
            let (mean, std, folds_evaluated) = result?;
            points.push(QualityCurvePoint {
                target: target_name.clone(),
                mode: modes[job % modes.len()],
                k: levels[job / modes.len()],
                mean_auroc: mean,
                std_auroc: std,
                folds_evaluated,
            });
        }
    }
    // One record per plan point per mode.
    debug_assert_eq!(
        points.len(),
        target_names.len() * levels.len() * modes.len()
    );
    // Emission order: by target, then level, then mode.
    points.sort_by(|a, b| {
        (&a.target, a.k, format!("{:?}", a.mode)).cmp(&(&b.target, b.k, format!("{:?}", b.mode)))
    });
    Ok(QualityStudyReport {
        modality: view.name().to_string(),
        active_threshold: plan.active_threshold,
        n_active: active_rows.len(),
        points,
    })
}
