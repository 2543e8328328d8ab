//! Rank-based AUROC, prevalence-weighted multi-class AUROC, and the nested
//! cross-validation / grid-search harness.
//!
//! AUROC is computed from midranks, so a tied High/Low pair contributes
//! exactly 0.5 and the result equals the brute-force pairwise probability to
//! the last bit. Cross-validation is stratified and fully seeded; outer test
//! folds partition the rows and every row is scored exactly once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{train_forest_jobs, ForestError, HyperGrid, HyperParams};
use crate::jobs;
use crate::matrix::SparseMatrix;
use crate::rng::{derive_seed, derive_seed2, rng_from, stream};
use crate::stats;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs both classes present in the labels")]
    SingleClassEvaluation,
    #[error("no class is evaluable; cannot form a weighted score")]
    NoEvaluableClass,
    #[error("nested cross-validation needs at least {need} rows, got {got}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("stratification impossible: {0}")]
    StratificationImpossible(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

// ---------------------------------------------------------------------------
// AUROC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocResult {
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// (FPR, TPR) points from (0,0) to (1,1), one per distinct score.
    pub curve: Vec<(f64, f64)>,
}

/// Rank-based AUROC of `scores` against binary `labels` (`true` = High).
/// Ties between a High and a Low score contribute 0.5.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<RocResult, EvalError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassEvaluation);
    }

    // Midrank computation over ascending scores. Doubled ranks stay integral,
    // so the U statistic is exact; the final division is canonicalized to the
    // high side, which makes the complement identities bit-exact (1 - x is an
    // exact operation for x in [1/2, 1]).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite score"));
    let mut rank_sum2 = 0u64; // twice the positive midrank sum
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j) as u64;
        for &at in &order[i..j] {
            if labels[at] {
                rank_sum2 += midrank2;
            }
        }
        i = j;
    }
    let u2 = rank_sum2 - (n_pos as u64) * (n_pos as u64 + 1); // twice the U statistic
    let p2 = 2 * (n_pos as u64) * (n_neg as u64);
    let auroc_value = if 2 * u2 >= p2 {
        u2 as f64 / p2 as f64
    } else {
        1.0 - ((p2 - u2) as f64 / p2 as f64)
    };

    // ROC curve: thresholds at distinct scores, descending.
    let mut curve = Vec::new();
    curve.push((0.0, 0.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 0 && scores[order[j - 1]] == scores[order[i - 1]] {
            if labels[order[j - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j -= 1;
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }

    Ok(RocResult {
        auroc: auroc_value,
        n_pos,
        n_neg,
        curve,
    })
}

/// Area under a piecewise-linear curve by the trapezoid rule.
pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// One class's outcome inside a multi-class evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAuroc {
    pub class: String,
    pub prevalence: f64,
    /// `None` when the class could not be evaluated (absent from the fold).
    pub auroc: Option<f64>,
}

/// Prevalence-weighted mean of per-class AUROCs. Unevaluable classes are
/// excluded and the remaining prevalences renormalized.
pub fn weighted_auroc(per_class: &[ClassAuroc]) -> Result<f64, EvalError> {
    let mut weight_total = 0.0;
    let mut acc = 0.0;
    for entry in per_class {
        if let Some(a) = entry.auroc {
            assert!(entry.prevalence >= 0.0, "negative prevalence");
            weight_total += entry.prevalence;
            acc += entry.prevalence * a;
        }
    }
    if weight_total <= 0.0 {
        return Err(EvalError::NoEvaluableClass);
    }
    Ok(acc / weight_total)
}

// ---------------------------------------------------------------------------
// Folding
// ---------------------------------------------------------------------------

/// Stratified k-fold: class proportions are preserved per fold. Returns the
/// test-index set of each fold; together they partition `0..y.len()`.
pub fn stratified_kfold(y: &[u32], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    assert!(k >= 2, "need at least 2 folds");
    if y.len() < k {
        return Err(EvalError::InsufficientSamples {
            got: y.len(),
            need: k,
        });
    }
    let n_classes = y.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &label) in y.iter().enumerate() {
        by_class[label as usize].push(i);
    }
    let mut rng = rng_from(seed);
    use rand::Rng;
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, members) in by_class.iter_mut().enumerate() {
        // Fisher-Yates shuffle, then deal round-robin with a per-class
        // offset so remainders do not pile onto fold 0.
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        for (i, &row) in members.iter().enumerate() {
            folds[(i + c) % k].push(row);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

fn assert_partition(folds: &[Vec<usize>], n: usize) {
    let mut seen = vec![false; n];
    for fold in folds {
        for &row in fold {
            assert!(!seen[row], "row {row} appears in two test folds");
            seen[row] = true;
        }
    }
    assert!(
        seen.iter().all(|&s| s),
        "outer test folds must cover every row"
    );
}

// ---------------------------------------------------------------------------
// Nested cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub outer_folds: usize,
    pub inner_folds: usize,
    /// Per-fold vocabularies: columns unseen in a fold's training rows are
    /// dropped from both sides (no information leak). Disable to keep the
    /// global column space.
    pub leak_free_vocab: bool,
    pub workers: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            outer_folds: 5,
            inner_folds: 5,
            leak_free_vocab: true,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub weighted_auroc: Option<f64>,
    pub per_class: Vec<ClassAuroc>,
    /// Winning hyperparameters, one entry per trained classifier (one for
    /// binary targets, one per class for one-against-all).
    pub chosen: Vec<HyperParams>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub target: String,
    pub modality: String,
    pub n_rows: usize,
    pub folds: Vec<FoldOutcome>,
    pub mean: f64,
    pub std: f64,
    pub flags: Vec<String>,
}

impl CvReport {
    fn from_folds(folds: Vec<FoldOutcome>, n_rows: usize, mut flags: Vec<String>) -> Self {
        let values: Vec<f64> = folds.iter().filter_map(|f| f.weighted_auroc).collect();
        if values.len() < folds.len() {
            flags.push(format!(
                "{} of {} folds were unevaluable",
                folds.len() - values.len(),
                folds.len()
            ));
        }
        CvReport {
            target: String::new(),
            modality: String::new(),
            n_rows,
            mean: stats::mean(&values),
            std: stats::std_dev(&values),
            folds,
            flags,
        }
    }
}

/// Column spaces for one fold: training rows, test rows, and (leak-free) the
/// columns supported by the training rows only.
fn fold_matrices(
    x: &SparseMatrix,
    train: &[usize],
    test: &[usize],
    leak_free: bool,
) -> (SparseMatrix, SparseMatrix) {
    if leak_free {
        let support = x.column_support(train);
        (
            x.select_rows(train).restrict_columns(&support),
            x.select_rows(test).restrict_columns(&support),
        )
    } else {
        (x.select_rows(train), x.select_rows(test))
    }
}

fn subset(y: &[u32], rows: &[usize]) -> Vec<u32> {
    rows.iter().map(|&r| y[r]).collect()
}

/// Grid search over `grid` by inner-CV mean AUROC, refit of the winner, and
/// a score on the held-out rows. Returns (chosen params, test scores for
/// class 1).
#[allow(clippy::too_many_arguments)]
fn grid_search_and_refit(
    train_x: &SparseMatrix,
    train_y: &[u32],
    test_x: &SparseMatrix,
    classes: &[String],
    grid: &HyperGrid,
    cfg: &CvConfig,
    fold_seed: u64,
    flags: &mut Vec<String>,
) -> Result<(HyperParams, Vec<f64>), EvalError> {
    let combos = grid.combinations();
    let inner_folds = stratified_kfold(
        train_y,
        cfg.inner_folds,
        derive_seed(fold_seed, stream::INNER_FOLD, 0),
    )?;
    let inner_sets: Vec<(Vec<usize>, Vec<usize>)> = inner_folds
        .iter()
        .map(|test_rows| {
            let train_rows: Vec<usize> = (0..train_y.len())
                .filter(|r| !test_rows.contains(r))
                .collect();
            (train_rows, test_rows.clone())
        })
        .collect();

    // Inner CV cells (combo x fold) are independent jobs.
    let n_cells = combos.len() * inner_sets.len();
    let cell_scores = jobs::run_indexed(n_cells, cfg.workers, |cell| {
        let ci = cell / inner_sets.len();
        let g = cell % inner_sets.len();
        let (itrain, itest) = &inner_sets[g];
        let (ix, tx) = fold_matrices(train_x, itrain, itest, cfg.leak_free_vocab);
        let iy = subset(train_y, itrain);
        let ty = subset(train_y, itest);
        let params = combos[ci].with_seed(derive_seed2(
            fold_seed,
            stream::GRID_CELL,
            ci as u64,
            g as u64,
        ));
        let model = train_forest_jobs(&ix, &iy, classes, &params, 1).ok()?;
        let probs = model.predict_proba(&tx).ok()?;
        let scores = model.class_scores(&probs, 1);
        let labels: Vec<bool> = ty.iter().map(|&l| l == 1).collect();
        auroc(&scores, &labels).ok().map(|r| r.auroc)
    });

    let mut best: Option<(usize, f64)> = None;
    for (ci, _) in combos.iter().enumerate() {
        let scores: Vec<f64> = (0..inner_sets.len())
            .filter_map(|g| cell_scores[ci * inner_sets.len() + g])
            .collect();
        if scores.is_empty() {
            flags.push(format!("grid combination {ci} had no evaluable inner fold"));
            continue;
        }
        let mean = stats::mean(&scores);
        // Strictly-greater keeps the earliest combination on ties.
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((ci, mean));
        }
    }
    let (best_ci, _) = best.ok_or(EvalError::NoEvaluableClass)?;
    let chosen = combos[best_ci].with_seed(derive_seed2(fold_seed, stream::REFIT, 0, 0));
    let model = train_forest_jobs(train_x, train_y, classes, &chosen, cfg.workers)?;
    let probs = model.predict_proba(test_x)?;
    Ok((chosen, model.class_scores(&probs, 1)))
}

/// Nested cross-validation of a binary target: an outer stratified split
/// for scoring, an inner stratified split for hyperparameter selection.
/// `y` must hold labels 0 (Low) and 1 (High).
pub fn nested_cv(
    x: &SparseMatrix,
    y: &[u32],
    classes: &[String],
    grid: &HyperGrid,
    cfg: &CvConfig,
    seed: u64,
) -> Result<CvReport, EvalError> {
    assert_eq!(x.n_rows(), y.len());
    assert_eq!(classes.len(), 2, "nested_cv takes a binary target");
    let need = cfg.outer_folds * cfg.inner_folds;
    if y.len() < need {
        return Err(EvalError::InsufficientSamples { got: y.len(), need });
    }
    for class in 0..2u32 {
        let count = y.iter().filter(|&&l| l == class).count();
        if count < 2 {
            return Err(EvalError::StratificationImpossible(format!(
                "class {:?} has {count} members; need at least 2",
                classes[class as usize]
            )));
        }
    }

    let outer = stratified_kfold(y, cfg.outer_folds, derive_seed(seed, stream::OUTER_FOLD, 0))?;
    assert_partition(&outer, y.len());

    let mut folds = Vec::with_capacity(cfg.outer_folds);
    for (f, test_rows) in outer.iter().enumerate() {
        let train_rows: Vec<usize> = (0..y.len()).filter(|r| !test_rows.contains(r)).collect();
        let (train_x, test_x) = fold_matrices(x, &train_rows, test_rows, cfg.leak_free_vocab);
        let train_y = subset(y, &train_rows);
        let test_y = subset(y, test_rows);
        let mut flags = Vec::new();
        let fold_seed = derive_seed(seed, stream::OUTER_FOLD, 1 + f as u64);
        let (chosen, scores) = grid_search_and_refit(
            &train_x, &train_y, &test_x, classes, grid, cfg, fold_seed, &mut flags,
        )?;
        let labels: Vec<bool> = test_y.iter().map(|&l| l == 1).collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        let prev_high = n_pos as f64 / labels.len() as f64;
        let outcome = match auroc(&scores, &labels) {
            Ok(roc) => FoldOutcome {
                fold: f,
                weighted_auroc: Some(roc.auroc),
                per_class: vec![
                    ClassAuroc {
                        class: classes[0].clone(),
                        prevalence: 1.0 - prev_high,
                        auroc: Some(roc.auroc),
                    },
                    ClassAuroc {
                        class: classes[1].clone(),
                        prevalence: prev_high,
                        auroc: Some(roc.auroc),
                    },
                ],
                chosen: vec![chosen],
                flags,
            },
            Err(_) => {
                flags.push("test fold contains a single class".into());
                FoldOutcome {
                    fold: f,
                    weighted_auroc: None,
                    per_class: Vec::new(),
                    chosen: vec![chosen],
                    flags,
                }
            }
        };
        folds.push(outcome);
    }
    Ok(CvReport::from_folds(folds, y.len(), Vec::new()))
}

/// One-against-all evaluation of a multi-class target: a binary classifier
/// per class, per-class AUROCs combined by empirical test-fold prevalence.
/// Two-class targets reduce exactly to the direct binary path.
pub fn one_vs_all_eval(
    x: &SparseMatrix,
    y: &[u32],
    classes: &[String],
    grid: &HyperGrid,
    cfg: &CvConfig,
    seed: u64,
) -> Result<CvReport, EvalError> {
    assert_eq!(x.n_rows(), y.len());
    assert!(classes.len() >= 2, "need at least two classes");
    if classes.len() == 2 {
        // A second, mirrored forest would score 1 - p and rank identically;
        // the binary path is the same computation done once.
        return nested_cv(x, y, classes, grid, cfg, seed);
    }
    let need = cfg.outer_folds * cfg.inner_folds;
    if y.len() < need {
        return Err(EvalError::InsufficientSamples { got: y.len(), need });
    }

    let outer = stratified_kfold(y, cfg.outer_folds, derive_seed(seed, stream::OUTER_FOLD, 0))?;
    assert_partition(&outer, y.len());

    let binary_names = |class: &str| vec![format!("not:{class}"), class.to_string()];

    let mut folds = Vec::with_capacity(cfg.outer_folds);
    let mut report_flags = Vec::new();
    for (f, test_rows) in outer.iter().enumerate() {
        let train_rows: Vec<usize> = (0..y.len()).filter(|r| !test_rows.contains(r)).collect();
        let (train_x, test_x) = fold_matrices(x, &train_rows, test_rows, cfg.leak_free_vocab);
        let test_y = subset(y, test_rows);
        let mut per_class = Vec::with_capacity(classes.len());
        let mut chosen_all = Vec::with_capacity(classes.len());
        let mut flags = Vec::new();
        for (c, class) in classes.iter().enumerate() {
            let class_seed = derive_seed2(seed, stream::CLASS, c as u64, f as u64);
            let train_yc: Vec<u32> = train_rows
                .iter()
                .map(|&r| (y[r] == c as u32) as u32)
                .collect();
            let labels: Vec<bool> = test_y.iter().map(|&l| l == c as u32).collect();
            let n_in_fold = labels.iter().filter(|&&l| l).count();
            let prevalence = n_in_fold as f64 / labels.len() as f64;
            let trainable = train_yc.iter().filter(|&&l| l == 1).count() >= 2
                && train_yc.iter().filter(|&&l| l == 0).count() >= 2;
            if !trainable || n_in_fold == 0 || n_in_fold == labels.len() {
                flags.push(format!(
                    "class {class:?} unevaluable in fold {f}; prevalence renormalized"
                ));
                per_class.push(ClassAuroc {
                    class: class.clone(),
                    prevalence,
                    auroc: None,
                });
                continue;
            }
            let (chosen, scores) = grid_search_and_refit(
                &train_x,
                &train_yc,
                &test_x,
                &binary_names(class),
                grid,
                cfg,
                class_seed,
                &mut flags,
            )?;
            chosen_all.push(chosen);
            let roc = auroc(&scores, &labels)?;
            per_class.push(ClassAuroc {
                class: class.clone(),
                prevalence,
                auroc: Some(roc.auroc),
            });
        }
        let weighted = weighted_auroc(&per_class).ok();
        if weighted.is_none() {
            flags.push(format!("fold {f} has no evaluable class"));
        }
        folds.push(FoldOutcome {
            fold: f,
            weighted_auroc: weighted,
            per_class,
            chosen: chosen_all,
            flags,
        });
    }
    report_flags.extend(
        folds
            .iter()
            .flat_map(|f| f.flags.iter().cloned())
            .collect::<std::collections::BTreeSet<_>>(),
    );
    Ok(CvReport::from_folds(folds, y.len(), report_flags))
}
