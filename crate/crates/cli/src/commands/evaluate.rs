use std::path::Path;

use anyhow::{bail, Context, Result};

use morallens::eval::CvConfig;
use morallens::experiments::{run_attribute_table, View};

use crate::config::{load_inputs, read_config, EvaluateConfig};
use crate::manifest::Outcome;
use crate::stage::Stage;

pub fn run(config: &Path, seed: u64, out: &Path, jobs: usize) -> Result<Outcome> {
    let (cfg, digest) = read_config::<EvaluateConfig>(config)?;
    let loaded = load_inputs(&cfg.inputs)?;
    let grid = cfg.grid.to_grid();
    let cv = CvConfig {
        workers: jobs,
        ..cfg.cv.clone()
    };

    // Requested views that the inputs can actually serve.
    let views: Vec<View> = cfg
        .views
        .clone()
        .unwrap_or_else(|| View::ALL.to_vec())
        .into_iter()
        .filter(|v| match v {
            View::DesktopWeb => loaded.data.desktop.is_some(),
            _ => loaded.data.mobile.is_some(),
        })
        .collect();
    if views.is_empty() {
        bail!("none of the requested views has a behaviour log");
    }
    crate::log_line(&format!("evaluating views {views:?}"));

    let report = run_attribute_table(&loaded.data, cfg.targets.as_deref(), &grid, &cv, seed);
    let evaluable = report.cells.iter().filter(|c| c.report.is_some()).count();
    if evaluable == 0 {
        bail!(
            "every cell failed: {}",
            report
                .cells
                .iter()
                .filter_map(|c| c.error.clone())
                .collect::<Vec<_>>()
                .join("; ")
        );
    }

    let mut loaded = loaded;
    let mut stage = Stage::new();
    if let Some(reference_path) = &cfg.reference {
        let bytes = std::fs::read(reference_path)
            .with_context(|| format!("reading reference {}", reference_path.display()))?;
        loaded.input_digests.insert(
            reference_path.display().to_string(),
            crate::manifest::sha256_hex(&bytes),
        );
        let reference = morallens::ingest::ReferenceTable::from_csv(bytes.as_slice())?;
        for (tag, source) in [
            ("desktop", &loaded.data.desktop),
            ("mobile", &loaded.data.mobile),
        ] {
            let Some(view) = source else { continue };
            let summary = morallens::ingest::summarize_cohort(&view.cohort, &reference)?;
            let mut csv = String::from(
                "attribute,label,observed_count,observed_proportion,expected_proportion,abs_difference_points\n",
            );
            for row in &summary.rows {
                csv.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.4}\n",
                    row.attribute,
                    row.label,
                    row.observed_count,
                    row.observed_proportion,
                    row.expected_proportion,
                    row.abs_difference_points
                ));
            }
            stage.add(
                format!("reports/representativeness_{tag}.csv"),
                csv.into_bytes(),
            );
        }
    }
    stage.add(
        "reports/attribute_table.csv",
        report.summary_csv().into_bytes(),
    );
    stage.add("reports/folds.csv", report.folds_csv().into_bytes());
    let mut json = serde_json::to_vec_pretty(&report).context("serializing report")?;
    json.push(b'\n');
    stage.add("reports/attribute_table.json", json);

    let mut warnings = loaded.warnings;
    for cell in &report.cells {
        if let Some(err) = &cell.error {
            warnings.push(format!(
                "cell {} x {}: {err}",
                cell.target,
                cell.view.name()
            ));
        }
    }

    if cfg.save_models {
        // Refit the winning configuration of each evaluable cell on its full
        // labelled data and persist it for the importance subcommand.
        for cell in &report.cells {
            let Some(cv_report) = &cell.report else {
                continue;
            };
            let Some(first_fold) = cv_report.folds.first() else {
                continue;
            };
            let Some(chosen) = first_fold.chosen.first() else {
                continue;
            };
            let source = crate::config::view_data(&loaded.data, cell.view)?;
            let target_index = source
                .targets
                .target(&cell.target)
                .expect("cell target exists");
            let def = &source.targets.targets[target_index];
            let (rows, y) = source.targets.labelled_rows(target_index);
            let x =
                morallens::experiments::view_matrix(&source.cohort, cell.view)?.select_rows(&rows);
            let model = morallens::forest::train_forest_jobs(&x, &y, &def.labels, chosen, jobs)?;
            stage.add(
                format!("models/{}_{}.model.json", cell.target, cell.view.name()),
                model.to_json().into_bytes(),
            );
        }
    }

    let outputs = stage.commit(out)?;
    Ok(Outcome {
        config_digest: Some(digest),
        input_digests: loaded.input_digests,
        outputs,
        warnings,
    })
}
