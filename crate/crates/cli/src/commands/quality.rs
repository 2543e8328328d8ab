use std::path::Path;

use anyhow::{Context, Result};

use morallens::experiments::run_quality_study;
use morallens::matrix::SelectionMode;

use crate::config::{load_inputs, parse_view_flag, read_config, view_data, QualityConfig};
use crate::manifest::Outcome;
use crate::stage::Stage;

pub fn run(
    config: &Path,
    seed: u64,
    out: &Path,
    jobs: usize,
    modality_flag: Option<&str>,
) -> Result<Outcome> {
    let (cfg, digest) = read_config::<QualityConfig>(config)?;
    let view = match modality_flag {
        Some(flag) => parse_view_flag(flag)?,
        None => cfg.view,
    };
    let loaded = load_inputs(&cfg.inputs)?;
    let source = view_data(&loaded.data, view)?;
    crate::log_line(&format!(
        "quality study on {:?} for {} targets",
        view,
        cfg.targets.len()
    ));

    let report = run_quality_study(
        &source.cohort,
        &source.targets,
        &cfg.targets,
        view,
        &cfg.plan,
        seed,
        jobs,
    )?;

    let mut stage = Stage::new();
    for target in &cfg.targets {
        for (mode, tag) in [
            (SelectionMode::TopKByFrequency, "ranked"),
            (SelectionMode::RandomK, "random"),
        ] {
            stage.add(
                format!("curves/quality_{target}_{tag}.dat"),
                report.curve_rows(target, mode).into_bytes(),
            );
        }
    }
    let mut json = serde_json::to_vec_pretty(&report).context("serializing report")?;
    json.push(b'\n');
    stage.add("reports/quality_study.json", json);

    let outputs = stage.commit(out)?;
    Ok(Outcome {
        config_digest: Some(digest),
        input_digests: loaded.input_digests,
        outputs,
        warnings: loaded.warnings,
    })
}
