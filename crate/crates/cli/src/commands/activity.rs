use std::path::Path;

use anyhow::{Context, Result};

use morallens::experiments::run_activity_bin_study;

use crate::config::{load_inputs, parse_view_flag, read_config, view_data, ActivityConfig};
use crate::manifest::Outcome;
use crate::stage::Stage;

pub fn run(
    config: &Path,
    seed: u64,
    out: &Path,
    jobs: usize,
    modality_flag: Option<&str>,
) -> Result<Outcome> {
    let (cfg, digest) = read_config::<ActivityConfig>(config)?;
    let view = match modality_flag {
        Some(flag) => parse_view_flag(flag)?,
        None => cfg.view,
    };
    let loaded = load_inputs(&cfg.inputs)?;
    let source = view_data(&loaded.data, view)?;
    crate::log_line(&format!(
        "activity study on {:?} for target {:?}",
        view, cfg.target
    ));

    let report = run_activity_bin_study(
        &source.cohort,
        &source.targets,
        &cfg.target,
        view,
        &cfg.plan,
        seed,
        jobs,
    )?;

    let mut stage = Stage::new();
    for bin in 1..=report.train_edges.len() {
        stage.add(
            format!("curves/activity_train_bin_{bin:02}.dat"),
            report.curve_rows(bin).into_bytes(),
        );
    }
    let mut proportions = String::from("set,bin,edge,n,class_counts\n");
    for p in &report.train_proportions {
        proportions.push_str(&format!(
            "train,{},{},{},\"{:?}\"\n",
            p.bin, p.edge, p.n, p.class_counts
        ));
    }
    for p in &report.test_proportions {
        proportions.push_str(&format!(
            "test,{},{},{},\"{:?}\"\n",
            p.bin, p.edge, p.n, p.class_counts
        ));
    }
    stage.add("reports/activity_proportions.csv", proportions.into_bytes());
    let mut json = serde_json::to_vec_pretty(&report).context("serializing report")?;
    json.push(b'\n');
    stage.add("reports/activity_study.json", json);

    let outputs = stage.commit(out)?;
    Ok(Outcome {
        config_digest: Some(digest),
        input_digests: loaded.input_digests,
        outputs,
        warnings: loaded.warnings,
    })
}
