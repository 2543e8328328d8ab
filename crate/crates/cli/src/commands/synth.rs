use std::path::Path;

use anyhow::{Context, Result};

use morallens::ingest::{write_behavior_log, write_survey_csv};
use morallens::psych::Keying;
use morallens::synth::{generate_cohort, GeneratorSpec};

use crate::manifest::{sha256_hex, Outcome};
use crate::stage::Stage;

pub fn run(config: &Path, seed: u64, out: &Path) -> Result<Outcome> {
    let bytes =
        std::fs::read(config).with_context(|| format!("reading config {}", config.display()))?;
    let digest = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).context("config is not UTF-8")?;
    let mut spec = GeneratorSpec::from_toml(&text)?;
    spec.seed = seed;

    let keying = Keying::default_v1();
    crate::log_line(&format!(
        "generating {} users across {} modalities",
        spec.n_users,
        spec.modalities.len()
    ));
    let cohort = generate_cohort(&spec, &keying)?;

    let mut stage = Stage::new();
    for (tag, events) in &cohort.events {
        let mut buf = Vec::new();
        write_behavior_log(events, &mut buf).context("writing behaviour log")?;
        stage.add(format!("{tag}.jsonl"), buf);
    }
    let mut survey_buf = Vec::new();
    write_survey_csv(&cohort.surveys, &keying.survey_schema(), &mut survey_buf)
        .context("writing survey")?;
    stage.add("survey.csv", survey_buf);
    let mut ledger = serde_json::to_vec_pretty(&cohort.ledger).context("writing ledger")?;
    ledger.push(b'\n');
    stage.add("ledger.json", ledger);

    let outputs = stage.commit(out)?;
    Ok(Outcome {
        config_digest: Some(digest),
        outputs,
        ..Outcome::default()
    })
}
