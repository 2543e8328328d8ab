use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};

use morallens::ingest::parse_survey;
use morallens::psych::assemble_targets;

use crate::config::load_keying;
use crate::manifest::{sha256_hex, Outcome};
use crate::stage::Stage;

pub fn run(surveys: &Path, keying_path: Option<&Path>, out: &Path) -> Result<Outcome> {
    let (keying, keying_digest) = load_keying(keying_path)?;
    let bytes =
        std::fs::read(surveys).with_context(|| format!("reading survey {}", surveys.display()))?;
    let mut input_digests = BTreeMap::new();
    input_digests.insert(surveys.display().to_string(), sha256_hex(&bytes));
    if let Some((path, digest)) = keying_digest {
        input_digests.insert(path, digest);
    }

    let parsed = parse_survey(bytes.as_slice(), &keying.survey_schema())?;
    let users: Vec<_> = parsed.records.iter().map(|r| r.user.clone()).collect();
    let table = assemble_targets(&users, &parsed.records, &keying)?;
    crate::log_line(&format!(
        "scored {} users, rejected {} rows",
        users.len(),
        parsed.rejects.len()
    ));

    let mut stage = Stage::new();
    let mut scored = Vec::new();
    table
        .write_scored_csv(&mut scored)
        .context("writing scored output")?;
    stage.add("reports/scored.csv", scored);

    let mut warnings = Vec::new();
    if !parsed.rejects.is_empty() {
        warnings.push(format!("{} survey rows rejected", parsed.rejects.len()));
        let mut rejects = String::from("row,field,reason\n");
        for r in &parsed.rejects {
            rejects.push_str(&format!("{},{},\"{}\"\n", r.row, r.field, r.reason));
        }
        stage.add("reports/survey_rejects.csv", rejects.into_bytes());
    }

    // Threshold and tie bookkeeping per binarized target.
    let mut summary = String::from("target,kind,labels,threshold,tie_count,untrainable\n");
    for def in &table.targets {
        summary.push_str(&format!(
            "{},{:?},{},{},{},{}\n",
            def.name,
            def.kind,
            def.labels.join("|"),
            def.threshold.map(|t| t.to_string()).unwrap_or_default(),
            def.tie_count,
            def.untrainable
        ));
    }
    stage.add("reports/targets.csv", summary.into_bytes());

    let outputs = stage.commit(out)?;
    Ok(Outcome {
        config_digest: None,
        input_digests,
        outputs,
        warnings,
    })
}
