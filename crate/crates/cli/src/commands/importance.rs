use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};

use morallens::forest::{feature_importances, ForestModel};

use crate::manifest::{sha256_hex, Outcome};
use crate::stage::Stage;

pub fn run(model_path: &Path, out: &Path) -> Result<Outcome> {
    let bytes = std::fs::read(model_path)
        .with_context(|| format!("reading model {}", model_path.display()))?;
    let mut input_digests = BTreeMap::new();
    input_digests.insert(model_path.display().to_string(), sha256_hex(&bytes));
    let text = String::from_utf8(bytes).context("model file is not UTF-8")?;
    let model = ForestModel::from_json(&text)?;

    let ranked = feature_importances(&model);
    let mut csv = String::from("rank,item_key,importance\n");
    for (rank, (key, importance)) in ranked.iter().enumerate() {
        csv.push_str(&format!("{},{key},{importance}\n", rank + 1));
    }
    let mut stage = Stage::new();
    stage.add("reports/importances.csv", csv.into_bytes());

    let mut warnings = Vec::new();
    if model.degenerate {
        warnings
            .push("model is degenerate (single-class training); importances are all zero".into());
    }
    let outputs = stage.commit(out)?;
    Ok(Outcome {
        config_digest: None,
        input_digests,
        outputs,
        warnings,
    })
}
