//! Browser bindings for the interactive demo (see `www/index.html`).
//!
//! Each export takes a JSON parameter object and returns a JSON result, so
//! the page needs no generated TypeScript beyond the wasm-bindgen glue.

pub mod demo;

use wasm_bindgen::prelude::*;

fn respond<T: serde::Serialize>(result: Result<T, String>) -> String {
    match result {
        Ok(value) => serde_json::to_string(&value)
            .unwrap_or_else(|e| format!(r#"{{"error":"serialization: {e}"}}"#)),
        Err(message) => serde_json::to_string(&serde_json::json!({ "error": message })).unwrap(),
    }
}

fn parse_params(params_json: &str) -> Result<demo::DemoParams, String> {
    if params_json.trim().is_empty() {
        return Ok(demo::DemoParams::default());
    }
    serde_json::from_str(params_json).map_err(|e| format!("bad parameters: {e}"))
}

/// Generate a cohort and describe it: activity histogram, label shares, and
/// the planted signal's separability ceiling.
#[wasm_bindgen]
pub fn cohort_preview(params_json: &str) -> String {
    respond(parse_params(params_json).and_then(|p| demo::preview(&p)))
}

/// Train a forest on 80% of the cohort and score the held-out 20%: ROC
/// curve, AUROC against the ceiling, and the top feature importances.
#[wasm_bindgen]
pub fn train_and_evaluate(params_json: &str) -> String {
    respond(parse_params(params_json).and_then(|p| demo::train_and_evaluate(&p)))
}

/// Ranked vs random per-user feature selection curves.
#[wasm_bindgen]
pub fn selection_curves(params_json: &str) -> String {
    respond(parse_params(params_json).and_then(|p| demo::selection_curves(&p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exports_return_json_and_report_errors_inline() {
        let ok = cohort_preview(r#"{"n_users": 120, "n_trees": 10}"#);
        let parsed: serde_json::Value = serde_json::from_str(&ok).unwrap();
        assert!(parsed.get("error").is_none(), "{ok}");
        let err = cohort_preview(r#"{"n_users": "many"}"#);
        let parsed: serde_json::Value = serde_json::from_str(&err).unwrap();
        assert!(parsed.get("error").is_some());
    }
}
