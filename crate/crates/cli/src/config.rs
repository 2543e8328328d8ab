//! TOML run configurations and shared input loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use morallens::eval::CvConfig;
use morallens::experiments::{ActivityBinPlan, QualityStudyPlan, StudyData, View, ViewData};
use morallens::forest::{Criterion, HyperGrid};
use morallens::ingest::{parse_behavior_log, parse_survey, Cohort, Modality, SurveyRecord};
use morallens::psych::{assemble_targets, Keying};

use crate::manifest::sha256_hex;

/// Partial grid override; unspecified axes keep the standard search space.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_trees: Option<Vec<usize>>,
    pub max_features_multiplier: Option<Vec<f64>>,
    pub max_depth: Option<Vec<usize>>,
    pub criterion: Option<Vec<Criterion>>,
    pub min_samples_leaf: Option<usize>,
}

impl GridConfig {
    pub fn to_grid(&self) -> HyperGrid {
        let paper = HyperGrid::paper();
        HyperGrid {
            n_trees: self.n_trees.clone().unwrap_or(paper.n_trees),
            max_features_multiplier: self
                .max_features_multiplier
                .clone()
                .unwrap_or(paper.max_features_multiplier),
            max_depth: self.max_depth.clone().unwrap_or(paper.max_depth),
            criterion: self.criterion.clone().unwrap_or(paper.criterion),
            min_samples_leaf: self.min_samples_leaf.unwrap_or(paper.min_samples_leaf),
        }
    }
}

/// Input files shared by evaluate and the experiment subcommands.
#[derive(Debug, Clone, Deserialize)]
pub struct InputsConfig {
    pub survey: PathBuf,
    pub desktop_log: Option<PathBuf>,
    pub mobile_web_log: Option<PathBuf>,
    pub mobile_app_log: Option<PathBuf>,
    pub keying: Option<PathBuf>,
    #[serde(default = "default_min_activity")]
    pub min_activity: u32,
}

fn default_min_activity() -> u32 {
    30
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(flatten)]
    pub inputs: InputsConfig,
    /// Reference marginals (CSV: attribute, label, expected_proportion);
    /// when set, a representativeness report is emitted per cohort.
    pub reference: Option<PathBuf>,
    /// Target names; defaults to every target in the table.
    pub targets: Option<Vec<String>>,
    /// Predictor views; defaults to every view the inputs support.
    pub views: Option<Vec<View>>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub cv: CvConfig,
    /// Persist each outer fold's refit model under models/.
    #[serde(default)]
    pub save_models: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityConfig {
    #[serde(flatten)]
    pub inputs: InputsConfig,
    #[serde(default = "default_gender")]
    pub target: String,
    #[serde(default = "default_view")]
    pub view: View,
    #[serde(default)]
    pub plan: ActivityBinPlan,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityConfig {
    #[serde(flatten)]
    pub inputs: InputsConfig,
    pub targets: Vec<String>,
    #[serde(default = "default_view")]
    pub view: View,
    #[serde(default)]
    pub plan: QualityStudyPlan,
}

fn default_gender() -> String {
    "gender".to_string()
}

fn default_view() -> View {
    View::DesktopWeb
}

/// Accepted `--modality` values: desktop|mobile-web|mobile-apps|fused.
pub fn parse_view_flag(text: &str) -> Result<View> {
    Ok(match text {
        "desktop" | "desktop-web" | "desktop_web" => View::DesktopWeb,
        "mobile-web" | "mobile_web" => View::MobileWeb,
        "mobile-apps" | "mobile-app" | "mobile_apps" => View::MobileApps,
        "fused" | "fused-mobile" | "fused_mobile" => View::FusedMobile,
        other => bail!("unknown modality {other:?} (desktop|mobile-web|mobile-apps|fused)"),
    })
}

pub fn read_config<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<(T, String /* digest */)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let digest = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).context("config is not UTF-8")?;
    let parsed = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((parsed, digest))
}

pub struct LoadedInputs {
    pub data: StudyData,
    pub warnings: Vec<String>,
    pub input_digests: BTreeMap<String, String>,
}

pub fn load_keying(path: Option<&Path>) -> Result<(Keying, Option<(String, String)>)> {
    match path {
        None => Ok((Keying::default_v1(), None)),
        Some(p) => {
            let bytes =
                std::fs::read(p).with_context(|| format!("reading keying {}", p.display()))?;
            let keying = Keying::from_csv(bytes.as_slice())
                .with_context(|| format!("parsing keying {}", p.display()))?;
            Ok((keying, Some((p.display().to_string(), sha256_hex(&bytes)))))
        }
    }
}

/// Ingest every configured input file into the desktop and mobile cohorts
/// with their scored target tables.
pub fn load_inputs(cfg: &InputsConfig) -> Result<LoadedInputs> {
    let mut warnings = Vec::new();
    let mut input_digests = BTreeMap::new();

    let (keying, keying_digest) = load_keying(cfg.keying.as_deref())?;
    if let Some((path, digest)) = keying_digest {
        input_digests.insert(path, digest);
    }

    let survey_bytes = std::fs::read(&cfg.survey)
        .with_context(|| format!("reading survey {}", cfg.survey.display()))?;
    input_digests.insert(cfg.survey.display().to_string(), sha256_hex(&survey_bytes));
    let survey =
        parse_survey(survey_bytes.as_slice(), &keying.survey_schema()).context("parsing survey")?;
    if !survey.rejects.is_empty() {
        warnings.push(format!("survey: {} rows rejected", survey.rejects.len()));
    }

    let mut load_log = |path: &PathBuf, modality: Modality| -> Result<Vec<_>> {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading log {}", path.display()))?;
        input_digests.insert(path.display().to_string(), sha256_hex(&bytes));
        let parsed = parse_behavior_log(bytes.as_slice(), modality)
            .with_context(|| format!("parsing log {}", path.display()))?;
        if !parsed.rejects.is_empty() {
            warnings.push(format!(
                "{}: {} malformed records",
                path.display(),
                parsed.rejects.len()
            ));
        }
        crate::log_line(&format!(
            "{}: {} events, {} rejects",
            path.display(),
            parsed.events.len(),
            parsed.rejects.len()
        ));
        Ok(parsed.events)
    };

    let desktop_events = cfg
        .desktop_log
        .as_ref()
        .map(|p| load_log(p, Modality::DesktopWeb))
        .transpose()?;
    let mobile_web_events = cfg
        .mobile_web_log
        .as_ref()
        .map(|p| load_log(p, Modality::MobileWeb))
        .transpose()?;
    let mobile_app_events = cfg
        .mobile_app_log
        .as_ref()
        .map(|p| load_log(p, Modality::MobileApp))
        .transpose()?;

    let build_view = |events: Vec<morallens::ingest::BehaviorEvent>,
                      qualifying: &[Modality],
                      surveys: Vec<SurveyRecord>,
                      warnings: &mut Vec<String>,
                      tag: &str|
     -> Result<ViewData> {
        let (cohort, report) = Cohort::assemble(events, surveys, cfg.min_activity, qualifying)
            .with_context(|| format!("assembling {tag} cohort"))?;
        warnings.push(format!(
            "{tag} cohort: {} retained, {} below activity threshold, {} without survey",
            report.retained, report.excluded_low_activity, report.excluded_no_survey
        ));
        let targets = assemble_targets(cohort.users(), cohort.surveys(), &keying)
            .context("scoring surveys")?;
        Ok(ViewData { cohort, targets })
    };

    let desktop = match desktop_events {
        Some(events) => Some(build_view(
            events,
            &[Modality::DesktopWeb],
            survey.records.clone(),
            &mut warnings,
            "desktop",
        )?),
        None => None,
    };
    let mobile = match (mobile_web_events, mobile_app_events) {
        (None, None) => None,
        (web, app) => {
            let qualifying: &[Modality] = if web.is_some() {
                &[Modality::MobileWeb]
            } else {
                &[Modality::MobileApp]
            };
            let mut events = web.unwrap_or_default();
            events.extend(app.unwrap_or_default());
            Some(build_view(
                events,
                qualifying,
                survey.records.clone(),
                &mut warnings,
                "mobile",
            )?)
        }
    };
    if desktop.is_none() && mobile.is_none() {
        bail!("no behaviour log configured; nothing to evaluate");
    }

    Ok(LoadedInputs {
        data: StudyData { desktop, mobile },
        warnings,
        input_digests,
    })
}

/// The cohort backing a view (desktop view reads the desktop cohort, the
/// three mobile views read the mobile cohort).
pub fn view_data(data: &StudyData, view: View) -> Result<&ViewData> {
    let source = match view {
        View::DesktopWeb => data.desktop.as_ref(),
        _ => data.mobile.as_ref(),
    };
    source.ok_or_else(|| {
        anyhow::anyhow!(
            "view {:?} needs a {} behaviour log",
            view,
            if view == View::DesktopWeb {
                "desktop"
            } else {
                "mobile"
            }
        )
    })
}
