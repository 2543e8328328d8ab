//! Synthetic cohort generation with planted item/attribute associations.
//!
//! Users draw an activity level from a log-normal, items draw popularity
//! from a power law, and visit counts come from an over-dispersed
//! (gamma-mixed Poisson, i.e. negative binomial) model whose rate is
//! activity x popularity x a planted multiplier when the user's class
//! matches a signal. Survey items are constructed so that questionnaire
//! scoring reproduces the planted continuous scores, and the whole bundle
//! is emitted in the ingest module's exact file formats.
//!
//! A [`GeneratorLedger`] records the ground truth per user, and
//! [`bayes_reference_auroc`] Monte-Carlos the likelihood-ratio score of the
//! true generative model, an upper reference that no downstream model
//! should beat beyond sampling noise.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;
use crate::ingest::{
    attribute, write_behavior_log, write_survey_csv, BehaviorEvent, CalendarDate, Modality,
    SurveyRecord, UserId, ATTRIBUTES,
};
use crate::psych::{self, Keying, FOUNDATIONS, VALUES};
use crate::rng::{derive_seed, derive_seed2, rng_from, stream};
use crate::stats;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generator spec invalid: {0}")]
    SpecInvalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Default demographic marginals used when the generator spec does not override an
/// attribute; shaped like a large US consumer panel.
fn default_marginals(name: &str) -> Vec<f64> {
    match name {
        "age" => vec![0.034, 0.171, 0.263, 0.115, 0.230, 0.186],
        "education" => vec![0.344, 0.290, 0.220, 0.081, 0.063],
        "ethnicity" => vec![0.044, 0.063, 0.833, 0.045],
        "exercise" => vec![0.436, 0.564],
        "gender" => vec![0.572, 0.428],
        "income" => vec![0.045, 0.064, 0.160, 0.211, 0.199, 0.207, 0.067, 0.046],
        "political_party" => vec![0.389, 0.335, 0.028, 0.247],
        "wealth" => vec![0.294, 0.120, 0.159, 0.171, 0.140, 0.116],
        "weight_issues" => vec![0.555, 0.445],
        "parent" => vec![0.332, 0.668],
        "smoker" => vec![0.921, 0.079],
        "marital_status" => vec![0.096, 0.168, 0.614, 0.081],
        _ => unreachable!("unknown attribute {name}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub vocab_size: usize,
    /// Item popularity follows rank^(-exponent).
    #[serde(default = "default_popularity_exponent")]
    pub popularity_exponent: f64,
    /// Log-normal parameters of the per-user unique-item count.
    pub activity_log_mean: f64,
    pub activity_log_sd: f64,
}

fn default_popularity_exponent() -> f64 {
    1.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetMarginals {
    pub attribute: String,
    /// Label -> probability; labels must belong to the attribute.
    pub marginals: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalSpec {
    /// Demographic attribute, moral foundation, or basic value.
    pub target: String,
    /// Class whose members get the boosted rate ("High"/"Low" for
    /// psychometric targets).
    pub class: String,
    pub modality: Modality,
    /// Popularity-rank indices into the modality's vocabulary.
    pub item_indices: Vec<usize>,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_users: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_days")]
    pub days: u8,
    /// Negative-binomial dispersion; smaller is burstier.
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
    pub modalities: Vec<ModalitySpec>,
    #[serde(default)]
    pub targets: Vec<TargetMarginals>,
    #[serde(default)]
    pub signals: Vec<SignalSpec>,
    /// Monte-Carlo sample count for the ledger's reference AUROCs.
    #[serde(default = "default_bayes_samples")]
    pub bayes_samples: usize,
}

fn default_days() -> u8 {
    28
}
fn default_dispersion() -> f64 {
    1.2
}
fn default_bayes_samples() -> usize {
    100_000
}

impl GeneratorSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: GeneratorSpec =
            toml::from_str(text).map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |msg: String| Err(SynthError::SpecInvalid(msg));
        if self.n_users == 0 {
            return invalid("n_users must be >= 1".into());
        }
        if self.modalities.is_empty() {
            return invalid("at least one modality".into());
        }
        if self.dispersion <= 0.0 {
            return invalid("dispersion must be positive".into());
        }
        let mut seen = HashSet::new();
        for m in &self.modalities {
            if !seen.insert(m.modality) {
                return invalid(format!("modality {:?} listed twice", m.modality));
            }
            if m.vocab_size == 0 || m.activity_log_sd <= 0.0 {
                return invalid(format!("modality {:?} has invalid parameters", m.modality));
            }
        }
        for t in &self.targets {
            let attr = attribute(&t.attribute).ok_or_else(|| {
                SynthError::SpecInvalid(format!("unknown attribute {:?}", t.attribute))
            })?;
            let total: f64 = t.marginals.values().sum();
            if t.marginals.is_empty() || t.marginals.values().any(|&p| p < 0.0) || total <= 0.0 {
                return invalid(format!("bad marginals for {:?}", t.attribute));
            }
            for label in t.marginals.keys() {
                if !attr.labels.contains(&label.as_str()) {
                    return invalid(format!(
                        "label {label:?} is not valid for attribute {:?}",
                        t.attribute
                    ));
                }
            }
        }
        for s in &self.signals {
            if s.multiplier <= 0.0 {
                return invalid(format!(
                    "signal on {:?} has non-positive multiplier",
                    s.target
                ));
            }
            let m = self
                .modalities
                .iter()
                .find(|m| m.modality == s.modality)
                .ok_or_else(|| {
                    SynthError::SpecInvalid(format!(
                        "signal on {:?} references unlisted modality {:?}",
                        s.target, s.modality
                    ))
                })?;
            if s.item_indices.iter().any(|&i| i >= m.vocab_size) {
                return invalid(format!("signal items out of vocabulary for {:?}", s.target));
            }
            if s.item_indices.is_empty() {
                return invalid(format!("signal on {:?} lists no items", s.target));
            }
            match plantable_kind(&s.target) {
                Some(PlantKind::Demographic) => {
                    let attr = attribute(&s.target).unwrap();
                    if !attr.labels.contains(&s.class.as_str()) {
                        return invalid(format!(
                            "class {:?} is not valid for attribute {:?}",
                            s.class, s.target
                        ));
                    }
                }
                Some(_) => {
                    if s.class != "High" && s.class != "Low" {
                        return invalid(format!(
                            "psychometric target {:?} takes classes High/Low, got {:?}",
                            s.target, s.class
                        ));
                    }
                }
                None => {
                    return invalid(format!(
                        "target {:?} is not plantable (demographics, foundations and basic values are)",
                        s.target
                    ));
                }
            }
        }
        Ok(())
    }

    fn marginals_for(&self, attr_name: &str) -> Vec<f64> {
        let attr = attribute(attr_name).expect("registry attribute");
        let raw = self
            .targets
            .iter()
            .find(|t| t.attribute == attr_name)
            .map(|t| {
                attr.labels
                    .iter()
                    .map(|l| t.marginals.get(*l).copied().unwrap_or(0.0))
                    .collect::<Vec<f64>>()
            })
            .unwrap_or_else(|| default_marginals(attr_name));
        let total: f64 = raw.iter().sum();
        raw.iter().map(|p| p / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlantKind {
    Demographic,
    Foundation,
    Value,
}

fn plantable_kind(target: &str) -> Option<PlantKind> {
    if attribute(target).is_some() {
        Some(PlantKind::Demographic)
    } else if FOUNDATIONS.contains(&target) {
        Some(PlantKind::Foundation)
    } else if VALUES.contains(&target) {
        Some(PlantKind::Value)
    } else {
        None
    }
}

/// Item name at a popularity rank.
pub fn item_name(modality: Modality, rank: usize) -> String {
    match modality {
        Modality::DesktopWeb | Modality::MobileWeb => format!("site{rank:04}.example"),
        Modality::MobileApp => format!("App{rank:04}"),
    }
}

// ---------------------------------------------------------------------------
// Rate model
// ---------------------------------------------------------------------------

/// Per-modality rate machinery: popularity weights plus an interpolated map
/// from a target unique-item count to the user's rate scale. The same table
/// drives both cohort generation and the Monte-Carlo reference, so the two
/// describe the same model.
struct RateModel {
    popularity: Vec<f64>,
    dispersion: f64,
    /// (activity, scale) knots, ascending.
    knots: Vec<(f64, f64)>,
    max_activity: f64,
}

impl RateModel {
    fn new(spec: &ModalitySpec, dispersion: f64) -> Self {
        let popularity: Vec<f64> = (0..spec.vocab_size)
            .map(|i| ((i + 1) as f64).powf(-spec.popularity_exponent))
            .collect();
        let max_activity = 0.95 * spec.vocab_size as f64;
        // Expected unique items at rate scale s, under the NB zero mass.
        let expected_unique = |s: f64| -> f64 {
            popularity
                .iter()
                .map(|&p| 1.0 - (1.0 + s * p / dispersion).powf(-dispersion))
                .sum()
        };
        let mut knots = Vec::with_capacity(257);
        for step in 0..=256 {
            // Geometric activity grid from 1 to the cap.
            let a = (max_activity.ln() * step as f64 / 256.0).exp();
            let mut lo = 0.0f64;
            let mut hi = 1.0f64;
            while expected_unique(hi) < a && hi < 1e12 {
                hi *= 2.0;
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if expected_unique(mid) < a {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            knots.push((a, 0.5 * (lo + hi)));
        }
        Self {
            popularity,
            dispersion,
            knots,
            max_activity,
        }
    }

    /// Rate scale for a target unique-item count (linear interpolation).
    fn scale_for(&self, activity: f64) -> f64 {
        let a = activity.clamp(self.knots[0].0, self.max_activity);
        let at = self
            .knots
            .partition_point(|(knot_a, _)| *knot_a < a)
            .clamp(1, self.knots.len() - 1);
        let (a0, s0) = self.knots[at - 1];
        let (a1, s1) = self.knots[at];
        if a1 == a0 {
            s0
        } else {
            s0 + (s1 - s0) * (a - a0) / (a1 - a0)
        }
    }

    /// Draw a count for one item: gamma-mixed Poisson with mean `m`.
    fn draw_count(&self, m: f64, rng: &mut impl Rng) -> u64 {
        if m < 1e-12 {
            return 0;
        }
        let gamma = Gamma::new(self.dispersion, 1.0 / self.dispersion).expect("valid gamma");
        let lambda = m * gamma.sample(rng);
        if lambda < 1e-12 {
            return 0;
        }
        Poisson::new(lambda)
            .map(|p| p.sample(rng) as u64)
            .unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Everything the generator knows about the cohort it emitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorLedger {
    pub n_users: usize,
    pub users: Vec<String>,
    /// Target name -> per-user label, exactly as the scoring pipeline will
    /// see it (psychometric targets are scored and median-binarized here).
    pub labels: BTreeMap<String, Vec<String>>,
    /// Modality -> per-user item->count map (exact emitted totals).
    pub counts: BTreeMap<String, Vec<BTreeMap<String, u64>>>,
    /// Modality -> per-user unique-item count.
    pub unique_items: BTreeMap<String, Vec<usize>>,
    /// Planted target -> Monte-Carlo AUROC of the true-model likelihood
    /// ratio (upper reference).
    pub bayes_reference: BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct SyntheticCohort {
    /// Per modality, sorted by (user, day, item).
    pub events: BTreeMap<String, Vec<BehaviorEvent>>,
    pub surveys: Vec<SurveyRecord>,
    pub ledger: GeneratorLedger,
}

fn modality_tag(m: Modality) -> &'static str {
    match m {
        Modality::DesktopWeb => "desktop_web",
        Modality::MobileWeb => "mobile_web",
        Modality::MobileApp => "mobile_app",
    }
}

/// Balanced High/Low assignment: exactly ceil(n/2) Low, the rest High, in a
/// seeded random order. Guarantees that the cohort median separates the two
/// planted groups exactly.
fn balanced_binary(n: usize, rng: &mut impl Rng) -> Vec<bool> {
    let n_high = n / 2;
    let mut flags = vec![false; n];
    for f in flags.iter_mut().take(n_high) {
        *f = true;
    }
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        flags.swap(i, j);
    }
    flags
}

fn mfq_items_for_scores(scores: &[f64; 5], keying: &Keying) -> Vec<u8> {
    let mut items = vec![0u8; psych::MFQ_ITEMS];
    for (f, &score) in scores.iter().enumerate() {
        let total = (score * 6.0).round().clamp(0.0, 30.0) as u32;
        let base = (total / 6) as u8;
        let rem = (total % 6) as usize;
        for (slot, &idx) in keying.foundation_items(f).iter().enumerate() {
            items[idx] = if slot < rem { base + 1 } else { base };
        }
    }
    items
}

fn pvq_items_for_scores(raw_means: &[f64; 10], keying: &Keying) -> Vec<u8> {
    let mut items = vec![1u8; keying.n_pvq_items()];
    for (v, &score) in raw_means.iter().enumerate() {
        let idxs = keying.value_items(v);
        let n = idxs.len() as f64;
        let total = (score * n).round().clamp(n, 7.0 * n) as u32;
        let base = total / idxs.len() as u32;
        let rem = (total % idxs.len() as u32) as usize;
        for (slot, &idx) in idxs.iter().enumerate() {
            items[idx] = if slot < rem {
                base as u8 + 1
            } else {
                base as u8
            };
        }
    }
    items
}

/// Generate the cohort bundle for a spec. Deterministic: the same spec and
/// seed produce byte-identical files.
pub fn generate_cohort(
    spec: &GeneratorSpec,
    keying: &Keying,
) -> Result<SyntheticCohort, SynthError> {
    spec.validate()?;
    let n = spec.n_users;
    let users: Vec<String> = (0..n).map(|u| format!("u{u:06}")).collect();

    // Planted psychometric targets get balanced High/Low assignments.
    let mut planted_psych: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for s in &spec.signals {
        match plantable_kind(&s.target) {
            Some(PlantKind::Foundation) | Some(PlantKind::Value) => {
                let mut rng = rng_from(derive_seed(
                    spec.seed,
                    stream::SPLIT,
                    plant_stream_index(&s.target),
                ));
                planted_psych
                    .entry(s.target.clone())
                    .or_insert_with(|| balanced_binary(n, &mut rng));
            }
            _ => {}
        }
    }

    // Demographics per user.
    let mut demographics: Vec<Vec<String>> = Vec::with_capacity(n);
    for u in 0..n {
        let mut rng = rng_from(derive_seed2(spec.seed, stream::USER, u as u64, 0));
        let mut labels = Vec::with_capacity(ATTRIBUTES.len());
        for attr in ATTRIBUTES {
            let marginals = spec.marginals_for(attr.name);
            let draw: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut chosen = attr.labels.len() - 1;
            for (i, &p) in marginals.iter().enumerate() {
                acc += p;
                if draw < acc {
                    chosen = i;
                    break;
                }
            }
            labels.push(attr.labels[chosen].to_string());
        }
        demographics.push(labels);
    }

    // Survey items: planted psychometric scores land in disjoint halves so
    // the cohort median recovers the assignment; the rest are uniform.
    let mut surveys = Vec::with_capacity(n);
    for u in 0..n {
        let mut rng = rng_from(derive_seed2(spec.seed, stream::USER, u as u64, 1));
        let mut foundation_scores = [0f64; 5];
        for (f, name) in FOUNDATIONS.iter().enumerate() {
            foundation_scores[f] = match planted_psych.get(*name) {
                Some(flags) if flags[u] => rng.random_range(3.2..4.8),
                Some(_) => rng.random_range(0.2..1.8),
                None => rng.random_range(0.0..5.0),
            };
        }
        let mut value_means = [0f64; 10];
        for (v, name) in VALUES.iter().enumerate() {
            value_means[v] = match planted_psych.get(*name) {
                Some(flags) if flags[u] => rng.random_range(5.4..6.8),
                Some(_) => rng.random_range(1.2..2.6),
                None => rng.random_range(3.4..4.6),
            };
        }
        surveys.push(SurveyRecord {
            user: UserId(users[u].clone()),
            mfq_items: mfq_items_for_scores(&foundation_scores, keying),
            pvq_items: pvq_items_for_scores(&value_means, keying),
            demographics: demographics[u].clone(),
        });
    }

    // Resolve each signal to the per-user boost flag.
    let signal_applies: Vec<Vec<bool>> = spec
        .signals
        .iter()
        .map(|s| match plantable_kind(&s.target) {
            Some(PlantKind::Demographic) => {
                let at = ATTRIBUTES
                    .iter()
                    .position(|a| a.name == s.target)
                    .expect("validated");
                (0..n).map(|u| demographics[u][at] == s.class).collect()
            }
            _ => {
                let flags = &planted_psych[&s.target];
                let want_high = s.class == "High";
                (0..n).map(|u| flags[u] == want_high).collect()
            }
        })
        .collect();

    // Behaviour logs.
    let mut events: BTreeMap<String, Vec<BehaviorEvent>> = BTreeMap::new();
    let mut counts: BTreeMap<String, Vec<BTreeMap<String, u64>>> = BTreeMap::new();
    let mut unique_items: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (mi, mspec) in spec.modalities.iter().enumerate() {
        let model = RateModel::new(mspec, spec.dispersion);
        let activity_dist = LogNormal::new(mspec.activity_log_mean, mspec.activity_log_sd)
            .map_err(|e| SynthError::SpecInvalid(e.to_string()))?;
        let tag = modality_tag(mspec.modality).to_string();
        let mut mod_events = Vec::new();
        let mut mod_counts = Vec::with_capacity(n);
        let mut mod_unique = Vec::with_capacity(n);
        for u in 0..n {
            let mut rng = rng_from(derive_seed2(
                spec.seed,
                stream::USER,
                u as u64,
                2 + mi as u64,
            ));
            let activity = activity_dist.sample(&mut rng);
            let scale = model.scale_for(activity);
            let mut user_counts: BTreeMap<String, u64> = BTreeMap::new();
            for (i, &pop) in model.popularity.iter().enumerate() {
                let mut mult = 1.0;
                for (si, s) in spec.signals.iter().enumerate() {
                    if s.modality == mspec.modality
                        && signal_applies[si][u]
                        && s.item_indices.contains(&i)
                    {
                        mult *= s.multiplier;
                    }
                }
                let count = model.draw_count(scale * pop * mult, &mut rng);
                if count > 0 {
                    user_counts.insert(item_name(mspec.modality, i), count);
                }
            }
            // Spread each item's total over the observation window.
            for (item, &total) in &user_counts {
                let n_days = 1 + rng.random_range(0..spec.days as u64).min(total - 1) as usize;
                let mut day_ordinals: Vec<u8> = (1..=spec.days).collect();
                for i in 0..n_days {
                    let j = rng.random_range(i..day_ordinals.len());
                    day_ordinals.swap(i, j);
                }
                let mut chosen: Vec<u8> = day_ordinals[..n_days].to_vec();
                chosen.sort_unstable();
                let base = total / n_days as u64;
                let rem = (total % n_days as u64) as usize;
                for (slot, day) in chosen.iter().enumerate() {
                    let visits = base + (slot < rem) as u64;
                    let dwell = visits * rng.random_range(20..=180);
                    mod_events.push(BehaviorEvent {
                        user: UserId(users[u].clone()),
                        modality: mspec.modality,
                        item: item.clone(),
                        day: CalendarDate::new(2015, 3, *day).expect("window day"),
                        visits: visits as u32,
                        dwell: dwell as u32,
                    });
                }
            }
            mod_unique.push(user_counts.len());
            mod_counts.push(user_counts);
        }
        mod_events.sort_by(|a, b| (&a.user.0, a.day, &a.item).cmp(&(&b.user.0, b.day, &b.item)));
        events.insert(tag.clone(), mod_events);
        counts.insert(tag.clone(), mod_counts);
        unique_items.insert(tag, mod_unique);
    }

    // Ground-truth labels, exactly as the pipeline will compute them.
    let user_ids: Vec<UserId> = users.iter().map(|u| UserId(u.clone())).collect();
    let table = psych::assemble_targets(&user_ids, &surveys, keying)
        .map_err(|e| SynthError::SpecInvalid(format!("generated surveys failed scoring: {e}")))?;
    let mut labels: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (t, def) in table.targets.iter().enumerate() {
        let column: Vec<String> = table.labels[t]
            .iter()
            .map(|l| match l {
                Some(id) => def.labels[*id as usize].clone(),
                None => String::new(),
            })
            .collect();
        labels.insert(def.name.clone(), column);
    }

    // Planted psychometric assignments must round-trip through scoring.
    for (target, flags) in &planted_psych {
        let scored = &labels[target];
        for u in 0..n {
            let expected = if flags[u] { "High" } else { "Low" };
            debug_assert_eq!(
                scored[u], expected,
                "planted label for {target} user {u} survived scoring"
            );
        }
    }

    let mut bayes_reference = BTreeMap::new();
    if spec.bayes_samples > 0 {
        let planted_targets: std::collections::BTreeSet<String> =
            spec.signals.iter().map(|s| s.target.clone()).collect();
        for target in planted_targets {
            bayes_reference.insert(
                target.clone(),
                bayes_reference_auroc(spec, &target, spec.bayes_samples),
            );
        }
    }

    Ok(SyntheticCohort {
        events,
        surveys,
        ledger: GeneratorLedger {
            n_users: n,
            users,
            labels,
            counts,
            unique_items,
            bayes_reference,
        },
    })
}

fn plant_stream_index(target: &str) -> u64 {
    // Stable small index per plantable psychometric target.
    let mut acc = 0u64;
    for b in target.bytes() {
        acc = acc.wrapping_mul(31).wrapping_add(b as u64);
    }
    acc
}

impl SyntheticCohort {
    /// Emit behaviour logs (one per modality), the survey CSV, and the
    /// ledger JSON. Returns the written paths.
    pub fn write_to_dir(&self, dir: &Path, keying: &Keying) -> Result<Vec<PathBuf>, SynthError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (tag, events) in &self.events {
            let path = dir.join(format!("{tag}.jsonl"));
            let mut buf = Vec::new();
            write_behavior_log(events, &mut buf)
                .map_err(|e| SynthError::Io(std::io::Error::other(e.to_string())))?;
            std::fs::write(&path, buf)?;
            written.push(path);
        }
        let survey_path = dir.join("survey.csv");
        let mut buf = Vec::new();
        write_survey_csv(&self.surveys, &keying.survey_schema(), &mut buf)
            .map_err(|e| SynthError::Io(std::io::Error::other(e.to_string())))?;
        std::fs::write(&survey_path, buf)?;
        written.push(survey_path);
        let ledger_path = dir.join("ledger.json");
        let mut file = std::fs::File::create(&ledger_path)?;
        serde_json::to_writer_pretty(&mut file, &self.ledger)
            .map_err(|e| SynthError::Io(std::io::Error::other(e.to_string())))?;
        file.write_all(b"\n")?;
        written.push(ledger_path);
        Ok(written)
    }
}

// ---------------------------------------------------------------------------
// Bayes reference
// ---------------------------------------------------------------------------

/// Monte-Carlo AUROC of the likelihood-ratio score under the true
/// generative model, conditioned on the user's activity scale. This is the
/// ceiling a trained model can approach but should not exceed beyond
/// sampling noise.
pub fn bayes_reference_auroc(spec: &GeneratorSpec, target: &str, n_samples: usize) -> f64 {
    let kind = plantable_kind(target).expect("plantable target");
    let (class_names, marginals): (Vec<String>, Vec<f64>) = match kind {
        PlantKind::Demographic => {
            let attr = attribute(target).unwrap();
            (
                attr.labels.iter().map(|l| l.to_string()).collect(),
                spec.marginals_for(target),
            )
        }
        _ => (vec!["Low".into(), "High".into()], vec![0.5, 0.5]),
    };
    let k = class_names.len();

    // Signal items per modality relevant to this target, with per-class
    // multipliers.
    struct SignalItem {
        modality_index: usize,
        item: usize,
        class_multipliers: Vec<f64>,
    }
    let mut items: Vec<SignalItem> = Vec::new();
    for s in spec.signals.iter().filter(|s| s.target == target) {
        let mi = spec
            .modalities
            .iter()
            .position(|m| m.modality == s.modality)
            .expect("validated modality");
        for &i in &s.item_indices {
            let class_at = class_names.iter().position(|c| *c == s.class).unwrap();
            if let Some(existing) = items
                .iter_mut()
                .find(|it| it.modality_index == mi && it.item == i)
            {
                existing.class_multipliers[class_at] *= s.multiplier;
            } else {
                let mut mult = vec![1.0; k];
                mult[class_at] = s.multiplier;
                items.push(SignalItem {
                    modality_index: mi,
                    item: i,
                    class_multipliers: mult,
                });
            }
        }
    }
    if items.is_empty() {
        return 0.5;
    }

    let models: Vec<RateModel> = spec
        .modalities
        .iter()
        .map(|m| RateModel::new(m, spec.dispersion))
        .collect();
    let activity_dists: Vec<LogNormal<f64>> = spec
        .modalities
        .iter()
        .map(|m| LogNormal::new(m.activity_log_mean, m.activity_log_sd).expect("valid"))
        .collect();

    let mut rng = rng_from(derive_seed(
        spec.seed,
        stream::BAYES,
        plant_stream_index(target),
    ));
    let mut true_class = Vec::with_capacity(n_samples);
    let mut class_scores: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); k];
    for _ in 0..n_samples {
        let draw: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut class = k - 1;
        for (c, &p) in marginals.iter().enumerate() {
            acc += p;
            if draw < acc {
                class = c;
                break;
            }
        }
        true_class.push(class);
        // One activity scale per modality, as in generation.
        let scales: Vec<f64> = models
            .iter()
            .zip(&activity_dists)
            .map(|(m, d)| m.scale_for(d.sample(&mut rng)))
            .collect();
        // Draw the signal-item counts under the true class, then score the
        // log-likelihood of every class hypothesis.
        let mut ll = vec![0.0f64; k];
        for it in &items {
            let model = &models[it.modality_index];
            let base = scales[it.modality_index] * model.popularity[it.item];
            let count = model.draw_count(base * it.class_multipliers[class], &mut rng);
            for (c, acc) in ll.iter_mut().enumerate() {
                *acc += stats::neg_binomial_ln_pmf(
                    count,
                    base * it.class_multipliers[c],
                    spec.dispersion,
                );
            }
        }
        // One-vs-rest likelihood-ratio score per class.
        for c in 0..k {
            let rest: f64 = {
                let mut num = f64::NEG_INFINITY;
                for (other, &l) in ll.iter().enumerate() {
                    if other != c {
                        let w = marginals[other].max(1e-300).ln() + l;
                        num = logsumexp2(num, w);
                    }
                }
                let rest_mass: f64 = marginals
                    .iter()
                    .enumerate()
                    .filter(|(o, _)| *o != c)
                    .map(|(_, p)| p)
                    .sum();
                num - rest_mass.max(1e-300).ln()
            };
            class_scores[c].push(ll[c] - rest);
        }
    }

    // Prevalence-weighted one-vs-rest AUROC.
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let labels: Vec<bool> = true_class.iter().map(|&t| t == c).collect();
        let prevalence = labels.iter().filter(|&&l| l).count() as f64 / n_samples as f64;
        let auroc = eval::auroc(&class_scores[c], &labels).ok().map(|r| r.auroc);
        per_class.push(eval::ClassAuroc {
            class: class_names[c].clone(),
            prevalence,
            auroc,
        });
    }
    eval::weighted_auroc(&per_class).unwrap_or(0.5)
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(multiplier: f64) -> GeneratorSpec {
        GeneratorSpec {
            n_users: 300,
            seed: 11,
            days: 28,
            dispersion: 1.2,
            modalities: vec![ModalitySpec {
                modality: Modality::DesktopWeb,
                vocab_size: 120,
                popularity_exponent: 1.05,
                activity_log_mean: 3.2,
                activity_log_sd: 0.8,
            }],
            targets: vec![TargetMarginals {
                attribute: "gender".into(),
                marginals: BTreeMap::from([("Female".into(), 0.5), ("Male".into(), 0.5)]),
            }],
            signals: vec![SignalSpec {
                target: "gender".into(),
                class: "Female".into(),
                modality: Modality::DesktopWeb,
                item_indices: (30..40).collect(),
                multiplier,
            }],
            bayes_samples: 0,
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let keying = Keying::default_v1();
        let spec = small_spec(4.0);
        let a = generate_cohort(&spec, &keying).unwrap();
        let b = generate_cohort(&spec, &keying).unwrap();
        let dir_a = std::env::temp_dir().join(format!("synth_det_a_{}", std::process::id()));
        let dir_b = std::env::temp_dir().join(format!("synth_det_b_{}", std::process::id()));
        let files_a = a.write_to_dir(&dir_a, &keying).unwrap();
        let files_b = b.write_to_dir(&dir_b, &keying).unwrap();
        for (fa, fb) in files_a.iter().zip(&files_b) {
            assert_eq!(
                std::fs::read(fa).unwrap(),
                std::fs::read(fb).unwrap(),
                "{fa:?} vs {fb:?}"
            );
        }
        std::fs::remove_dir_all(dir_a).ok();
        std::fs::remove_dir_all(dir_b).ok();
    }

    #[test]
    fn ledger_counts_match_emitted_events() {
        let keying = Keying::default_v1();
        let out = generate_cohort(&small_spec(4.0), &keying).unwrap();
        let events = &out.events["desktop_web"];
        let mut totals: BTreeMap<(String, String), u64> = BTreeMap::new();
        for ev in events {
            *totals
                .entry((ev.user.0.clone(), ev.item.clone()))
                .or_insert(0) += ev.visits as u64;
        }
        for (u, user) in out.ledger.users.iter().enumerate() {
            for (item, &count) in &out.ledger.counts["desktop_web"][u] {
                assert_eq!(
                    totals.get(&(user.clone(), item.clone())).copied(),
                    Some(count)
                );
            }
        }
        // And nothing was emitted that the ledger does not know about.
        assert_eq!(
            totals.len(),
            out.ledger.counts["desktop_web"]
                .iter()
                .map(|c| c.len())
                .sum::<usize>()
        );
    }

    #[test]
    fn ledger_marginals_track_spec() {
        let keying = Keying::default_v1();
        let out = generate_cohort(&small_spec(1.0), &keying).unwrap();
        let genders = &out.ledger.labels["gender"];
        let female = genders.iter().filter(|g| *g == "Female").count() as f64;
        let share = female / out.ledger.n_users as f64;
        assert!((share - 0.5).abs() < 0.12, "female share {share}");
    }

    #[test]
    fn activity_distribution_matches_spec() {
        let keying = Keying::default_v1();
        let mut spec = small_spec(1.0);
        spec.n_users = 2500;
        spec.modalities[0].vocab_size = 600;
        spec.modalities[0].activity_log_mean = 3.5;
        spec.modalities[0].activity_log_sd = 1.1;
        let out = generate_cohort(&spec, &keying).unwrap();
        let sample: Vec<f64> = out.ledger.unique_items["desktop_web"]
            .iter()
            .map(|&u| u as f64)
            .collect();
        let (mu, sd) = (3.5, 1.1);
        let ks = stats::ks_statistic(&sample, |x| {
            if x <= 0.0 {
                0.0
            } else {
                stats::normal_cdf((x.ln() - mu) / sd)
            }
        });
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn null_signal_gives_chance_reference() {
        let spec = small_spec(1.0);
        let auc = bayes_reference_auroc(&spec, "gender", 20_000);
        assert!((auc - 0.5).abs() < 0.02, "null reference {auc}");
    }

    #[test]
    fn near_deterministic_signal_saturates_reference() {
        let spec = small_spec(1e6);
        let auc = bayes_reference_auroc(&spec, "gender", 20_000);
        assert!(auc > 0.999, "separable-limit reference {auc}");
    }

    #[test]
    fn planted_foundation_labels_survive_scoring() {
        let keying = Keying::default_v1();
        let mut spec = small_spec(4.0);
        spec.signals = vec![SignalSpec {
            target: "purity".into(),
            class: "High".into(),
            modality: Modality::DesktopWeb,
            item_indices: (10..20).collect(),
            multiplier: 4.0,
        }];
        let out = generate_cohort(&spec, &keying).unwrap();
        let labels = &out.ledger.labels["purity"];
        let high = labels.iter().filter(|l| *l == "High").count();
        assert_eq!(high, spec.n_users / 2, "balanced planting");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec(4.0);
        spec.signals[0].item_indices = vec![5000];
        assert!(matches!(
            generate_cohort(&spec, &Keying::default_v1()),
            Err(SynthError::SpecInvalid(_))
        ));
        let mut spec = small_spec(4.0);
        spec.signals[0].target = "individualist_binding".into();
        assert!(
            spec.validate().is_err(),
            "derived targets are not plantable"
        );
        let mut spec = small_spec(4.0);
        spec.signals[0].multiplier = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let text = r#"
            n_users = 50
            seed = 9

            [[modalities]]
            modality = "desktop_web"
            vocab_size = 40
            activity_log_mean = 2.5
            activity_log_sd = 0.6

            [[signals]]
            target = "gender"
            class = "Female"
            modality = "desktop_web"
            item_indices = [1, 2, 3]
            multiplier = 3.0
        "#;
        let spec = GeneratorSpec::from_toml(text).unwrap();
        assert_eq!(spec.n_users, 50);
        assert_eq!(spec.days, 28);
        assert_eq!(spec.signals[0].item_indices, vec![1, 2, 3]);
        assert!(GeneratorSpec::from_toml("n_users = 0").is_err());
    }
}
