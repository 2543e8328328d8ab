//! Questionnaire scoring and target construction.
//!
//! The moral-foundations questionnaire (30 items, 0-5 scale) averages six
//! items per foundation; care and fairness collapse into the individualizing
//! superfoundation, loyalty, authority and purity into binding. The portrait
//! values questionnaire (two items per basic value, 1-7 scale) averages
//! items per value and subtracts the respondent's mean over all value items
//! to correct scale-use differences; the four higher-order quadrants are
//! sums of their constituent values' raw items. Every continuous score is
//! quantised into Low/High at the cohort median.
//!
//! The item-to-scale assignment lives in a versioned keying file
//! (`data/keying_v1.csv`) so it is auditable and replaceable.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{SurveyRecord, SurveySchema, UserId, ATTRIBUTES};
use crate::stats;

pub const MFQ_ITEMS: usize = 30;
pub const MFQ_SCALE: (u8, u8) = (0, 5);
pub const PVQ_SCALE: (u8, u8) = (1, 7);

pub const FOUNDATIONS: [&str; 5] = ["care", "fairness", "loyalty", "authority", "purity"];

pub const VALUES: [&str; 10] = [
    "self_direction",
    "stimulation",
    "hedonism",
    "achievement",
    "power",
    "security",
    "conformity",
    "tradition",
    "benevolence",
    "universalism",
];

/// Quadrant name -> constituent basic values. Hedonism borders two quadrants
/// and belongs to neither sum.
pub const QUADRANTS: [(&str, &[&str]); 4] = [
    ("openness_to_change", &["self_direction", "stimulation"]),
    ("conservation", &["security", "conformity", "tradition"]),
    ("self_enhancement", &["power", "achievement"]),
    ("self_transcendence", &["universalism", "benevolence"]),
];

#[derive(Debug, Error)]
pub enum PsychError {
    #[error("expected {expected} items, got {got}")]
    WrongItemCount { expected: usize, got: usize },
    #[error("item {index} value {value} is outside the {lo}..={hi} scale")]
    OutOfRangeItem {
        index: usize,
        value: u8,
        lo: u8,
        hi: u8,
    },
    #[error("median binarization needs at least 2 scores, got {0}")]
    TooFewScores(usize),
    #[error("user list and survey list differ in length ({users} vs {surveys})")]
    MissingSurvey { users: usize, surveys: usize },
    #[error("keying file is invalid: {0}")]
    BadKeying(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Keying
// ---------------------------------------------------------------------------

/// Item-to-scale assignment for both instruments. Columns are ordered; the
/// positions recorded here index into a survey record's item vectors.
#[derive(Debug, Clone)]
pub struct Keying {
    mfq_columns: Vec<String>,
    foundation_items: Vec<Vec<usize>>,
    pvq_columns: Vec<String>,
    value_items: Vec<Vec<usize>>,
}

impl Keying {
    /// The keying shipped with the crate (`data/keying_v1.csv`).
    pub fn default_v1() -> Self {
        Self::from_csv(include_str!("../data/keying_v1.csv").as_bytes())
            .expect("bundled keying file is valid")
    }

    /// Load a keying from CSV with columns instrument, item_id, scale_id.
    /// MFQ items must number exactly 30 with six per foundation.
    pub fn from_csv(reader: impl std::io::Read) -> Result<Self, PsychError> {
        let mut csv_reader = csv::Reader::from_reader(reader);
        let header: Vec<String> = csv_reader.headers()?.iter().map(String::from).collect();
        if header != ["instrument", "item_id", "scale_id"] {
            return Err(PsychError::BadKeying(format!("header {header:?}")));
        }
        let mut mfq_columns = Vec::new();
        let mut foundation_items: Vec<Vec<usize>> = vec![Vec::new(); FOUNDATIONS.len()];
        let mut pvq_columns = Vec::new();
        let mut value_items: Vec<Vec<usize>> = vec![Vec::new(); VALUES.len()];
        for row in csv_reader.records() {
            let row = row?;
            let (instrument, item_id, scale_id) = (&row[0], &row[1], &row[2]);
            match instrument {
                "mfq" => {
                    let f = FOUNDATIONS
                        .iter()
                        .position(|n| *n == scale_id)
                        .ok_or_else(|| {
                            PsychError::BadKeying(format!("unknown foundation {scale_id:?}"))
                        })?;
                    foundation_items[f].push(mfq_columns.len());
                    mfq_columns.push(item_id.to_string());
                }
                "pvq" => {
                    let v = VALUES.iter().position(|n| *n == scale_id).ok_or_else(|| {
                        PsychError::BadKeying(format!("unknown value {scale_id:?}"))
                    })?;
                    value_items[v].push(pvq_columns.len());
                    pvq_columns.push(item_id.to_string());
                }
                other => {
                    return Err(PsychError::BadKeying(format!(
                        "unknown instrument {other:?}"
                    )))
                }
            }
        }
        if mfq_columns.len() != MFQ_ITEMS {
            return Err(PsychError::BadKeying(format!(
                "expected {MFQ_ITEMS} mfq items, got {}",
                mfq_columns.len()
            )));
        }
        for (f, items) in foundation_items.iter().enumerate() {
            if items.len() != 6 {
                return Err(PsychError::BadKeying(format!(
                    "foundation {} has {} items, expected 6",
                    FOUNDATIONS[f],
                    items.len()
                )));
            }
        }
        for (v, items) in value_items.iter().enumerate() {
            if items.is_empty() {
                return Err(PsychError::BadKeying(format!(
                    "value {} has no items",
                    VALUES[v]
                )));
            }
        }
        Ok(Self {
            mfq_columns,
            foundation_items,
            pvq_columns,
            value_items,
        })
    }

    pub fn survey_schema(&self) -> SurveySchema {
        SurveySchema {
            mfq_columns: self.mfq_columns.clone(),
            pvq_columns: self.pvq_columns.clone(),
            mfq_range: MFQ_SCALE,
            pvq_range: PVQ_SCALE,
        }
    }

    pub fn n_pvq_items(&self) -> usize {
        self.pvq_columns.len()
    }

    pub fn foundation_items(&self, foundation: usize) -> &[usize] {
        &self.foundation_items[foundation]
    }

    pub fn value_items(&self, value: usize) -> &[usize] {
        &self.value_items[value]
    }
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoralScores {
    pub care: f64,
    pub fairness: f64,
    pub loyalty: f64,
    pub authority: f64,
    pub purity: f64,
    pub individualizing: f64,
    pub binding: f64,
}

impl MoralScores {
    pub fn foundation(&self, index: usize) -> f64 {
        [
            self.care,
            self.fairness,
            self.loyalty,
            self.authority,
            self.purity,
        ][index]
    }
}

/// Which superfoundation dominates. Equal means count as Binder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoralLeaning {
    Individualist,
    Binder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueScores {
    /// Mean of each value's items.
    pub raw: Vec<f64>,
    /// Raw score minus the respondent's mean over all value items.
    pub adjusted: Vec<f64>,
    /// Sum of raw items per quadrant, order per [`QUADRANTS`].
    pub quadrants: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryLabel {
    Low,
    High,
}

fn check_items(items: &[u8], expected: usize, scale: (u8, u8)) -> Result<(), PsychError> {
    if items.len() != expected {
        return Err(PsychError::WrongItemCount {
            expected,
            got: items.len(),
        });
    }
    for (index, &value) in items.iter().enumerate() {
        if value < scale.0 || value > scale.1 {
            return Err(PsychError::OutOfRangeItem {
                index,
                value,
                lo: scale.0,
                hi: scale.1,
            });
        }
    }
    Ok(())
}

/// Average the six keyed items per foundation. Superfoundations are left
/// unset; see [`derive_superfoundations`].
pub fn score_mfq(items: &[u8], keying: &Keying) -> Result<MoralScores, PsychError> {
    check_items(items, MFQ_ITEMS, MFQ_SCALE)?;
    let mean_of = |idxs: &[usize]| -> f64 {
        idxs.iter().map(|&i| items[i] as f64).sum::<f64>() / idxs.len() as f64
    };
    Ok(MoralScores {
        care: mean_of(keying.foundation_items(0)),
        fairness: mean_of(keying.foundation_items(1)),
        loyalty: mean_of(keying.foundation_items(2)),
        authority: mean_of(keying.foundation_items(3)),
        purity: mean_of(keying.foundation_items(4)),
        individualizing: f64::NAN,
        binding: f64::NAN,
    })
}

/// Fill the superfoundations: individualizing = mean(care, fairness),
/// binding = mean(loyalty, authority, purity). The leaning label follows the
/// larger mean; ties go to Binder.
pub fn derive_superfoundations(scores: &MoralScores) -> (MoralScores, MoralLeaning) {
    let individualizing = (scores.care + scores.fairness) / 2.0;
    let binding = (scores.loyalty + scores.authority + scores.purity) / 3.0;
    let leaning = if individualizing > binding {
        MoralLeaning::Individualist
    } else {
        MoralLeaning::Binder
    };
    (
        MoralScores {
            individualizing,
            binding,
            ..*scores
        },
        leaning,
    )
}

/// Score the portrait values questionnaire: per-value item means, then
/// respondent-mean centering over all value items; quadrants are the sums of
/// their constituent values' raw items.
pub fn score_pvq(items: &[u8], keying: &Keying) -> Result<ValueScores, PsychError> {
    check_items(items, keying.n_pvq_items(), PVQ_SCALE)?;
    let raw: Vec<f64> = (0..VALUES.len())
        .map(|v| {
            let idxs = keying.value_items(v);
            idxs.iter().map(|&i| items[i] as f64).sum::<f64>() / idxs.len() as f64
        })
        .collect();
    let respondent_mean =
        items.iter().map(|&v| v as f64).sum::<f64>() / keying.n_pvq_items() as f64;
    let adjusted: Vec<f64> = raw.iter().map(|r| r - respondent_mean).collect();
    let quadrants: Vec<f64> = QUADRANTS
        .iter()
        .map(|(_, members)| {
            members
                .iter()
                .map(|m| {
                    let v = VALUES.iter().position(|n| n == m).expect("known value");
                    keying
                        .value_items(v)
                        .iter()
                        .map(|&i| items[i] as f64)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    Ok(ValueScores {
        raw,
        adjusted,
        quadrants,
    })
}

// ---------------------------------------------------------------------------
// Median binarization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Binarized {
    pub labels: Vec<BinaryLabel>,
    pub threshold: f64,
    /// Scores exactly at the median (labelled Low).
    pub tie_count: usize,
    /// All scores equal; the target cannot be trained.
    pub degenerate: bool,
}

/// Quantise scores at the cohort median: strictly above goes High, at or
/// below goes Low. A constant distribution yields an all-Low label set
/// flagged untrainable.
pub fn binarize_at_median(scores: &[f64]) -> Result<Binarized, PsychError> {
    if scores.len() < 2 {
        return Err(PsychError::TooFewScores(scores.len()));
    }
    let threshold = stats::median(scores);
    let labels: Vec<BinaryLabel> = scores
        .iter()
        .map(|&s| {
            if s > threshold {
                BinaryLabel::High
            } else {
                BinaryLabel::Low
            }
        })
        .collect();
    let tie_count = scores.iter().filter(|&&s| s == threshold).count();
    let degenerate = labels.iter().all(|&l| l == BinaryLabel::Low)
        || labels.iter().all(|&l| l == BinaryLabel::High);
    Ok(Binarized {
        labels,
        threshold,
        tie_count,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Target assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    MoralFoundation,
    Superfoundation,
    Quadrant,
    BasicValue,
    Demographic,
    RestrictedDemographic,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetDef {
    pub name: String,
    pub display: String,
    pub kind: TargetKind,
    pub labels: Vec<String>,
    /// Median threshold for binarized targets.
    pub threshold: Option<f64>,
    pub tie_count: usize,
    pub untrainable: bool,
}

/// Per-user labels for every prediction target, plus the continuous scores
/// they were derived from.
#[derive(Debug, Clone)]
pub struct TargetTable {
    pub users: Vec<UserId>,
    pub targets: Vec<TargetDef>,
    /// `labels[target][user]`, an index into the target's label set. `None`
    /// marks users excluded from a restricted target.
    pub labels: Vec<Vec<Option<u16>>>,
    /// (column name, per-user values) in emission order.
    pub continuous: Vec<(String, Vec<f64>)>,
}

impl TargetTable {
    pub fn target(&self, name: &str) -> Option<usize> {
        self.targets.iter().position(|t| t.name == name)
    }

    pub fn target_names(&self) -> Vec<&str> {
        self.targets.iter().map(|t| t.name.as_str()).collect()
    }

    /// Label ids and row indices of users that carry a label for `target`.
    pub fn labelled_rows(&self, target: usize) -> (Vec<usize>, Vec<u32>) {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (u, l) in self.labels[target].iter().enumerate() {
            if let Some(id) = l {
                rows.push(u);
                y.push(*id as u32);
            }
        }
        (rows, y)
    }

    /// One row per user: continuous scores then every target label.
    pub fn write_scored_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["user".to_string()];
        header.extend(self.continuous.iter().map(|(n, _)| n.clone()));
        header.extend(self.targets.iter().map(|t| format!("label_{}", t.name)));
        out.write_record(&header)?;
        for (u, user) in self.users.iter().enumerate() {
            let mut row = vec![user.0.clone()];
            for (_, vals) in &self.continuous {
                row.push(format!("{}", vals[u]));
            }
            for (t, def) in self.targets.iter().enumerate() {
                row.push(match self.labels[t][u] {
                    Some(id) => def.labels[id as usize].clone(),
                    None => String::new(),
                });
            }
            out.write_record(&row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn binary_target(
    name: &str,
    display: &str,
    kind: TargetKind,
    scores: &[f64],
) -> Result<(TargetDef, Vec<Option<u16>>), PsychError> {
    let bin = binarize_at_median(scores)?;
    let labels = bin
        .labels
        .iter()
        .map(|l| Some(matches!(l, BinaryLabel::High) as u16))
        .collect();
    Ok((
        TargetDef {
            name: name.to_string(),
            display: display.to_string(),
            kind,
            labels: vec!["Low".into(), "High".into()],
            threshold: Some(bin.threshold),
            tie_count: bin.tie_count,
            untrainable: bin.degenerate,
        },
        labels,
    ))
}

fn display_name(snake: &str) -> String {
    let mut out = String::new();
    for (i, part) in snake.split('_').enumerate() {
        if i == 0 {
            let mut chars = part.chars();
            if let Some(c) = chars.next() {
                out.push(c.to_ascii_uppercase());
                out.push_str(chars.as_str());
            }
        } else {
            out.push('-');
            out.push_str(part);
        }
    }
    out
}

/// Build the full target table for a scored cohort: five foundations, the
/// individualist/binder split, ten values, four quadrants, the demographic
/// attributes, and the two-party restriction of political party.
pub fn assemble_targets(
    users: &[UserId],
    surveys: &[SurveyRecord],
    keying: &Keying,
) -> Result<TargetTable, PsychError> {
    if users.len() != surveys.len() {
        return Err(PsychError::MissingSurvey {
            users: users.len(),
            surveys: surveys.len(),
        });
    }
    if users.is_empty() {
        return Ok(TargetTable {
            users: Vec::new(),
            targets: Vec::new(),
            labels: Vec::new(),
            continuous: Vec::new(),
        });
    }

    let mut morals = Vec::with_capacity(users.len());
    let mut leanings = Vec::with_capacity(users.len());
    let mut values = Vec::with_capacity(users.len());
    for s in surveys {
        let (m, leaning) = derive_superfoundations(&score_mfq(&s.mfq_items, keying)?);
        let v = score_pvq(&s.pvq_items, keying)?;
        morals.push(m);
        leanings.push(leaning);
        values.push(v);
    }

    let mut targets = Vec::new();
    let mut labels: Vec<Vec<Option<u16>>> = Vec::new();
    let mut continuous: Vec<(String, Vec<f64>)> = Vec::new();

    // Moral foundations, alphabetical as reported.
    let mut foundation_order: Vec<usize> = (0..FOUNDATIONS.len()).collect();
    foundation_order.sort_by_key(|&f| FOUNDATIONS[f]);
    for f in foundation_order {
        let scores: Vec<f64> = morals.iter().map(|m| m.foundation(f)).collect();
        continuous.push((FOUNDATIONS[f].to_string(), scores.clone()));
        let (def, l) = binary_target(
            FOUNDATIONS[f],
            &display_name(FOUNDATIONS[f]),
            TargetKind::MoralFoundation,
            &scores,
        )?;
        targets.push(def);
        labels.push(l);
    }
    continuous.push((
        "individualizing".into(),
        morals.iter().map(|m| m.individualizing).collect(),
    ));
    continuous.push(("binding".into(), morals.iter().map(|m| m.binding).collect()));
    let leaning_labels: Vec<Option<u16>> = leanings
        .iter()
        .map(|l| Some(matches!(l, MoralLeaning::Binder) as u16))
        .collect();
    let n_binders = leaning_labels.iter().filter(|l| **l == Some(1)).count();
    targets.push(TargetDef {
        name: "individualist_binding".into(),
        display: "Individualist/Binding".into(),
        kind: TargetKind::Superfoundation,
        labels: vec!["Individualist".into(), "Binder".into()],
        threshold: None,
        tie_count: morals
            .iter()
            .filter(|m| m.individualizing == m.binding)
            .count(),
        untrainable: n_binders == 0 || n_binders == users.len(),
    });
    labels.push(leaning_labels);

    // Quadrants then basic values, alphabetical by display name.
    let mut quadrant_order: Vec<usize> = (0..QUADRANTS.len()).collect();
    quadrant_order.sort_by_key(|&q| QUADRANTS[q].0);
    for q in quadrant_order {
        let scores: Vec<f64> = values.iter().map(|v| v.quadrants[q]).collect();
        let display = match QUADRANTS[q].0 {
            "openness_to_change" => "Openness".to_string(),
            other => display_name(other),
        };
        continuous.push((QUADRANTS[q].0.to_string(), scores.clone()));
        let (def, l) = binary_target(QUADRANTS[q].0, &display, TargetKind::Quadrant, &scores)?;
        targets.push(def);
        labels.push(l);
    }
    let mut value_order: Vec<usize> = (0..VALUES.len()).collect();
    value_order.sort_by_key(|&v| VALUES[v]);
    for v in value_order {
        let scores: Vec<f64> = values.iter().map(|s| s.adjusted[v]).collect();
        continuous.push((VALUES[v].to_string(), scores.clone()));
        let (def, l) = binary_target(
            VALUES[v],
            &display_name(VALUES[v]),
            TargetKind::BasicValue,
            &scores,
        )?;
        targets.push(def);
        labels.push(l);
    }

    // Demographics.
    for attr in ATTRIBUTES {
        let label_ids: Vec<Option<u16>> = surveys
            .iter()
            .map(|s| {
                let label = s.demographic(attr.name).expect("registry attribute");
                Some(attr.labels.iter().position(|l| *l == label).unwrap() as u16)
            })
            .collect();
        let distinct: std::collections::HashSet<u16> =
            label_ids.iter().map(|l| l.unwrap()).collect();
        targets.push(TargetDef {
            name: attr.name.to_string(),
            display: attr.display.to_string(),
            kind: TargetKind::Demographic,
            labels: attr.labels.iter().map(|l| l.to_string()).collect(),
            threshold: None,
            tie_count: 0,
            untrainable: distinct.len() < 2,
        });
        labels.push(label_ids);
    }

    // Two-party restriction of political party: other users carry no label.
    let two_party: Vec<Option<u16>> = surveys
        .iter()
        .map(|s| match s.demographic("political_party").unwrap() {
            "Democrat" => Some(0),
            "Republican" => Some(1),
            _ => None,
        })
        .collect();
    let n_dem = two_party.iter().filter(|l| **l == Some(0)).count();
    let n_rep = two_party.iter().filter(|l| **l == Some(1)).count();
    targets.push(TargetDef {
        name: "political_party_two_party".into(),
        display: "Political Party (Dem vs Rep)".into(),
        kind: TargetKind::RestrictedDemographic,
        labels: vec!["Democrat".into(), "Republican".into()],
        threshold: None,
        tie_count: 0,
        untrainable: n_dem == 0 || n_rep == 0,
    });
    labels.push(two_party);

    Ok(TargetTable {
        users: users.to_vec(),
        targets,
        labels,
        continuous,
    })
}

/// Map attribute label counts to a prevalence table (used for reports).
pub fn label_counts(table: &TargetTable, target: usize) -> BTreeMap<String, usize> {
    let def = &table.targets[target];
    let mut counts = BTreeMap::new();
    for l in table.labels[target].iter().flatten() {
        *counts
            .entry(def.labels[*l as usize].clone())
            .or_insert(0usize) += 1;
    }
    counts
}
