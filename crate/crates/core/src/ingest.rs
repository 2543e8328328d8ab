//! Behaviour-log and survey ingestion.
//!
//! Behaviour logs are UTF-8 JSON-lines, one record per user-day-item with
//! visit and dwell totals; the modality is given by the caller, not the
//! record. Surveys are CSV with one row per user carrying the questionnaire
//! items and the demographic labels. Malformed records are collected into a
//! reject report rather than aborting: large logs contain noise.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("survey header does not match the expected schema: {0}")]
    SchemaMismatch(String),
    #[error("all users were excluded while assembling the cohort")]
    EmptyCohort,
    #[error(
        "observed label {label:?} of attribute {attribute:?} is missing from the reference table"
    )]
    MissingReferenceLabel { attribute: String, label: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Caller-supplied pseudonym; opaque to the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    DesktopWeb,
    MobileWeb,
    MobileApp,
}

impl Modality {
    pub const ALL: [Modality; 3] = [
        Modality::DesktopWeb,
        Modality::MobileWeb,
        Modality::MobileApp,
    ];

    pub fn is_web(self) -> bool {
        matches!(self, Modality::DesktopWeb | Modality::MobileWeb)
    }

    fn slot(self) -> usize {
        match self {
            Modality::DesktopWeb => 0,
            Modality::MobileWeb => 1,
            Modality::MobileApp => 2,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desktop" | "desktop-web" | "desktop_web" => Ok(Modality::DesktopWeb),
            "mobile-web" | "mobile_web" => Ok(Modality::MobileWeb),
            "mobile-apps" | "mobile-app" | "mobile_app" => Ok(Modality::MobileApp),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// Calendar date, ISO-8601 `YYYY-MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CalendarDate {
    pub year: u16,
    pub month: u8,
    pub day: u8,
}

impl CalendarDate {
    pub fn new(year: u16, month: u8, day: u8) -> Result<Self, String> {
        if !(1..=12).contains(&month) {
            return Err(format!("month {month} out of range"));
        }
        let leap =
            year.is_multiple_of(4) && (!year.is_multiple_of(100) || year.is_multiple_of(400));
        let days = match month {
            1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
            4 | 6 | 9 | 11 => 30,
            2 if leap => 29,
            _ => 28,
        };
        if day == 0 || day > days {
            return Err(format!("day {day} out of range for {year}-{month:02}"));
        }
        Ok(Self { year, month, day })
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(format!("{s:?} is not an ISO-8601 date"));
        }
        let year = parts[0].parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month = parts[1]
            .parse()
            .map_err(|_| format!("bad month in {s:?}"))?;
        let day = parts[2].parse().map_err(|_| format!("bad day in {s:?}"))?;
        Self::new(year, month, day)
    }
}

impl fmt::Display for CalendarDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl TryFrom<String> for CalendarDate {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Self::parse(&s)
    }
}

impl From<CalendarDate> for String {
    fn from(d: CalendarDate) -> String {
        d.to_string()
    }
}

/// One user-day-item observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub user: UserId,
    pub modality: Modality,
    pub item: String,
    pub day: CalendarDate,
    pub visits: u32,
    pub dwell: u32,
}

/// Wire format of one behaviour-log line. Field order here fixes the
/// emitted JSON layout.
#[derive(Debug, Serialize, Deserialize)]
struct RawLogRecord {
    user: String,
    day: String,
    item: String,
    visits: i64,
    dwell: i64,
}

/// A malformed behaviour-log line.
#[derive(Debug, Clone, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct LogParse {
    pub events: Vec<BehaviorEvent>,
    pub rejects: Vec<RecordError>,
}

/// Reduce a raw web item to a bare lower-case domain: scheme, path, query,
/// port and a leading `www.` are stripped. Public-suffix reduction is not
/// attempted; the host itself is the canonical form.
pub fn normalize_domain(raw: &str) -> Option<String> {
    let mut s = raw.trim().to_ascii_lowercase();
    if let Some(at) = s.find("://") {
        s = s[at + 3..].to_string();
    }
    if let Some(at) = s.find(['/', '?', '#']) {
        s.truncate(at);
    }
    if let Some(at) = s.rfind(':') {
        if s[at + 1..].chars().all(|c| c.is_ascii_digit()) && at + 1 < s.len() {
            s.truncate(at);
        }
    }
    if let Some(rest) = s.strip_prefix("www.") {
        s = rest.to_string();
    }
    let s = s.trim_matches('.').to_string();
    if s.is_empty() || s.contains(char::is_whitespace) {
        None
    } else {
        Some(s)
    }
}

/// Parse a JSON-lines behaviour log. One event per well-formed record;
/// malformed lines are reported with their line number, never silently
/// dropped.
pub fn parse_behavior_log(
    reader: impl BufRead,
    modality: Modality,
) -> Result<LogParse, IngestError> {
    let mut events = Vec::new();
    let mut rejects = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut reject = |reason: String| {
            rejects.push(RecordError {
                line: lineno,
                reason,
            })
        };
        let raw: RawLogRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                reject(format!("invalid record: {e}"));
                continue;
            }
        };
        if raw.user.trim().is_empty() {
            reject("empty user id".into());
            continue;
        }
        let day = match CalendarDate::parse(&raw.day) {
            Ok(d) => d,
            Err(e) => {
                reject(e);
                continue;
            }
        };
        if raw.visits < 1 {
            reject(format!("visits must be >= 1, got {}", raw.visits));
            continue;
        }
        if raw.dwell < 0 {
            reject(format!("dwell must be >= 0, got {}", raw.dwell));
            continue;
        }
        let item = if modality.is_web() {
            match normalize_domain(&raw.item) {
                Some(d) => d,
                None => {
                    reject(format!(
                        "item {:?} does not normalize to a domain",
                        raw.item
                    ));
                    continue;
                }
            }
        } else {
            let trimmed = raw.item.trim().to_string();
            if trimmed.is_empty() {
                reject("empty app name".into());
                continue;
            }
            trimmed
        };
        events.push(BehaviorEvent {
            user: UserId(raw.user.trim().to_string()),
            modality,
            item,
            day,
            visits: raw.visits as u32,
            dwell: raw.dwell as u32,
        });
    }
    Ok(LogParse { events, rejects })
}

/// Emit events in the JSON-lines wire format. Re-parsing the output yields
/// the same event multiset.
pub fn write_behavior_log(events: &[BehaviorEvent], mut w: impl Write) -> Result<(), IngestError> {
    for ev in events {
        let raw = RawLogRecord {
            user: ev.user.0.clone(),
            day: ev.day.to_string(),
            item: ev.item.clone(),
            visits: ev.visits as i64,
            dwell: ev.dwell as i64,
        };
        serde_json::to_writer(&mut w, &raw).map_err(std::io::Error::other)?;
        writeln!(w)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Demographic attribute registry
// ---------------------------------------------------------------------------

pub struct AttributeDef {
    pub name: &'static str,
    pub display: &'static str,
    pub labels: &'static [&'static str],
}

/// The demographic attributes carried by the intake survey, with their
/// closed label sets. Survey rows using any other label are rejected.
pub const ATTRIBUTES: &[AttributeDef] = &[
    AttributeDef {
        name: "age",
        display: "Age",
        labels: &["18-24", "25-34", "35-49", "50-54", "55-64", "65Plus"],
    },
    AttributeDef {
        name: "education",
        display: "Education",
        labels: &[
            "College Graduate",
            "Post Graduate",
            "Some College",
            "High-school",
            "Trade School",
        ],
    },
    AttributeDef {
        name: "ethnicity",
        display: "Ethnicity",
        labels: &["Asian", "African American", "White", "Hispanic"],
    },
    AttributeDef {
        name: "exercise",
        display: "Exercise",
        labels: &["No", "Yes"],
    },
    AttributeDef {
        name: "gender",
        display: "Gender",
        labels: &["Female", "Male"],
    },
    AttributeDef {
        name: "income",
        display: "Income",
        labels: &[
            "20KLess",
            "20K-30K",
            "30K-50K",
            "50K-75K",
            "75K-100K",
            "100K-150K",
            "150K-200K",
            "200KPlus",
        ],
    },
    AttributeDef {
        name: "political_party",
        display: "Political Party",
        labels: &["Democrat", "Republican", "Libertarian", "Independent"],
    },
    AttributeDef {
        name: "wealth",
        display: "Wealth",
        labels: &[
            "50KLess",
            "50K-100K",
            "100K-250K",
            "250K-500K",
            "500K-1000K",
            "1000KPlus",
        ],
    },
    AttributeDef {
        name: "weight_issues",
        display: "Weight Issues",
        labels: &["No", "Yes"],
    },
    AttributeDef {
        name: "parent",
        display: "Parent",
        labels: &["No", "Yes"],
    },
    AttributeDef {
        name: "smoker",
        display: "Smoker",
        labels: &["No", "Yes"],
    },
    AttributeDef {
        name: "marital_status",
        display: "Marital Status",
        labels: &["Divorced", "Single", "Married", "Living Together"],
    },
];

pub fn attribute(name: &str) -> Option<&'static AttributeDef> {
    ATTRIBUTES.iter().find(|a| a.name == name)
}

// ---------------------------------------------------------------------------
// Survey parsing
// ---------------------------------------------------------------------------

/// Expected survey layout: `user`, the MFQ item columns, the PVQ item
/// columns (named by the keying), then one column per demographic
/// attribute.
#[derive(Debug, Clone)]
pub struct SurveySchema {
    pub mfq_columns: Vec<String>,
    pub pvq_columns: Vec<String>,
    pub mfq_range: (u8, u8),
    pub pvq_range: (u8, u8),
}

impl SurveySchema {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["user".to_string()];
        h.extend(self.mfq_columns.iter().cloned());
        h.extend(self.pvq_columns.iter().cloned());
        h.extend(ATTRIBUTES.iter().map(|a| a.name.to_string()));
        h
    }
}

/// One parsed survey row: raw questionnaire items plus demographic label
/// indices into [`ATTRIBUTES`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub user: UserId,
    pub mfq_items: Vec<u8>,
    pub pvq_items: Vec<u8>,
    /// One label per attribute, aligned with [`ATTRIBUTES`].
    pub demographics: Vec<String>,
}

impl SurveyRecord {
    pub fn demographic(&self, name: &str) -> Option<&str> {
        ATTRIBUTES
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.demographics[i].as_str())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RowError {
    pub row: usize,
    pub field: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct SurveyParse {
    pub records: Vec<SurveyRecord>,
    pub rejects: Vec<RowError>,
}

/// Parse a survey CSV against the schema. The header must match exactly;
/// rows with out-of-range items or unknown demographic labels are rejected
/// individually.
pub fn parse_survey(
    reader: impl std::io::Read,
    schema: &SurveySchema,
) -> Result<SurveyParse, IngestError> {
    let mut csv_reader = csv::Reader::from_reader(reader);
    let header: Vec<String> = csv_reader
        .headers()?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let expected = schema.header();
    if header != expected {
        let detail = if header.len() != expected.len() {
            format!(
                "expected {} columns, found {}",
                expected.len(),
                header.len()
            )
        } else {
            let at = header
                .iter()
                .zip(&expected)
                .position(|(h, e)| h != e)
                .unwrap_or(0);
            format!(
                "column {} is {:?}, expected {:?}",
                at + 1,
                header[at],
                expected[at]
            )
        };
        return Err(IngestError::SchemaMismatch(detail));
    }

    let n_mfq = schema.mfq_columns.len();
    let n_pvq = schema.pvq_columns.len();
    let mut records: Vec<SurveyRecord> = Vec::new();
    let mut rejects = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, row) in csv_reader.records().enumerate() {
        let rowno = idx + 2; // 1-based, after the header
        let row = row?;
        let mut reject = |field: &str, reason: String| {
            rejects.push(RowError {
                row: rowno,
                field: field.to_string(),
                reason,
            })
        };
        if row.len() != expected.len() {
            reject(
                "",
                format!("expected {} fields, found {}", expected.len(), row.len()),
            );
            continue;
        }
        let user = row[0].trim().to_string();
        if user.is_empty() {
            reject("user", "empty user id".into());
            continue;
        }
        if !seen.insert(user.clone()) {
            reject("user", format!("duplicate user {user:?}"));
            continue;
        }
        let parse_items = |offset: usize,
                           cols: &[String],
                           range: (u8, u8)|
         -> Result<Vec<u8>, (String, String)> {
            let mut items = Vec::with_capacity(cols.len());
            for (i, col) in cols.iter().enumerate() {
                let cell = row[offset + i].trim();
                let v: i64 = cell
                    .parse()
                    .map_err(|_| (col.clone(), format!("{cell:?} is not an integer")))?;
                if v < range.0 as i64 || v > range.1 as i64 {
                    return Err((
                        col.clone(),
                        format!("{v} outside the {}..={} scale", range.0, range.1),
                    ));
                }
                items.push(v as u8);
            }
            Ok(items)
        };
        let mfq_items = match parse_items(1, &schema.mfq_columns, schema.mfq_range) {
            Ok(v) => v,
            Err((field, reason)) => {
                reject(&field, reason);
                continue;
            }
        };
        let pvq_items = match parse_items(1 + n_mfq, &schema.pvq_columns, schema.pvq_range) {
            Ok(v) => v,
            Err((field, reason)) => {
                reject(&field, reason);
                continue;
            }
        };
        let demo_offset = 1 + n_mfq + n_pvq;
        let mut demographics = Vec::with_capacity(ATTRIBUTES.len());
        let mut ok = true;
        for (i, attr) in ATTRIBUTES.iter().enumerate() {
            let cell = row[demo_offset + i].trim();
            if attr.labels.contains(&cell) {
                demographics.push(cell.to_string());
            } else {
                reject(
                    attr.name,
                    format!("label {cell:?} is not in the attribute's label set"),
                );
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        records.push(SurveyRecord {
            user: UserId(user),
            mfq_items,
            pvq_items,
            demographics,
        });
    }
    Ok(SurveyParse { records, rejects })
}

/// Emit survey records in the schema's CSV layout.
pub fn write_survey_csv(
    records: &[SurveyRecord],
    schema: &SurveySchema,
    w: impl Write,
) -> Result<(), IngestError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(schema.header())?;
    for r in records {
        let mut row: Vec<String> = Vec::with_capacity(schema.header().len());
        row.push(r.user.0.clone());
        row.extend(r.mfq_items.iter().map(|v| v.to_string()));
        row.extend(r.pvq_items.iter().map(|v| v.to_string()));
        row.extend(r.demographics.iter().cloned());
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Cohort assembly
// ---------------------------------------------------------------------------

/// Validated cohort: retained users (sorted by id), their survey records,
/// and their events per modality. Immutable once assembled.
#[derive(Debug, Clone)]
pub struct Cohort {
    users: Vec<UserId>,
    surveys: Vec<SurveyRecord>,
    /// `events[modality_slot][user_slot]`, sorted by (day, item).
    events: [Vec<Vec<BehaviorEvent>>; 3],
    min_activity: u32,
}

#[derive(Debug, Clone, Serialize, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub users_with_events: usize,
    pub excluded_low_activity: usize,
    pub excluded_no_survey: usize,
    pub surveys_without_events: usize,
    pub retained: usize,
}

impl Cohort {
    /// Assemble a cohort: a user is retained when they have a survey record
    /// and at least `min_activity` unique items in at least one of the
    /// `qualifying` modalities.
    pub fn assemble(
        events: Vec<BehaviorEvent>,
        surveys: Vec<SurveyRecord>,
        min_activity: u32,
        qualifying: &[Modality],
    ) -> Result<(Cohort, FilterReport), IngestError> {
        assert!(min_activity >= 1, "min_activity must be >= 1");
        assert!(!qualifying.is_empty(), "at least one qualifying modality");
        let survey_by_user: HashMap<&str, &SurveyRecord> =
            surveys.iter().map(|s| (s.user.0.as_str(), s)).collect();

        let mut per_user: BTreeMap<String, [Vec<BehaviorEvent>; 3]> = BTreeMap::new();
        for ev in events {
            per_user
                .entry(ev.user.0.clone())
                .or_insert_with(|| [Vec::new(), Vec::new(), Vec::new()])[ev.modality.slot()]
            .push(ev);
        }

        let event_users: HashSet<String> = per_user.keys().cloned().collect();
        let mut report = FilterReport {
            users_with_events: per_user.len(),
            surveys_without_events: surveys
                .iter()
                .filter(|s| !event_users.contains(&s.user.0))
                .count(),
            ..FilterReport::default()
        };
        let mut users = Vec::new();
        let mut kept_surveys = Vec::new();
        let mut kept_events: [Vec<Vec<BehaviorEvent>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (user, mut mods) in per_user {
            let survey = match survey_by_user.get(user.as_str()) {
                Some(s) => (*s).clone(),
                None => {
                    report.excluded_no_survey += 1;
                    continue;
                }
            };
            let qualifies = qualifying.iter().any(|m| {
                let uniq: HashSet<&str> = mods[m.slot()].iter().map(|e| e.item.as_str()).collect();
                uniq.len() >= min_activity as usize
            });
            if !qualifies {
                report.excluded_low_activity += 1;
                continue;
            }
            for m in &mut mods {
                m.sort_by(|a, b| (a.day, &a.item).cmp(&(b.day, &b.item)));
            }
            users.push(UserId(user));
            kept_surveys.push(survey);
            let [d, w, a] = mods;
            kept_events[0].push(d);
            kept_events[1].push(w);
            kept_events[2].push(a);
        }
        report.retained = users.len();
        if users.is_empty() {
            return Err(IngestError::EmptyCohort);
        }
        Ok((
            Cohort {
                users,
                surveys: kept_surveys,
                events: kept_events,
                min_activity,
            },
            report,
        ))
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn surveys(&self) -> &[SurveyRecord] {
        &self.surveys
    }

    pub fn min_activity(&self) -> u32 {
        self.min_activity
    }

    pub fn events(&self, modality: Modality) -> &[Vec<BehaviorEvent>] {
        &self.events[modality.slot()]
    }

    pub fn unique_items(&self, user_slot: usize, modality: Modality) -> usize {
        let uniq: HashSet<&str> = self.events[modality.slot()][user_slot]
            .iter()
            .map(|e| e.item.as_str())
            .collect();
        uniq.len()
    }

    pub fn has_modality(&self, modality: Modality) -> bool {
        self.events[modality.slot()].iter().any(|e| !e.is_empty())
    }
}

/// Spec-surface wrapper: filter on a single modality.
pub fn filter_min_activity(
    events: Vec<BehaviorEvent>,
    surveys: Vec<SurveyRecord>,
    min_activity: u32,
    modality: Modality,
) -> Result<(Cohort, FilterReport), IngestError> {
    Cohort::assemble(events, surveys, min_activity, &[modality])
}

// ---------------------------------------------------------------------------
// Representativeness
// ---------------------------------------------------------------------------

/// Expected proportions per (attribute, label), e.g. census marginals.
#[derive(Debug, Clone, Default)]
pub struct ReferenceTable {
    expected: BTreeMap<(String, String), f64>,
}

impl ReferenceTable {
    pub fn insert(&mut self, attribute: &str, label: &str, proportion: f64) {
        self.expected
            .insert((attribute.to_string(), label.to_string()), proportion);
    }

    /// CSV columns: attribute, label, expected_proportion.
    pub fn from_csv(reader: impl std::io::Read) -> Result<Self, IngestError> {
        let mut csv_reader = csv::Reader::from_reader(reader);
        let header: Vec<String> = csv_reader.headers()?.iter().map(String::from).collect();
        if header != ["attribute", "label", "expected_proportion"] {
            return Err(IngestError::SchemaMismatch(format!(
                "reference header {header:?}"
            )));
        }
        let mut table = ReferenceTable::default();
        for row in csv_reader.records() {
            let row = row?;
            let prop: f64 = row[2].trim().parse().map_err(|_| {
                IngestError::SchemaMismatch(format!("bad proportion {:?}", &row[2]))
            })?;
            table.insert(row[0].trim(), row[1].trim(), prop);
        }
        Ok(table)
    }

    fn attributes(&self) -> Vec<String> {
        let mut names: Vec<String> = self.expected.keys().map(|(a, _)| a.clone()).collect();
        names.dedup();
        names
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReprRow {
    pub attribute: String,
    pub label: String,
    pub observed_count: usize,
    pub observed_proportion: f64,
    pub expected_proportion: f64,
    /// |observed - expected| in percentage points.
    pub abs_difference_points: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RepresentativenessReport {
    pub n_users: usize,
    pub rows: Vec<ReprRow>,
}

/// Compare the cohort's demographic marginals against a reference table
/// covering the same attributes. Every observed label must appear in the
/// reference; reference labels unseen in the cohort report an observed
/// proportion of zero.
pub fn summarize_cohort(
    cohort: &Cohort,
    reference: &ReferenceTable,
) -> Result<RepresentativenessReport, IngestError> {
    let n = cohort.n_users();
    let mut rows = Vec::new();
    for attr_name in reference.attributes() {
        let attr = match attribute(&attr_name) {
            Some(a) => a,
            None => continue,
        };
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in cohort.surveys() {
            let label = s.demographic(attr.name).expect("registry attribute");
            *counts.entry(label).or_insert(0) += 1;
        }
        for (label, count) in &counts {
            if !reference
                .expected
                .contains_key(&(attr_name.clone(), label.to_string()))
            {
                return Err(IngestError::MissingReferenceLabel {
                    attribute: attr_name.clone(),
                    label: label.to_string(),
                });
            }
            let observed = *count as f64 / n as f64;
            let expected = reference.expected[&(attr_name.clone(), label.to_string())];
            rows.push(ReprRow {
                attribute: attr_name.clone(),
                label: label.to_string(),
                observed_count: *count,
                observed_proportion: observed,
                expected_proportion: expected,
                abs_difference_points: (observed - expected).abs() * 100.0,
            });
        }
        for label in attr.labels {
            if !counts.contains_key(label) {
                if let Some(expected) = reference
                    .expected
                    .get(&(attr_name.clone(), label.to_string()))
                {
                    rows.push(ReprRow {
                        attribute: attr_name.clone(),
                        label: label.to_string(),
                        observed_count: 0,
                        observed_proportion: 0.0,
                        expected_proportion: *expected,
                        abs_difference_points: expected * 100.0,
                    });
                }
            }
        }
    }
    Ok(RepresentativenessReport { n_users: n, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_line(user: &str, day: &str, item: &str, visits: i64, dwell: i64) -> String {
        format!(
            r#"{{"user":"{user}","day":"{day}","item":"{item}","visits":{visits},"dwell":{dwell}}}"#
        )
    }

    #[test]
    fn parses_and_normalizes_web_items() {
        let input = log_line("u1", "2015-03-01", "Google.com", 3, 120);
        let out = parse_behavior_log(input.as_bytes(), Modality::DesktopWeb).unwrap();
        assert!(out.rejects.is_empty());
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].item, "google.com");
        assert_eq!(out.events[0].visits, 3);
    }

    #[test]
    fn strips_scheme_and_path() {
        let input = log_line("u1", "2015-03-01", "http://news.site/a/b", 1, 5);
        let out = parse_behavior_log(input.as_bytes(), Modality::DesktopWeb).unwrap();
        assert_eq!(out.events[0].item, "news.site");
    }

    #[test]
    fn empty_stream_is_empty_with_zero_errors() {
        let out = parse_behavior_log("".as_bytes(), Modality::MobileWeb).unwrap();
        assert!(out.events.is_empty());
        assert!(out.rejects.is_empty());
    }

    #[test]
    fn malformed_lines_are_reported_not_dropped() {
        let input = [
            log_line("u1", "2015-03-01", "a.com", 2, 10),
            "{not json".to_string(),
            log_line("u2", "2015-13-01", "b.com", 1, 10), // bad month
            log_line("u3", "2015-03-01", "c.com", 0, 10), // zero visits
            log_line("", "2015-03-01", "d.com", 1, 10),   // empty user
        ]
        .join("\n");
        let out = parse_behavior_log(input.as_bytes(), Modality::DesktopWeb).unwrap();
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.rejects.len(), 4);
        assert_eq!(out.rejects[0].line, 2);
    }

    #[test]
    fn app_names_keep_case_but_trim_whitespace() {
        let input = log_line("u1", "2015-03-01", "  Snapchat ", 1, 30);
        let out = parse_behavior_log(input.as_bytes(), Modality::MobileApp).unwrap();
        assert_eq!(out.events[0].item, "Snapchat");
    }

    #[test]
    fn domain_normalization_cases() {
        assert_eq!(
            normalize_domain("WWW.Example.COM"),
            Some("example.com".into())
        );
        assert_eq!(
            normalize_domain("https://shop.example.com:8080/x?q=1"),
            Some("shop.example.com".into())
        );
        assert_eq!(normalize_domain("   "), None);
        assert_eq!(normalize_domain("http://"), None);
    }

    #[test]
    fn log_round_trip_preserves_event_multiset() {
        let input = [
            log_line("u2", "2015-03-02", "HTTPS://b.org/path", 2, 40),
            log_line("u1", "2015-03-01", "a.com", 3, 120),
            log_line("u1", "2015-03-01", "a.com", 1, 10),
        ]
        .join("\n");
        let first = parse_behavior_log(input.as_bytes(), Modality::DesktopWeb).unwrap();
        let mut buf = Vec::new();
        write_behavior_log(&first.events, &mut buf).unwrap();
        let second = parse_behavior_log(buf.as_slice(), Modality::DesktopWeb).unwrap();
        let sort = |mut evs: Vec<BehaviorEvent>| {
            evs.sort_by(|a, b| {
                (&a.user.0, a.day, &a.item, a.visits).cmp(&(&b.user.0, b.day, &b.item, b.visits))
            });
            evs
        };
        assert_eq!(sort(first.events), sort(second.events));
        assert!(second.rejects.is_empty());
    }

    fn survey_schema() -> SurveySchema {
        SurveySchema {
            mfq_columns: (1..=30).map(|i| format!("mfq_{i:02}")).collect(),
            pvq_columns: vec!["pvq_power_1".into(), "pvq_power_2".into()],
            mfq_range: (0, 5),
            pvq_range: (1, 7),
        }
    }

    fn survey_row(user: &str, mfq: u8, pvq: u8, party: &str) -> String {
        let mut cells = vec![user.to_string()];
        cells.extend((0..30).map(|_| mfq.to_string()));
        cells.extend((0..2).map(|_| pvq.to_string()));
        for attr in ATTRIBUTES {
            if attr.name == "political_party" {
                cells.push(party.to_string());
            } else {
                cells.push(attr.labels[0].to_string());
            }
        }
        cells.join(",")
    }

    fn survey_csv(rows: &[String]) -> String {
        let mut text = survey_schema().header().join(",");
        for r in rows {
            text.push('\n');
            text.push_str(r);
        }
        text
    }

    #[test]
    fn survey_rejects_unknown_party_label() {
        let csv = survey_csv(&[
            survey_row("u1", 3, 4, "Democrat"),
            survey_row("u2", 3, 4, "Green"),
        ]);
        let out = parse_survey(csv.as_bytes(), &survey_schema()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].field, "political_party");
    }

    #[test]
    fn survey_accepts_minimum_scale_row() {
        let csv = survey_csv(&[survey_row("u1", 0, 1, "Democrat")]);
        let out = parse_survey(csv.as_bytes(), &survey_schema()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].mfq_items.iter().all(|&v| v == 0));
    }

    #[test]
    fn survey_rejects_out_of_range_items() {
        let csv = survey_csv(&[survey_row("u1", 6, 4, "Democrat")]);
        let out = parse_survey(csv.as_bytes(), &survey_schema()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.rejects.len(), 1);
    }

    #[test]
    fn survey_header_mismatch_is_fatal() {
        let bad = "user,wrong\n1,2";
        assert!(matches!(
            parse_survey(bad.as_bytes(), &survey_schema()),
            Err(IngestError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn survey_round_trip() {
        let schema = survey_schema();
        let csv = survey_csv(&[
            survey_row("u1", 3, 4, "Democrat"),
            survey_row("u2", 2, 5, "Republican"),
        ]);
        let parsed = parse_survey(csv.as_bytes(), &schema).unwrap();
        let mut buf = Vec::new();
        write_survey_csv(&parsed.records, &schema, &mut buf).unwrap();
        let reparsed = parse_survey(buf.as_slice(), &schema).unwrap();
        assert_eq!(parsed.records, reparsed.records);
    }

    fn events_for(user: &str, n_unique: usize) -> Vec<BehaviorEvent> {
        (0..n_unique)
            .map(|i| BehaviorEvent {
                user: UserId(user.into()),
                modality: Modality::DesktopWeb,
                item: format!("site{i:04}.example"),
                day: CalendarDate::new(2015, 3, 1).unwrap(),
                visits: 1,
                dwell: 10,
            })
            .collect()
    }

    fn survey_for(user: &str) -> SurveyRecord {
        SurveyRecord {
            user: UserId(user.into()),
            mfq_items: vec![3; 30],
            pvq_items: vec![4; 2],
            demographics: ATTRIBUTES.iter().map(|a| a.labels[0].to_string()).collect(),
        }
    }

    #[test]
    fn activity_threshold_is_inclusive() {
        let mut events = events_for("exactly30", 30);
        events.extend(events_for("only29", 29));
        let surveys = vec![survey_for("exactly30"), survey_for("only29")];
        let (cohort, report) =
            filter_min_activity(events, surveys, 30, Modality::DesktopWeb).unwrap();
        assert_eq!(cohort.n_users(), 1);
        assert_eq!(cohort.users()[0].0, "exactly30");
        assert_eq!(report.excluded_low_activity, 1);
    }

    #[test]
    fn unique_items_not_total_visits_drive_the_filter() {
        // 40 visit events over 2 unique items must not qualify at N=30.
        let mut events = Vec::new();
        for day in 1..=20u8 {
            for item in ["a.com", "b.com"] {
                events.push(BehaviorEvent {
                    user: UserId("heavy".into()),
                    modality: Modality::DesktopWeb,
                    item: item.into(),
                    day: CalendarDate::new(2015, 3, day).unwrap(),
                    visits: 5,
                    dwell: 10,
                });
            }
        }
        let err = filter_min_activity(events, vec![survey_for("heavy")], 30, Modality::DesktopWeb);
        assert!(matches!(err, Err(IngestError::EmptyCohort)));
    }

    #[test]
    fn filter_is_idempotent_and_monotone() {
        let mut events = Vec::new();
        let mut surveys = Vec::new();
        for (i, n) in [10usize, 25, 30, 45, 80].iter().enumerate() {
            let user = format!("u{i}");
            events.extend(events_for(&user, *n));
            surveys.push(survey_for(&user));
        }
        let (c30, _) =
            filter_min_activity(events.clone(), surveys.clone(), 30, Modality::DesktopWeb).unwrap();
        // Idempotent: re-filtering the retained users changes nothing.
        let again_events: Vec<BehaviorEvent> = c30
            .events(Modality::DesktopWeb)
            .iter()
            .flatten()
            .cloned()
            .collect();
        let (c30b, _) = filter_min_activity(
            again_events,
            c30.surveys().to_vec(),
            30,
            Modality::DesktopWeb,
        )
        .unwrap();
        assert_eq!(c30.users(), c30b.users());
        // Monotone: N' > N retains a subset.
        let (c45, _) = filter_min_activity(events, surveys, 45, Modality::DesktopWeb).unwrap();
        assert!(c45.users().iter().all(|u| c30.users().contains(u)));
        assert!(c45.n_users() < c30.n_users());
    }

    #[test]
    fn every_retained_user_has_survey_and_events() {
        let mut events = events_for("with_survey", 35);
        events.extend(events_for("no_survey", 40));
        let (cohort, report) = filter_min_activity(
            events,
            vec![survey_for("with_survey")],
            30,
            Modality::DesktopWeb,
        )
        .unwrap();
        assert_eq!(cohort.n_users(), 1);
        assert_eq!(report.excluded_no_survey, 1);
        assert_eq!(cohort.surveys().len(), cohort.n_users());
    }

    #[test]
    fn summarize_matches_known_proportions() {
        let mut events = Vec::new();
        let mut surveys = Vec::new();
        for i in 0..10 {
            let user = format!("u{i}");
            events.extend(events_for(&user, 30));
            let mut s = survey_for(&user);
            let gender_at = ATTRIBUTES.iter().position(|a| a.name == "gender").unwrap();
            s.demographics[gender_at] = if i < 6 { "Female" } else { "Male" }.to_string();
            surveys.push(s);
        }
        let (cohort, _) = filter_min_activity(events, surveys, 30, Modality::DesktopWeb).unwrap();
        let mut reference = ReferenceTable::default();
        reference.insert("gender", "Female", 0.508);
        reference.insert("gender", "Male", 0.492);
        let report = summarize_cohort(&cohort, &reference).unwrap();
        let female = report.rows.iter().find(|r| r.label == "Female").unwrap();
        assert!((female.observed_proportion - 0.6).abs() < 1e-12);
        assert!((female.abs_difference_points - 9.2).abs() < 1e-9);

        // Identity reference: all differences zero.
        let mut identity = ReferenceTable::default();
        identity.insert("gender", "Female", 0.6);
        identity.insert("gender", "Male", 0.4);
        let report = summarize_cohort(&cohort, &identity).unwrap();
        assert!(report.rows.iter().all(|r| r.abs_difference_points < 1e-9));

        // Missing label in the reference is an error.
        let mut partial = ReferenceTable::default();
        partial.insert("gender", "Female", 1.0);
        assert!(matches!(
            summarize_cohort(&cohort, &partial),
            Err(IngestError::MissingReferenceLabel { .. })
        ));
    }
}
