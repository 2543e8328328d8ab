//! Sparse user x item frequency matrices.
//!
//! Rows follow the cohort's user order, columns are a [`Vocabulary`] of
//! modality-qualified item keys (`web:google.com`, `app:Snapchat`), and cell
//! values are total visit counts. Storage is compressed sparse row; no
//! explicit zeros are kept and column indices are sorted within each row, so
//! identical inputs serialize to identical bytes.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Cohort, Modality};
use crate::rng::{derive_seed, rng_from, stream};

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("modality {0:?} has no events in this cohort")]
    EmptyModality(Modality),
    #[error("user sets differ: {0}")]
    UserSetMismatch(String),
    #[error("no rows fall in the requested activity range [{lo}, {hi}]")]
    EmptySelection { lo: usize, hi: usize },
    #[error("matrix dump is malformed at line {line}: {reason}")]
    MalformedDump { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered item keys with reverse lookup. Ordering is descending total
/// frequency with lexicographic tie-breaks, which makes the column layout a
/// pure function of the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    keys: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Equality is defined by the ordered keys; the reverse index is derived.
impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.keys == other.keys
    }
}

impl Vocabulary {
    /// Build from (key, total frequency) pairs.
    pub fn from_totals(totals: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut pairs: Vec<(String, f64)> = totals.into_iter().collect();
        pairs.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("non-finite frequency")
                .then_with(|| a.0.cmp(&b.0))
        });
        Self::from_keys(pairs.into_iter().map(|(k, _)| k).collect())
    }

    pub fn from_keys(keys: Vec<String>) -> Self {
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32))
            .collect();
        Self { keys, index }
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, col: u32) -> &str {
        &self.keys[col as usize]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn col(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    /// Sidecar CSV (column_id, item_key) pairing a triplet dump.
    pub fn write_sidecar(&self, w: impl Write) -> Result<(), MatrixError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["column_id", "item_key"])
            .map_err(csv_io)?;
        for (i, key) in self.keys.iter().enumerate() {
            out.write_record([i.to_string().as_str(), key])
                .map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_sidecar(r: impl std::io::Read) -> Result<Self, MatrixError> {
        let mut reader = csv::Reader::from_reader(r);
        let header: Vec<String> = reader
            .headers()
            .map_err(csv_io)?
            .iter()
            .map(String::from)
            .collect();
        if header != ["column_id", "item_key"] {
            return Err(MatrixError::MalformedDump {
                line: 1,
                reason: format!("sidecar header {header:?}"),
            });
        }
        let mut keys = Vec::new();
        for (at, row) in reader.records().enumerate() {
            let row = row.map_err(csv_io)?;
            let id: usize = row[0].parse().map_err(|_| MatrixError::MalformedDump {
                line: at + 2,
                reason: format!("bad column id {:?}", &row[0]),
            })?;
            if id != at {
                return Err(MatrixError::MalformedDump {
                    line: at + 2,
                    reason: format!("column ids must be dense, got {id} at row {at}"),
                });
            }
            keys.push(row[1].to_string());
        }
        Ok(Vocabulary::from_keys(keys))
    }
}

fn csv_io(e: csv::Error) -> MatrixError {
    MatrixError::Io(std::io::Error::other(e.to_string()))
}

/// Column-selection regimes for the information-quality experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Keep each user's k most visited items.
    TopKByFrequency,
    /// Keep a seeded uniform sample of k of the user's items.
    RandomK,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub mode: SelectionMode,
    pub k: usize,
    /// Consumed only by `RandomK`.
    pub seed: u64,
}

/// CSR matrix over a [`Vocabulary`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SparseMatrix {
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
    vocab: Vocabulary,
}

/// Column-major view used by the tree trainer.
pub struct CscView {
    pub col_offsets: Vec<usize>,
    pub row_indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from per-row item->count maps plus a vocabulary.
    pub fn from_rows(rows: &[HashMap<String, f64>], vocab: Vocabulary) -> Self {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in rows {
            let mut cells: Vec<(u32, f64)> = row
                .iter()
                .filter(|(_, v)| **v != 0.0)
                .filter_map(|(k, v)| vocab.col(k).map(|c| (c, *v)))
                .collect();
            cells.sort_by_key(|(c, _)| *c);
            for (c, v) in cells {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Self {
            row_offsets,
            col_indices,
            values,
            vocab,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.vocab.len()
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Column indices and values of one row, sorted by column.
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_offsets[r + 1] - self.row_offsets[r]
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        let (_, vals) = self.row(r);
        vals.iter().sum()
    }

    /// Fraction of stored cells.
    pub fn density(&self) -> f64 {
        if self.n_rows() == 0 || self.n_cols() == 0 {
            return 0.0;
        }
        self.nnz() as f64 / (self.n_rows() as f64 * self.n_cols() as f64)
    }

    pub fn to_csc(&self) -> CscView {
        let n_cols = self.n_cols();
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &self.col_indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n_cols {
            counts[i + 1] += counts[i];
        }
        let col_offsets = counts.clone();
        let mut cursor = counts;
        let mut row_indices = vec![0u32; self.nnz()];
        let mut values = vec![0f64; self.nnz()];
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let at = cursor[*c as usize];
                row_indices[at] = r as u32;
                values[at] = *v;
                cursor[*c as usize] += 1;
            }
        }
        CscView {
            col_offsets,
            row_indices,
            values,
        }
    }

    /// Column-wise concatenation of two matrices over the same user rows.
    /// Vocabularies must be disjoint (they are when the inputs carry
    /// different modality qualifiers).
    pub fn fuse_early(a: &SparseMatrix, b: &SparseMatrix) -> Result<SparseMatrix, MatrixError> {
        if a.n_rows() != b.n_rows() {
            return Err(MatrixError::UserSetMismatch(format!(
                "{} rows vs {} rows",
                a.n_rows(),
                b.n_rows()
            )));
        }
        for key in b.vocab.keys() {
            if a.vocab.col(key).is_some() {
                return Err(MatrixError::UserSetMismatch(format!(
                    "vocabularies overlap on item key {key:?}"
                )));
            }
        }
        let offset = a.n_cols() as u32;
        let mut keys = a.vocab.keys.clone();
        keys.extend(b.vocab.keys.iter().cloned());
        let vocab = Vocabulary::from_keys(keys);

        let mut row_offsets = Vec::with_capacity(a.n_rows() + 1);
        let mut col_indices = Vec::with_capacity(a.nnz() + b.nnz());
        let mut values = Vec::with_capacity(a.nnz() + b.nnz());
        row_offsets.push(0);
        for r in 0..a.n_rows() {
            let (ca, va) = a.row(r);
            col_indices.extend_from_slice(ca);
            values.extend_from_slice(va);
            let (cb, vb) = b.row(r);
            col_indices.extend(cb.iter().map(|c| c + offset));
            values.extend_from_slice(vb);
            row_offsets.push(col_indices.len());
        }
        Ok(SparseMatrix {
            row_offsets,
            col_indices,
            values,
            vocab,
        })
    }

    /// Per-user column selection. Users with fewer than `k` items keep
    /// everything. Column space is unchanged; dropped cells become zeros.
    pub fn apply_selection(&self, plan: &SelectionPlan) -> SparseMatrix {
        assert!(plan.k >= 1, "selection k must be >= 1");
        // Global totals for TopK tie-breaking.
        let mut global = vec![0f64; self.n_cols()];
        for (&c, &v) in self.col_indices.iter().zip(&self.values) {
            global[c as usize] += v;
        }
        let mut row_offsets = Vec::with_capacity(self.n_rows() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            let mut keep: Vec<(u32, f64)>;
            if cols.len() <= plan.k {
                keep = cols.iter().copied().zip(vals.iter().copied()).collect();
            } else {
                match plan.mode {
                    SelectionMode::TopKByFrequency => {
                        let mut ranked: Vec<(u32, f64)> =
                            cols.iter().copied().zip(vals.iter().copied()).collect();
                        // Per-user count desc, then global count desc, then key.
                        ranked.sort_by(|a, b| {
                            b.1.partial_cmp(&a.1)
                                .unwrap()
                                .then_with(|| {
                                    global[b.0 as usize]
                                        .partial_cmp(&global[a.0 as usize])
                                        .unwrap()
                                })
                                .then_with(|| self.vocab.key(a.0).cmp(self.vocab.key(b.0)))
                        });
                        ranked.truncate(plan.k);
                        keep = ranked;
                    }
                    SelectionMode::RandomK => {
                        let mut rng = rng_from(derive_seed(plan.seed, stream::SELECTION, r as u64));
                        // Partial Fisher-Yates over the row's item slots.
                        let mut slots: Vec<usize> = (0..cols.len()).collect();
                        for i in 0..plan.k {
                            let j = rng.random_range(i..slots.len());
                            slots.swap(i, j);
                        }
                        keep = slots[..plan.k]
                            .iter()
                            .map(|&i| (cols[i], vals[i]))
                            .collect();
                    }
                }
                keep.sort_by_key(|(c, _)| *c);
            }
            for (c, v) in keep {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        SparseMatrix {
            row_offsets,
            col_indices,
            values,
            vocab: self.vocab.clone(),
        }
    }

    /// Keep rows whose unique-item count lies in `[lo, hi]`; columns are
    /// unchanged. Returns the submatrix plus the retained row indices.
    pub fn restrict_to_activity_range(
        &self,
        lo: usize,
        hi: usize,
    ) -> Result<(SparseMatrix, Vec<usize>), MatrixError> {
        assert!(lo <= hi, "activity range must satisfy lo <= hi");
        let rows: Vec<usize> = (0..self.n_rows())
            .filter(|&r| {
                let n = self.row_nnz(r);
                n >= lo && n <= hi
            })
            .collect();
        if rows.is_empty() {
            return Err(MatrixError::EmptySelection { lo, hi });
        }
        Ok((self.select_rows(&rows), rows))
    }

    /// Row-subset copy in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> SparseMatrix {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for &r in rows {
            let (cols, vals) = self.row(r);
            col_indices.extend_from_slice(cols);
            values.extend_from_slice(vals);
            row_offsets.push(col_indices.len());
        }
        SparseMatrix {
            row_offsets,
            col_indices,
            values,
            vocab: self.vocab.clone(),
        }
    }

    /// Columns with at least one nonzero among `rows`.
    pub fn column_support(&self, rows: &[usize]) -> Vec<bool> {
        let mut support = vec![false; self.n_cols()];
        for &r in rows {
            let (cols, _) = self.row(r);
            for &c in cols {
                support[c as usize] = true;
            }
        }
        support
    }

    /// Drop columns where `keep` is false, remapping the vocabulary.
    pub fn restrict_columns(&self, keep: &[bool]) -> SparseMatrix {
        assert_eq!(keep.len(), self.n_cols());
        let mut remap = vec![u32::MAX; self.n_cols()];
        let mut keys = Vec::new();
        for (old, &k) in keep.iter().enumerate() {
            if k {
                remap[old] = keys.len() as u32;
                keys.push(self.vocab.keys[old].clone());
            }
        }
        let vocab = Vocabulary::from_keys(keys);
        let mut row_offsets = Vec::with_capacity(self.n_rows() + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let nc = remap[*c as usize];
                if nc != u32::MAX {
                    col_indices.push(nc);
                    values.push(*v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        SparseMatrix {
            row_offsets,
            col_indices,
            values,
            vocab,
        }
    }

    /// Triplet text dump: header `rows cols nnz`, then `row col value`
    /// lines. The vocabulary sidecar is written separately.
    pub fn write_triplets(&self, mut w: impl Write) -> Result<(), MatrixError> {
        writeln!(w, "{} {} {}", self.n_rows(), self.n_cols(), self.nnz())?;
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{r} {c} {v}")?;
            }
        }
        Ok(())
    }

    pub fn read_triplets(r: impl BufRead, vocab: Vocabulary) -> Result<SparseMatrix, MatrixError> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(MatrixError::MalformedDump {
            line: 1,
            reason: "empty dump".into(),
        })?;
        let header = header?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| MatrixError::MalformedDump {
                line: 1,
                reason: e.to_string(),
            })?;
        if dims.len() != 3 {
            return Err(MatrixError::MalformedDump {
                line: 1,
                reason: "expected `rows cols nnz`".into(),
            });
        }
        let (n_rows, n_cols, nnz) = (dims[0], dims[1], dims[2]);
        if n_cols != vocab.len() {
            return Err(MatrixError::MalformedDump {
                line: 1,
                reason: format!("dump has {n_cols} cols but vocabulary has {}", vocab.len()),
            });
        }
        let mut cells: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_rows];
        let mut seen = 0usize;
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = |reason: &str| MatrixError::MalformedDump {
                line: idx + 1,
                reason: reason.to_string(),
            };
            if parts.len() != 3 {
                return Err(bad("expected `row col value`"));
            }
            let row: usize = parts[0].parse().map_err(|_| bad("bad row"))?;
            let col: u32 = parts[1].parse().map_err(|_| bad("bad col"))?;
            let val: f64 = parts[2].parse().map_err(|_| bad("bad value"))?;
            if row >= n_rows || col as usize >= n_cols {
                return Err(bad("index out of bounds"));
            }
            cells[row].push((col, val));
            seen += 1;
        }
        if seen != nnz {
            return Err(MatrixError::MalformedDump {
                line: 1,
                reason: format!("header says nnz={nnz} but {seen} cells found"),
            });
        }
        let mut row_offsets = vec![0usize];
        let mut col_indices = Vec::with_capacity(seen);
        let mut values = Vec::with_capacity(seen);
        for mut row in cells {
            row.sort_by_key(|(c, _)| *c);
            for (c, v) in row {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(SparseMatrix {
            row_offsets,
            col_indices,
            values,
            vocab,
        })
    }

    /// Restore the key index after deserialization (serde skips it).
    pub fn rebuild_vocab_index(&mut self) {
        self.vocab.rebuild_index();
    }
}

/// Modality qualifier prefix used in item keys.
pub fn item_key(modality: Modality, item: &str) -> String {
    match modality {
        Modality::DesktopWeb | Modality::MobileWeb => format!("web:{item}"),
        Modality::MobileApp => format!("app:{item}"),
    }
}

/// Which event field fills the matrix cells. The baseline pipeline uses
/// visit counts; dwell seconds are ingested and kept available here.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixValue {
    #[default]
    Visits,
    DwellSeconds,
}

/// Build the user x item visit-count matrix for one modality of a cohort.
/// Cell (u, i) totals the user's visits to the item across the observation
/// window; the vocabulary covers every item seen by any retained user.
pub fn build_matrix(cohort: &Cohort, modality: Modality) -> Result<SparseMatrix, MatrixError> {
    build_matrix_with(cohort, modality, MatrixValue::Visits)
}

/// [`build_matrix`] with an explicit cell-value source.
pub fn build_matrix_with(
    cohort: &Cohort,
    modality: Modality,
    value: MatrixValue,
) -> Result<SparseMatrix, MatrixError> {
    let mut rows: Vec<HashMap<String, f64>> = vec![HashMap::new(); cohort.n_users()];
    let mut totals: HashMap<String, f64> = HashMap::new();
    let mut any = false;
    for (slot, events) in cohort.events(modality).iter().enumerate() {
        for ev in events {
            any = true;
            let cell = match value {
                MatrixValue::Visits => ev.visits as f64,
                MatrixValue::DwellSeconds => ev.dwell as f64,
            };
            let key = item_key(modality, &ev.item);
            *rows[slot].entry(key.clone()).or_insert(0.0) += cell;
            *totals.entry(key).or_insert(0.0) += cell;
        }
    }
    if !any {
        return Err(MatrixError::EmptyModality(modality));
    }
    let vocab = Vocabulary::from_totals(totals);
    Ok(SparseMatrix::from_rows(&rows, vocab))
}
