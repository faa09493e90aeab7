//! Canonical in-memory representation of survey data, predictions, and
//! group structure.
//!
//! A [`SurveyDataset`] holds respondents with an ordinal outcome, a
//! group membership, a positive design weight, and optional covariates.
//! Predicted class probabilities live in a [`ProbabilityMatrix`] keyed
//! by respondent id, so external prediction files join by id rather
//! than row order and misalignment is impossible to introduce silently.
//! All types are immutable after construction and safe to share across
//! threads.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::splitter::{Partition, SplitAssignment};

/// Column mapping and label declarations for a dataset CSV file.
///
/// The number of outcome classes is declared, not inferred, so a
/// degenerate sample missing a class still calibrates over all K
/// labels. Group labels are an explicit ordered list; groups may be
/// empty in the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub id_column: String,
    pub outcome_column: String,
    pub group_column: String,
    pub weight_column: String,
    #[serde(default)]
    pub covariate_columns: Vec<String>,
    pub n_classes: usize,
    pub group_labels: Vec<String>,
}

impl DatasetSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One survey respondent. Outcome and group are 1-based indices;
/// `group` indexes into the dataset's `group_labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentRecord {
    pub id: String,
    pub outcome: usize,
    pub group: usize,
    pub weight: f64,
    pub covariates: Option<Vec<f64>>,
}

/// A validated collection of respondents plus the declared class count
/// and group label order.
#[derive(Debug, Clone)]
pub struct SurveyDataset {
    respondents: Vec<RespondentRecord>,
    n_classes: usize,
    group_labels: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl SurveyDataset {
    /// Validate and construct. Rejects duplicate or empty ids,
    /// out-of-range outcomes or groups, nonpositive or nonfinite
    /// weights, and ragged covariate vectors.
    pub fn new(
        respondents: Vec<RespondentRecord>,
        n_classes: usize,
        group_labels: Vec<String>,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(AuditError::Schema(format!(
                "n_classes must be at least 2, got {n_classes}"
            )));
        }
        if group_labels.is_empty() {
            return Err(AuditError::Schema("group label list is empty".into()));
        }
        let mut by_id = HashMap::with_capacity(respondents.len());
        let mut cov_len: Option<usize> = None;
        for (row, r) in respondents.iter().enumerate() {
            if r.id.is_empty() {
                return Err(AuditError::Validation(format!("row {row}: empty id")));
            }
            if by_id.insert(r.id.clone(), row).is_some() {
                return Err(AuditError::Validation(format!(
                    "row {row}: duplicate id '{}'",
                    r.id
                )));
            }
            if r.outcome < 1 || r.outcome > n_classes {
                return Err(AuditError::Schema(format!(
                    "row {row} (id '{}'): outcome {} outside 1..={n_classes}",
                    r.id, r.outcome
                )));
            }
            if r.group < 1 || r.group > group_labels.len() {
                return Err(AuditError::Schema(format!(
                    "row {row} (id '{}'): group index {} outside 1..={}",
                    r.id,
                    r.group,
                    group_labels.len()
                )));
            }
            if r.weight <= 0.0 || !r.weight.is_finite() {
                return Err(AuditError::Schema(format!(
                    "row {row} (id '{}'): weight must be positive and finite, got {}",
                    r.id, r.weight
                )));
            }
            if let Some(c) = &r.covariates {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(AuditError::Schema(format!(
                        "row {row} (id '{}'): nonfinite covariate",
                        r.id
                    )));
                }
                match cov_len {
                    None => cov_len = Some(c.len()),
                    Some(l) if l != c.len() => {
                        return Err(AuditError::Schema(format!(
                            "row {row} (id '{}'): covariate length {} != {}",
                            r.id,
                            c.len(),
                            l
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            respondents,
            n_classes,
            group_labels,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.respondents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.respondents.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn group_label(&self, group: usize) -> &str {
        &self.group_labels[group - 1]
    }

    pub fn respondents(&self) -> &[RespondentRecord] {
        &self.respondents
    }

    pub fn respondent(&self, id: &str) -> Option<&RespondentRecord> {
        self.by_id.get(id).map(|&i| &self.respondents[i])
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Covariate vector length, or None when the dataset has no
    /// covariates at all.
    pub fn covariate_dim(&self) -> Option<usize> {
        self.respondents
            .iter()
            .find_map(|r| r.covariates.as_ref().map(Vec::len))
    }

    pub fn total_weight(&self) -> f64 {
        crate::numeric::compensated_sum(self.respondents.iter().map(|r| r.weight))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.respondents.iter().map(|r| r.id.as_str())
    }
}

/// Per-respondent predicted class probabilities over K ordinal levels.
///
/// Rows are validated nonnegative and renormalized to sum to one; a row
/// whose raw sum strays from 1 by more than the stated tolerance is
/// rejected rather than silently rescaled.
#[derive(Debug, Clone)]
pub struct ProbabilityMatrix {
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    source_tag: String,
    by_id: HashMap<String, usize>,
}

impl ProbabilityMatrix {
    /// Default tolerance for model-produced rows.
    pub const STRICT_TOLERANCE: f64 = 1e-9;
    /// Looser tolerance for rows ingested from external files.
    pub const INGEST_TOLERANCE: f64 = 1e-6;

    /// Validate and construct. Each row must be nonnegative and sum to
    /// 1 within `tolerance`; accepted rows are renormalized to sum to
    /// 1 exactly (up to the final division rounding).
    pub fn new(
        source_tag: impl Into<String>,
        ids: Vec<String>,
        mut rows: Vec<Vec<f64>>,
        tolerance: f64,
    ) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(AuditError::Validation(format!(
                "{} ids but {} probability rows",
                ids.len(),
                rows.len()
            )));
        }
        let k = rows.first().map(Vec::len).unwrap_or(0);
        let mut by_id = HashMap::with_capacity(ids.len());
        for (i, (id, row)) in ids.iter().zip(rows.iter_mut()).enumerate() {
            if by_id.insert(id.clone(), i).is_some() {
                return Err(AuditError::Validation(format!(
                    "duplicate probability row for id '{id}'"
                )));
            }
            if row.len() != k {
                return Err(AuditError::Schema(format!(
                    "id '{id}': probability row has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(AuditError::Schema(format!(
                    "id '{id}': probabilities must be finite and nonnegative"
                )));
            }
            let sum = crate::numeric::compensated_sum(row.iter().copied());
            if (sum - 1.0).abs() > tolerance {
                return Err(AuditError::Schema(format!(
                    "id '{id}': probability row sums to {sum}, outside 1 ± {tolerance}"
                )));
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Ok(Self {
            ids,
            rows,
            source_tag: source_tag.into(),
            by_id,
        })
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }

    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(|&i| self.rows[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(self.rows.iter())
            .map(|(id, row)| (id.as_str(), row.as_slice()))
    }

    /// Write as CSV with header `id,p1,…,pK`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let k = self.n_classes();
        let mut header = vec!["id".to_string()];
        header.extend((1..=k).map(|c| format!("p{c}")));
        w.write_record(&header)?;
        for (id, row) in self.iter() {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|p| format!("{p}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-group summary: unweighted count, summed weight, and (when a
/// split is attached) the calibration-cell count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCell {
    pub label: String,
    pub count: usize,
    pub weight_sum: f64,
    pub cal_count: Option<usize>,
}

/// Group-level cross-tabulation of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupTable {
    pub cells: Vec<GroupCell>,
}

impl GroupTable {
    pub fn cell(&self, label: &str) -> Option<&GroupCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    pub fn total_weight(&self) -> f64 {
        crate::numeric::compensated_sum(self.cells.iter().map(|c| c.weight_sum))
    }

    /// Smallest calibration cell, when calibration counts are present.
    pub fn min_cal_cell(&self) -> Option<(&str, usize)> {
        self.cells
            .iter()
            .filter_map(|c| c.cal_count.map(|n| (c.label.as_str(), n)))
            .min_by_key(|&(_, n)| n)
    }
}

/// Tabulate per-group counts and weight sums; with a split attached,
/// also count each group's calibration cell.
pub fn cross_tabulate(ds: &SurveyDataset, split: Option<&SplitAssignment>) -> GroupTable {
    let g = ds.n_groups();
    let mut counts = vec![0usize; g];
    let mut weights = vec![crate::numeric::CompensatedSum::new(); g];
    let mut cal = vec![0usize; g];
    let lookup = split.map(|s| s.assignment_map());
    for r in ds.respondents() {
        counts[r.group - 1] += 1;
        weights[r.group - 1].add(r.weight);
        if let Some(map) = &lookup {
            if map.get(r.id.as_str()) == Some(&Partition::Cal) {
                cal[r.group - 1] += 1;
            }
        }
    }
    let cells = (0..g)
        .map(|i| GroupCell {
            label: ds.group_labels()[i].clone(),
            count: counts[i],
            weight_sum: weights[i].value(),
            cal_count: split.map(|_| cal[i]),
        })
        .collect();
    GroupTable { cells }
}

/// Load a dataset CSV according to a schema mapping. Rows violating
/// invariants are rejected with row-indexed diagnostics.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<SurveyDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AuditError::Schema(format!("missing column '{name}'")))
    };
    let id_i = col(&schema.id_column)?;
    let outcome_i = col(&schema.outcome_column)?;
    let group_i = col(&schema.group_column)?;
    let weight_i = col(&schema.weight_column)?;
    let cov_i: Vec<usize> = schema
        .covariate_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let group_index: HashMap<&str, usize> = schema
        .group_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i + 1))
        .collect();

    let mut respondents = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| AuditError::Schema(format!("row {row}: short record")))
        };
        let id = field(id_i)?.to_string();
        let outcome: usize = field(outcome_i)?.parse().map_err(|_| {
            AuditError::Schema(format!(
                "row {row}: outcome '{}' is not an integer",
                record.get(outcome_i).unwrap_or("")
            ))
        })?;
        let group_label = field(group_i)?;
        let group = *group_index.get(group_label).ok_or_else(|| {
            AuditError::Schema(format!(
                "row {row}: unknown group label '{group_label}'"
            ))
        })?;
        let weight: f64 = field(weight_i)?.parse().map_err(|_| {
            AuditError::Schema(format!("row {row}: weight is not a number"))
        })?;
        let covariates = if cov_i.is_empty() {
            None
        } else {
            let mut v = Vec::with_capacity(cov_i.len());
            for &i in &cov_i {
                v.push(field(i)?.parse::<f64>().map_err(|_| {
                    AuditError::Schema(format!("row {row}: covariate is not a number"))
                })?);
            }
            Some(v)
        };
        respondents.push(RespondentRecord {
            id,
            outcome,
            group,
            weight,
            covariates,
        });
    }
    SurveyDataset::new(respondents, schema.n_classes, schema.group_labels.clone())
}

/// Write a dataset CSV matching the schema's column names, with
/// shortest-round-trip float formatting so load ∘ save is the identity.
pub fn save_dataset(ds: &SurveyDataset, path: &Path, schema: &DatasetSchema) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        schema.id_column.clone(),
        schema.outcome_column.clone(),
        schema.group_column.clone(),
        schema.weight_column.clone(),
    ];
    header.extend(schema.covariate_columns.iter().cloned());
    w.write_record(&header)?;
    for r in ds.respondents() {
        let mut rec = vec![
            r.id.clone(),
            r.outcome.to_string(),
            ds.group_label(r.group).to_string(),
            format!("{}", r.weight),
        ];
        if let Some(c) = &r.covariates {
            if c.len() != schema.covariate_columns.len() {
                return Err(AuditError::Schema(format!(
                    "id '{}': {} covariates but schema names {} columns",
                    r.id,
                    c.len(),
                    schema.covariate_columns.len()
                )));
            }
            rec.extend(c.iter().map(|v| format!("{v}")));
        } else if !schema.covariate_columns.is_empty() {
            return Err(AuditError::Schema(format!(
                "id '{}': schema names covariate columns but record has none",
                r.id
            )));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Default schema used when generating synthetic datasets: columns
/// `id,outcome,group,weight,x1..xd`.
pub fn synthetic_schema(
    n_classes: usize,
    group_labels: Vec<String>,
    covariate_dim: usize,
) -> DatasetSchema {
    DatasetSchema {
        id_column: "id".into(),
        outcome_column: "outcome".into(),
        group_column: "group".into(),
        weight_column: "weight".into(),
        covariate_columns: (1..=covariate_dim).map(|i| format!("x{i}")).collect(),
        n_classes,
        group_labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, outcome: usize, group: usize, weight: f64) -> RespondentRecord {
        RespondentRecord {
            id: id.into(),
            outcome,
            group,
            weight,
            covariates: None,
        }
    }

    fn two_group_labels() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    #[test]
    fn builds_small_dataset_with_declared_k() {
        let ds = SurveyDataset::new(
            vec![rec("r1", 1, 1, 1.0), rec("r2", 3, 1, 1.0), rec("r3", 5, 2, 1.0)],
            5,
            two_group_labels(),
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_groups(), 2);
        assert_eq!(ds.n_classes(), 5);
    }

    #[test]
    fn rejects_zero_weight_naming_row() {
        let err = SurveyDataset::new(
            vec![rec("r1", 1, 1, 1.0), rec("r2", 2, 1, 0.0)],
            5,
            two_group_labels(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 1"), "message was: {msg}");
        assert!(msg.contains("weight"));
    }

    #[test]
    fn rejects_duplicate_and_out_of_range() {
        let dup = SurveyDataset::new(
            vec![rec("r1", 1, 1, 1.0), rec("r1", 2, 1, 1.0)],
            5,
            two_group_labels(),
        );
        assert!(dup.unwrap_err().to_string().contains("duplicate id"));
        let range = SurveyDataset::new(vec![rec("r1", 6, 1, 1.0)], 5, two_group_labels());
        assert!(range.unwrap_err().to_string().contains("outcome"));
    }

    #[test]
    fn cross_tabulate_counts_groups() {
        let ds = SurveyDataset::new(
            vec![rec("r1", 1, 1, 2.0), rec("r2", 2, 1, 3.0), rec("r3", 3, 2, 5.0)],
            5,
            two_group_labels(),
        )
        .unwrap();
        let t = cross_tabulate(&ds, None);
        assert_eq!(t.cell("A").unwrap().count, 2);
        assert_eq!(t.cell("B").unwrap().count, 1);
        assert_eq!(t.total_count(), 3);
        assert!((t.cell("A").unwrap().weight_sum - 5.0).abs() < 1e-15);
        assert!((t.total_weight() - 10.0).abs() < 1e-15);
    }

    #[test]
    fn empty_group_reports_zero_count() {
        let ds = SurveyDataset::new(vec![rec("r1", 1, 1, 1.0)], 5, two_group_labels()).unwrap();
        let t = cross_tabulate(&ds, None);
        assert_eq!(t.cell("B").unwrap().count, 0);
    }

    #[test]
    fn probability_rows_renormalize_within_tolerance() {
        let m = ProbabilityMatrix::new(
            "test",
            vec!["a".into()],
            vec![vec![0.2, 0.3, 0.5000000001]],
            ProbabilityMatrix::INGEST_TOLERANCE,
        )
        .unwrap();
        let row = m.row("a").unwrap();
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probability_rows_reject_bad_sums_and_negatives() {
        let bad_sum = ProbabilityMatrix::new(
            "test",
            vec!["a".into()],
            vec![vec![0.2, 0.3, 0.3]],
            ProbabilityMatrix::INGEST_TOLERANCE,
        );
        assert!(bad_sum.unwrap_err().to_string().contains("sums to"));
        let neg = ProbabilityMatrix::new(
            "test",
            vec!["a".into()],
            vec![vec![-0.1, 0.6, 0.5]],
            ProbabilityMatrix::INGEST_TOLERANCE,
        );
        assert!(neg.is_err());
    }

    #[test]
    fn dataset_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let schema = synthetic_schema(5, two_group_labels(), 2);
        let mut respondents = Vec::new();
        // Deterministic pseudo-random records covering awkward floats.
        for i in 0..1000u64 {
            let z = crate::rng::splitmix64(i);
            let w = crate::rng::u64_to_unit(z) * 10.0 + 1e-3;
            let x1 = crate::rng::u64_to_unit(crate::rng::splitmix64(z)) * 4.0 - 2.0;
            let x2 = (i as f64) / 3.0;
            respondents.push(RespondentRecord {
                id: format!("r{i:04}"),
                outcome: (i % 5 + 1) as usize,
                group: (i % 2 + 1) as usize,
                weight: w,
                covariates: Some(vec![x1, x2]),
            });
        }
        let ds = SurveyDataset::new(respondents, 5, two_group_labels()).unwrap();
        let path = dir.path().join("ds.csv");
        save_dataset(&ds, &path, &schema).unwrap();
        let loaded = load_dataset(&path, &schema).unwrap();
        assert_eq!(ds.respondents(), loaded.respondents());
    }

    #[test]
    fn load_rejects_unknown_group_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,outcome,group,weight\nr1,1,C,1.0\n").unwrap();
        let schema = synthetic_schema(5, two_group_labels(), 0);
        let err = load_dataset(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("unknown group label 'C'"));
    }
}
