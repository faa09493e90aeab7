//! Base predictors producing [`ProbabilityMatrix`] objects: a
//! covariate-free prior baseline, a proportional-odds ordered-logistic
//! model, and an ingestion path for probabilities computed elsewhere.

mod ordered_logistic;

pub use ordered_logistic::{
    fit_ordered_logistic, FitMeta, FitOptions, OrderedLogisticModel, Standardization,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ProbabilityMatrix, SurveyDataset};
use crate::error::{AuditError, Result};

/// Additive smoothing mass per class in the prior baseline. Keeps
/// scores finite and ties breakable when a class is absent from
/// training.
pub const PRIOR_SMOOTHING: f64 = 1e-6;

/// Covariate-free baseline: the training-set marginal class
/// distribution, lightly smoothed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorModel {
    pub class_frequencies: Vec<f64>,
}

/// Fit the prior baseline on the training outcomes: each class gets
/// (count/n + ε) / (1 + Kε), so absent classes keep a tiny positive
/// mass and the vector sums to 1 within 1e-12.
pub fn fit_prior(ds: &SurveyDataset, train_ids: &[String]) -> Result<PriorModel> {
    if train_ids.is_empty() {
        return Err(AuditError::Validation("empty training set".into()));
    }
    let k = ds.n_classes();
    let mut counts = vec![0usize; k];
    for id in train_ids {
        let r = ds
            .respondent(id)
            .ok_or_else(|| AuditError::Validation(format!("unknown id '{id}'")))?;
        counts[r.outcome - 1] += 1;
    }
    let n = train_ids.len() as f64;
    let denom = 1.0 + k as f64 * PRIOR_SMOOTHING;
    let class_frequencies = counts
        .iter()
        .map(|&c| (c as f64 / n + PRIOR_SMOOTHING) / denom)
        .collect();
    Ok(PriorModel { class_frequencies })
}

impl PriorModel {
    /// Every requested respondent gets the same row: the training
    /// marginal distribution.
    pub fn predict_probs(&self, ds: &SurveyDataset, ids: &[String]) -> Result<ProbabilityMatrix> {
        for id in ids {
            if !ds.contains_id(id) {
                return Err(AuditError::Validation(format!("unknown id '{id}'")));
            }
        }
        let rows = vec![self.class_frequencies.clone(); ids.len()];
        ProbabilityMatrix::new(
            "prior",
            ids.to_vec(),
            rows,
            ProbabilityMatrix::STRICT_TOLERANCE,
        )
    }
}

/// Read an externally computed probability matrix (CSV `id,p1,…,pK`)
/// and join it to the dataset by id. Rows whose sum deviates from 1 by
/// at most 1e-6 are renormalized; larger deviations are rejected.
pub fn ingest_probs(path: &Path, ds: &SurveyDataset) -> Result<ProbabilityMatrix> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let k = ds.n_classes();
    let expected: Vec<String> = std::iter::once("id".to_string())
        .chain((1..=k).map(|c| format!("p{c}")))
        .collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(AuditError::Schema(format!(
            "probability CSV header {:?} does not match expected {:?}",
            got, expected
        )));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record
            .get(0)
            .ok_or_else(|| AuditError::Schema("probability CSV: short record".into()))?
            .to_string();
        if !ds.contains_id(&id) {
            return Err(AuditError::Validation(format!(
                "probability row for unknown id '{id}'"
            )));
        }
        let mut row = Vec::with_capacity(k);
        for c in 1..=k {
            let v: f64 = record
                .get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    AuditError::Schema(format!("id '{id}': probability p{c} is not a number"))
                })?;
            row.push(v);
        }
        ids.push(id);
        rows.push(row);
    }
    let tag = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("external")
        .to_string();
    ProbabilityMatrix::new(tag, ids, rows, ProbabilityMatrix::INGEST_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RespondentRecord;

    fn dataset(outcomes: &[usize], k: usize) -> SurveyDataset {
        let respondents = outcomes
            .iter()
            .enumerate()
            .map(|(i, &outcome)| RespondentRecord {
                id: format!("r{i}"),
                outcome,
                group: 1,
                weight: 1.0,
                covariates: None,
            })
            .collect();
        SurveyDataset::new(respondents, k, vec!["G1".into()]).unwrap()
    }

    fn all_ids(ds: &SurveyDataset) -> Vec<String> {
        ds.ids().map(str::to_string).collect()
    }

    #[test]
    fn prior_matches_train_proportions_up_to_smoothing() {
        let ds = dataset(&[1, 1, 2], 2);
        let prior = fit_prior(&ds, &all_ids(&ds)).unwrap();
        assert!((prior.class_frequencies[0] - 2.0 / 3.0).abs() < 1e-5);
        assert!((prior.class_frequencies[1] - 1.0 / 3.0).abs() < 1e-5);
        let sum: f64 = prior.class_frequencies.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_gives_absent_classes_epsilon_mass() {
        let ds = dataset(&[3, 3, 3, 3], 5);
        let prior = fit_prior(&ds, &all_ids(&ds)).unwrap();
        assert!(prior.class_frequencies[2] > 0.999);
        for c in [0, 1, 3, 4] {
            assert!(prior.class_frequencies[c] > 0.0);
            assert!(prior.class_frequencies[c] < 2e-6);
        }
    }

    #[test]
    fn prior_frequencies_track_truth_within_three_se() {
        // Large sample from a known class law; 3-SE binomial bound.
        let truth = [0.1, 0.2, 0.4, 0.2, 0.1];
        let n = 20_000usize;
        let mut outcomes = Vec::with_capacity(n);
        for i in 0..n {
            let u = crate::rng::u64_to_unit(crate::rng::counter_seed(31, i as u64));
            let mut cum = 0.0;
            let mut y = truth.len();
            for (c, p) in truth.iter().enumerate() {
                cum += p;
                if u < cum {
                    y = c + 1;
                    break;
                }
            }
            outcomes.push(y);
        }
        let ds = dataset(&outcomes, 5);
        let prior = fit_prior(&ds, &all_ids(&ds)).unwrap();
        for (c, &p) in truth.iter().enumerate() {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (prior.class_frequencies[c] - p).abs() < 3.0 * se + 1e-5,
                "class {c}: {} vs {p}",
                prior.class_frequencies[c]
            );
        }
    }

    #[test]
    fn prior_prediction_rows_are_identical() {
        let ds = dataset(&[1, 2, 2, 1], 2);
        let prior = fit_prior(&ds, &all_ids(&ds)).unwrap();
        let m = prior.predict_probs(&ds, &all_ids(&ds)).unwrap();
        for (_, row) in m.iter() {
            assert_eq!(row, prior.class_frequencies.as_slice());
        }
    }

    #[test]
    fn ingest_accepts_near_one_sums_and_rejects_bad_rows() {
        let ds = dataset(&[1, 2, 3], 3);
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        std::fs::write(&good, "id,p1,p2,p3\nr0,0.2,0.3,0.5000004\nr1,0.1,0.1,0.8\n").unwrap();
        let m = ingest_probs(&good, &ds).unwrap();
        let sum: f64 = m.row("r0").unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let bad_sum = dir.path().join("bad_sum.csv");
        std::fs::write(&bad_sum, "id,p1,p2,p3\nr0,0.2,0.3,0.3\n").unwrap();
        let err = ingest_probs(&bad_sum, &ds).unwrap_err();
        assert!(err.to_string().contains("r0"));

        let unknown = dir.path().join("unknown.csv");
        std::fs::write(&unknown, "id,p1,p2,p3\nghost,0.2,0.3,0.5\n").unwrap();
        assert!(ingest_probs(&unknown, &ds)
            .unwrap_err()
            .to_string()
            .contains("ghost"));
    }
}
