//! Survey-weighted and unweighted metrics, paired cross-method
//! statistics, and failure-analysis diagnostics.
//!
//! Weighted metrics follow the design-based form Σ W_i·v_i / Σ W_i with
//! compensated summation so results match extended-precision references
//! to 1e-12. The unweighted variants run through the same accumulator
//! with weight 1, which also makes the equal-weight reduction exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conformal::{Method, PredictionSet, ThresholdSet};
use crate::data::{ProbabilityMatrix, SurveyDataset};
use crate::error::{AuditError, Result};
use crate::numeric::{pearson, spearman, CompensatedSum};

/// Per-group slice of one split's evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub weighted_coverage: f64,
    pub weighted_size: f64,
    /// Threshold the group's test respondents were judged against
    /// (+∞ possible, serialized by the harness with its sentinel).
    pub threshold: f64,
    pub n_test: usize,
    pub n_cal: usize,
}

/// One split × method × model evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_index: usize,
    pub method: Method,
    pub model_tag: String,
    pub weighted_coverage: f64,
    pub unweighted_coverage: f64,
    pub weighted_gap: f64,
    pub unweighted_gap: f64,
    pub weighted_size: f64,
    pub unweighted_size: f64,
    /// Empty prediction sets emitted in this split (diagnostic flag).
    pub n_empty_sets: usize,
    pub per_group: BTreeMap<String, GroupMetrics>,
}

/// Weighted mean of `value` over the sets, weighting each respondent by
/// `weight_of`. Errors when total weight is zero (no test respondents).
fn weighted_mean<V, W>(
    sets: &[PredictionSet],
    ds: &SurveyDataset,
    value: V,
    weight_of: W,
) -> Result<f64>
where
    V: Fn(&PredictionSet) -> f64,
    W: Fn(f64) -> f64,
{
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for s in sets {
        let r = ds
            .respondent(&s.id)
            .ok_or_else(|| AuditError::Validation(format!("unknown id '{}'", s.id)))?;
        let w = weight_of(r.weight);
        num.add(w * value(s));
        den.add(w);
    }
    if den.value() <= 0.0 {
        return Err(AuditError::Validation(
            "total weight is zero; no respondents to evaluate".into(),
        ));
    }
    Ok(num.value() / den.value())
}

/// Design-weighted marginal coverage Σ W·1{covered} / Σ W.
pub fn weighted_coverage(sets: &[PredictionSet], ds: &SurveyDataset) -> Result<f64> {
    weighted_mean(sets, ds, |s| s.covered as u8 as f64, |w| w)
}

/// Unweighted marginal coverage (same accumulator, weight 1).
pub fn unweighted_coverage(sets: &[PredictionSet], ds: &SurveyDataset) -> Result<f64> {
    weighted_mean(sets, ds, |s| s.covered as u8 as f64, |_| 1.0)
}

/// Design-weighted mean set size Σ W·|C| / Σ W.
pub fn weighted_size(sets: &[PredictionSet], ds: &SurveyDataset) -> Result<f64> {
    weighted_mean(sets, ds, |s| s.set_size as f64, |w| w)
}

/// Unweighted mean set size.
pub fn unweighted_size(sets: &[PredictionSet], ds: &SurveyDataset) -> Result<f64> {
    weighted_mean(sets, ds, |s| s.set_size as f64, |_| 1.0)
}

fn group_means<V, W>(
    sets: &[PredictionSet],
    ds: &SurveyDataset,
    value: V,
    weight_of: W,
) -> Result<BTreeMap<String, f64>>
where
    V: Fn(&PredictionSet) -> f64,
    W: Fn(f64) -> f64,
{
    let g = ds.n_groups();
    let mut num = vec![CompensatedSum::new(); g];
    let mut den = vec![CompensatedSum::new(); g];
    for s in sets {
        let r = ds
            .respondent(&s.id)
            .ok_or_else(|| AuditError::Validation(format!("unknown id '{}'", s.id)))?;
        let w = weight_of(r.weight);
        num[r.group - 1].add(w * value(s));
        den[r.group - 1].add(w);
    }
    // Groups with zero test weight are absent, not zero: a phantom
    // coverage of 0 would corrupt the gap.
    let mut out = BTreeMap::new();
    for gi in 0..g {
        if den[gi].value() > 0.0 {
            out.insert(
                ds.group_labels()[gi].clone(),
                num[gi].value() / den[gi].value(),
            );
        }
    }
    Ok(out)
}

/// Per-group design-weighted coverage; groups without test presence
/// are absent from the map.
pub fn weighted_group_coverage(
    sets: &[PredictionSet],
    ds: &SurveyDataset,
) -> Result<BTreeMap<String, f64>> {
    group_means(sets, ds, |s| s.covered as u8 as f64, |w| w)
}

/// Per-group unweighted coverage.
pub fn unweighted_group_coverage(
    sets: &[PredictionSet],
    ds: &SurveyDataset,
) -> Result<BTreeMap<String, f64>> {
    group_means(sets, ds, |s| s.covered as u8 as f64, |_| 1.0)
}

/// Per-group design-weighted mean set size.
pub fn weighted_group_size(
    sets: &[PredictionSet],
    ds: &SurveyDataset,
) -> Result<BTreeMap<String, f64>> {
    group_means(sets, ds, |s| s.set_size as f64, |w| w)
}

/// Subgroup coverage gap: max − min over present groups (0 for a
/// single group). Errors on an empty map.
pub fn weighted_gap(group_cov: &BTreeMap<String, f64>) -> Result<f64> {
    if group_cov.is_empty() {
        return Err(AuditError::Validation(
            "gap undefined: no groups present".into(),
        ));
    }
    let max = group_cov.values().cloned().fold(f64::MIN, f64::max);
    let min = group_cov.values().cloned().fold(f64::MAX, f64::min);
    Ok(max - min)
}

/// Evaluate one split × method × model into a [`SplitResult`].
pub fn evaluate_split(
    sets: &[PredictionSet],
    ds: &SurveyDataset,
    thresholds: &ThresholdSet,
    split_index: usize,
    model_tag: &str,
    cal_cell_sizes: &[usize],
) -> Result<SplitResult> {
    let w_group_cov = weighted_group_coverage(sets, ds)?;
    let u_group_cov = unweighted_group_coverage(sets, ds)?;
    let w_group_size = weighted_group_size(sets, ds)?;
    let mut n_test_counts = BTreeMap::new();
    for s in sets {
        let r = ds.respondent(&s.id).expect("validated above");
        *n_test_counts
            .entry(ds.group_label(r.group).to_string())
            .or_insert(0usize) += 1;
    }
    let mut per_group = BTreeMap::new();
    for (label, cov) in &w_group_cov {
        let gi = ds
            .group_labels()
            .iter()
            .position(|l| l == label)
            .expect("label from dataset");
        per_group.insert(
            label.clone(),
            GroupMetrics {
                weighted_coverage: *cov,
                weighted_size: w_group_size[label],
                threshold: thresholds.threshold_for(gi + 1)?,
                n_test: n_test_counts[label],
                n_cal: cal_cell_sizes.get(gi).copied().unwrap_or(0),
            },
        );
    }
    Ok(SplitResult {
        split_index,
        method: thresholds.method,
        model_tag: model_tag.to_string(),
        weighted_coverage: weighted_coverage(sets, ds)?,
        unweighted_coverage: unweighted_coverage(sets, ds)?,
        weighted_gap: weighted_gap(&w_group_cov)?,
        unweighted_gap: weighted_gap(&u_group_cov)?,
        weighted_size: weighted_size(sets, ds)?,
        unweighted_size: unweighted_size(sets, ds)?,
        n_empty_sets: sets.iter().filter(|s| s.is_empty()).count(),
        per_group,
    })
}

/// Paired per-split differences between two methods on one metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedDelta {
    pub metric: String,
    pub deltas: Vec<f64>,
    pub mean: f64,
    /// Standard deviation with the (R−1) denominator.
    pub sd: f64,
    /// SD / √R.
    pub se: f64,
    pub ci95: (f64, f64),
    /// mean / SD; None when SD is zero (flagged undefined).
    pub cohens_dz: Option<f64>,
}

/// Paired statistics for deltas b − a, aligned by position (split
/// index). Requires at least two splits.
pub fn paired_stats(metric: &str, a: &[f64], b: &[f64]) -> Result<PairedDelta> {
    if a.len() != b.len() {
        return Err(AuditError::Validation(format!(
            "paired series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(AuditError::Validation(
            "paired statistics need at least 2 splits".into(),
        ));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let r = deltas.len() as f64;
    let mean = crate::numeric::mean(&deltas);
    let sd = crate::numeric::sample_std(&deltas);
    let se = sd / r.sqrt();
    let ci95 = (mean - 1.96 * se, mean + 1.96 * se);
    let cohens_dz = if sd > 0.0 { Some(mean / sd) } else { None };
    Ok(PairedDelta {
        metric: metric.to_string(),
        deltas,
        mean,
        sd,
        se,
        ci95,
        cohens_dz,
    })
}

/// Per-group confidence/accuracy comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Overconfidence {
    pub weighted_accuracy: f64,
    pub weighted_confidence: f64,
    /// confidence − accuracy: positive means the model is more
    /// confident than accurate.
    pub overconfidence: f64,
}

/// Index (1-based) of the largest probability, ties toward the lower
/// class.
pub fn argmax_label(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, p) in row.iter().enumerate().skip(1) {
        if *p > row[best] {
            best = c;
        }
    }
    best + 1
}

/// Weighted argmax accuracy, weighted mean max-probability, and their
/// difference, per group. Groups without test presence are absent.
pub fn overconfidence_by_group(
    probs: &ProbabilityMatrix,
    ds: &SurveyDataset,
    test_ids: &[String],
) -> Result<BTreeMap<String, Overconfidence>> {
    let g = ds.n_groups();
    let mut acc = vec![CompensatedSum::new(); g];
    let mut conf = vec![CompensatedSum::new(); g];
    let mut den = vec![CompensatedSum::new(); g];
    for id in test_ids {
        let r = ds
            .respondent(id)
            .ok_or_else(|| AuditError::Validation(format!("unknown id '{id}'")))?;
        let row = probs.row(id).ok_or_else(|| {
            AuditError::Validation(format!("missing probability row for id '{id}'"))
        })?;
        let yhat = argmax_label(row);
        let pmax = row[yhat - 1];
        acc[r.group - 1].add(r.weight * ((yhat == r.outcome) as u8 as f64));
        conf[r.group - 1].add(r.weight * pmax);
        den[r.group - 1].add(r.weight);
    }
    let mut out = BTreeMap::new();
    for gi in 0..g {
        let d = den[gi].value();
        if d > 0.0 {
            let weighted_accuracy = acc[gi].value() / d;
            let weighted_confidence = conf[gi].value() / d;
            out.insert(
                ds.group_labels()[gi].clone(),
                Overconfidence {
                    weighted_accuracy,
                    weighted_confidence,
                    overconfidence: weighted_confidence - weighted_accuracy,
                },
            );
        }
    }
    Ok(out)
}

/// One group's per-split deltas between two methods, with its
/// calibration-cell size for tie-breaking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupDelta {
    pub size_delta: f64,
    /// Change in |coverage − (1−α)|: positive = worse calibration.
    pub coverage_error_delta: f64,
    pub n_cal: usize,
}

/// Per-split per-group deltas feeding extrema concentration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitGroupDeltas {
    pub split_index: usize,
    pub groups: BTreeMap<String, GroupDelta>,
}

/// How often each group is the single worst-affected cell.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtremaCounts {
    pub size_inflation: usize,
    pub coverage_worsening: usize,
}

/// For each split, find the group with the largest set-size inflation
/// and the group with the largest coverage-error worsening; ties break
/// toward the smaller calibration cell. Returns per-group frequencies;
/// each failure mode's counts sum to the number of splits.
pub fn extrema_concentration(
    splits: &[SplitGroupDeltas],
) -> BTreeMap<String, ExtremaCounts> {
    let mut counts: BTreeMap<String, ExtremaCounts> = BTreeMap::new();
    for split in splits {
        for label in split.groups.keys() {
            counts.entry(label.clone()).or_default();
        }
    }
    for split in splits {
        let winner = |pick: &dyn Fn(&GroupDelta) -> f64| -> Option<String> {
            let mut best: Option<(&String, f64, usize)> = None;
            for (label, d) in &split.groups {
                let v = pick(d);
                let better = match best {
                    None => true,
                    Some((_, bv, bn)) => v > bv || (v == bv && d.n_cal < bn),
                };
                if better {
                    best = Some((label, v, d.n_cal));
                }
            }
            best.map(|(l, _, _)| l.clone())
        };
        if let Some(l) = winner(&|d| d.size_delta) {
            counts.get_mut(&l).unwrap().size_inflation += 1;
        }
        if let Some(l) = winner(&|d| d.coverage_error_delta) {
            counts.get_mut(&l).unwrap().coverage_worsening += 1;
        }
    }
    counts
}

/// Pearson and Spearman correlations over (cell size, delta)
/// observations. Errors on fewer than 3 points or degenerate variance.
pub fn cell_size_correlations(obs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if obs.len() < 3 {
        return Err(AuditError::Validation(format!(
            "correlation needs at least 3 observations, got {}",
            obs.len()
        )));
    }
    let x: Vec<f64> = obs.iter().map(|o| o.0).collect();
    let y: Vec<f64> = obs.iter().map(|o| o.1).collect();
    match (pearson(&x, &y), spearman(&x, &y)) {
        (Some(r), Some(rho)) => Ok((r, rho)),
        _ => Err(AuditError::Validation(
            "correlation undefined: degenerate variance".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RespondentRecord;

    fn dataset(weights_groups: &[(f64, usize)], k: usize, g: usize) -> SurveyDataset {
        let labels = (1..=g).map(|i| format!("G{i}")).collect();
        let respondents = weights_groups
            .iter()
            .enumerate()
            .map(|(i, &(weight, group))| RespondentRecord {
                id: format!("r{i}"),
                outcome: 1,
                group,
                weight,
                covariates: None,
            })
            .collect();
        SurveyDataset::new(respondents, k, labels).unwrap()
    }

    fn set(id: &str, size: usize, covered: bool) -> PredictionSet {
        PredictionSet {
            id: id.into(),
            labels: (1..=size).collect(),
            set_size: size,
            covered,
        }
    }

    #[test]
    fn weighted_coverage_arithmetic() {
        // Weights (1, 3), covered (true, false) → 1/4.
        let ds = dataset(&[(1.0, 1), (3.0, 1)], 3, 1);
        let sets = vec![set("r0", 1, true), set("r1", 1, false)];
        assert_eq!(weighted_coverage(&sets, &ds).unwrap(), 0.25);
    }

    #[test]
    fn equal_weights_reduce_to_unweighted_exactly() {
        // Weight values whose sums and products are exactly
        // representable, so the reduction is bitwise.
        for w in [1.0, 2.0, 0.5, 2.5] {
            let rows: Vec<(f64, usize)> = (0..101).map(|i| (w, i % 3 + 1)).collect();
            let ds = dataset(&rows, 4, 3);
            let sets: Vec<PredictionSet> = (0..101)
                .map(|i| set(&format!("r{i}"), i % 4 + 1, i % 7 != 0))
                .collect();
            assert_eq!(
                weighted_coverage(&sets, &ds).unwrap(),
                unweighted_coverage(&sets, &ds).unwrap()
            );
            assert_eq!(
                weighted_size(&sets, &ds).unwrap(),
                unweighted_size(&sets, &ds).unwrap()
            );
        }
    }

    #[test]
    fn full_and_empty_sets_pin_coverage() {
        let ds = dataset(&[(1.7, 1), (0.3, 1), (2.9, 1)], 5, 1);
        let full: Vec<PredictionSet> =
            (0..3).map(|i| set(&format!("r{i}"), 5, true)).collect();
        assert_eq!(weighted_coverage(&full, &ds).unwrap(), 1.0);
        assert!((weighted_size(&full, &ds).unwrap() - 5.0).abs() < 1e-12);
        let empty: Vec<PredictionSet> =
            (0..3).map(|i| set(&format!("r{i}"), 0, false)).collect();
        assert_eq!(weighted_coverage(&empty, &ds).unwrap(), 0.0);
    }

    #[test]
    fn size_arithmetic() {
        let ds = dataset(&[(1.0, 1), (1.0, 1)], 5, 1);
        let sets = vec![set("r0", 1, true), set("r1", 5, true)];
        assert_eq!(weighted_size(&sets, &ds).unwrap(), 3.0);
    }

    #[test]
    fn group_coverage_and_absent_groups() {
        let ds = dataset(&[(2.0, 1), (2.0, 1), (5.0, 2)], 3, 3);
        let sets = vec![set("r0", 1, true), set("r1", 1, false), set("r2", 1, true)];
        let cov = weighted_group_coverage(&sets, &ds).unwrap();
        assert_eq!(cov["G1"], 0.5);
        assert_eq!(cov["G2"], 1.0);
        assert!(!cov.contains_key("G3"), "group without presence is absent");
        // Single group → map with one entry equal to the marginal.
        let solo = dataset(&[(1.0, 1), (2.0, 1)], 3, 1);
        let ssets = vec![set("r0", 1, true), set("r1", 1, false)];
        let scov = weighted_group_coverage(&ssets, &solo).unwrap();
        assert_eq!(scov.len(), 1);
        assert_eq!(scov["G1"], weighted_coverage(&ssets, &solo).unwrap());
    }

    #[test]
    fn gap_is_range_over_present_groups() {
        let mut one = BTreeMap::new();
        one.insert("A".to_string(), 0.90);
        assert_eq!(weighted_gap(&one).unwrap(), 0.0);
        let mut two = BTreeMap::new();
        two.insert("A".to_string(), 0.875);
        two.insert("B".to_string(), 0.925);
        assert!((weighted_gap(&two).unwrap() - 0.050).abs() < 1e-15);
        assert!(weighted_gap(&BTreeMap::new()).is_err());
    }

    #[test]
    fn mean_of_split_gaps_differs_from_range_of_group_means() {
        // Rotating extremal groups: both splits have gap 0.10, but the
        // per-group means span only 0.05. The two summaries answer
        // different questions and must not be conflated.
        let splits = [
            [("A", 0.95), ("B", 0.85), ("C", 0.90)],
            [("A", 0.90), ("B", 0.95), ("C", 0.85)],
        ];
        let mut gaps = Vec::new();
        let mut means: BTreeMap<&str, f64> = BTreeMap::new();
        for split in &splits {
            let map: BTreeMap<String, f64> =
                split.iter().map(|(g, c)| (g.to_string(), *c)).collect();
            gaps.push(weighted_gap(&map).unwrap());
            for (g, c) in split {
                *means.entry(g).or_insert(0.0) += c / splits.len() as f64;
            }
        }
        let mean_gap = crate::numeric::mean(&gaps);
        let mean_map: BTreeMap<String, f64> =
            means.iter().map(|(g, c)| (g.to_string(), *c)).collect();
        let range_of_means = weighted_gap(&mean_map).unwrap();
        assert!((mean_gap - 0.10).abs() < 1e-12);
        assert!((range_of_means - 0.05).abs() < 1e-12);
        assert!(range_of_means < mean_gap);
    }

    #[test]
    fn paired_stats_closed_form() {
        let a = [0.0, 0.0, 0.0];
        let b = [0.1, 0.2, 0.3];
        let p = paired_stats("coverage", &a, &b).unwrap();
        assert!((p.mean - 0.2).abs() < 1e-15);
        assert!((p.sd - 0.1).abs() < 1e-15);
        assert!((p.cohens_dz.unwrap() - 2.0).abs() < 1e-12);
        let half = 1.96 * 0.1 / 3.0f64.sqrt();
        assert!((p.ci95.0 - (0.2 - half)).abs() < 1e-12);
        assert!((p.ci95.1 - (0.2 + half)).abs() < 1e-12);
    }

    #[test]
    fn identical_series_flag_undefined_dz() {
        let a = [0.4, 0.5, 0.6];
        let p = paired_stats("coverage", &a, &a).unwrap();
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.cohens_dz, None);
        assert_eq!(p.ci95, (0.0, 0.0));
        assert!(paired_stats("x", &[1.0], &[1.0]).is_err());
        assert!(paired_stats("x", &[1.0, 2.0], &[1.0]).is_err());
    }

    fn one_hot_matrix(ds: &SurveyDataset, hot: &[usize]) -> ProbabilityMatrix {
        let ids: Vec<String> = ds.ids().map(str::to_string).collect();
        let rows: Vec<Vec<f64>> = hot
            .iter()
            .map(|&c| {
                let mut row = vec![0.0; ds.n_classes()];
                row[c - 1] = 1.0;
                row
            })
            .collect();
        ProbabilityMatrix::new("onehot", ids, rows, 1e-9).unwrap()
    }

    #[test]
    fn perfect_predictor_has_zero_overconfidence() {
        let ds = dataset(&[(1.0, 1), (2.0, 1), (3.0, 1)], 3, 1);
        // Truth is always outcome 1 in this fixture.
        let probs = one_hot_matrix(&ds, &[1, 1, 1]);
        let ids: Vec<String> = ds.ids().map(str::to_string).collect();
        let oc = overconfidence_by_group(&probs, &ds, &ids).unwrap();
        assert_eq!(oc["G1"].overconfidence, 0.0);
        assert_eq!(oc["G1"].weighted_accuracy, 1.0);
    }

    #[test]
    fn argmax_ties_break_toward_the_lower_class() {
        // Constant p = (0.5, 0.5), truth always class 1, equal weights:
        // accuracy 1 (tie → class 1), confidence 0.5, overconfidence −0.5.
        let ds = dataset(&[(1.0, 1), (1.0, 1)], 2, 1);
        let ids: Vec<String> = ds.ids().map(str::to_string).collect();
        let rows = vec![vec![0.5, 0.5]; 2];
        let probs = ProbabilityMatrix::new("flat", ids.clone(), rows, 1e-9).unwrap();
        let oc = overconfidence_by_group(&probs, &ds, &ids).unwrap();
        assert_eq!(oc["G1"].weighted_accuracy, 1.0);
        assert_eq!(oc["G1"].weighted_confidence, 0.5);
        assert_eq!(oc["G1"].overconfidence, -0.5);
    }

    fn delta_split(
        split_index: usize,
        entries: &[(&str, f64, f64, usize)],
    ) -> SplitGroupDeltas {
        SplitGroupDeltas {
            split_index,
            groups: entries
                .iter()
                .map(|&(l, size_delta, coverage_error_delta, n_cal)| {
                    (
                        l.to_string(),
                        GroupDelta {
                            size_delta,
                            coverage_error_delta,
                            n_cal,
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn extrema_single_group_wins_everything() {
        let splits: Vec<SplitGroupDeltas> = (0..5)
            .map(|i| delta_split(i, &[("A", 0.1 * i as f64, 0.0, 30)]))
            .collect();
        let counts = extrema_concentration(&splits);
        assert_eq!(counts["A"].size_inflation, 5);
        assert_eq!(counts["A"].coverage_worsening, 5);
    }

    #[test]
    fn extrema_ties_go_to_the_smaller_cell() {
        let splits = vec![delta_split(0, &[("BIG", 0.5, 0.2, 300), ("SMALL", 0.5, 0.2, 30)])];
        let counts = extrema_concentration(&splits);
        assert_eq!(counts["SMALL"].size_inflation, 1);
        assert_eq!(counts["BIG"].size_inflation, 0);
        assert_eq!(counts["SMALL"].coverage_worsening, 1);
    }

    #[test]
    fn extrema_frequencies_sum_to_n_splits() {
        let splits = vec![
            delta_split(0, &[("A", 0.9, 0.1, 10), ("B", 0.1, 0.9, 20)]),
            delta_split(1, &[("A", 0.1, 0.9, 10), ("B", 0.9, 0.1, 20)]),
            delta_split(2, &[("A", 0.5, 0.5, 10), ("B", 0.2, 0.2, 20)]),
        ];
        let counts = extrema_concentration(&splits);
        let size_total: usize = counts.values().map(|c| c.size_inflation).sum();
        let cov_total: usize = counts.values().map(|c| c.coverage_worsening).sum();
        assert_eq!(size_total, 3);
        assert_eq!(cov_total, 3);
    }

    #[test]
    fn correlations_on_monotone_pairs() {
        let inc: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let (r, rho) = cell_size_correlations(&inc).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!((rho - 1.0).abs() < 1e-12);
        let dec = [(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)];
        let (r, rho) = cell_size_correlations(&dec).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        assert!((rho + 1.0).abs() < 1e-12);
        assert!(cell_size_correlations(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(cell_size_correlations(&[(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)]).is_err());
    }
}
