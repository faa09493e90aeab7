//! Randomized ordinal nonconformity scores, threshold calibration under
//! four methods, and prediction-set construction.
//!
//! The score for a labeled pair is s(x, y; U) = 1 − F̂(y|x) + U·p̂_y(x)
//! with U uniform on [0, 1); it is computed here as the upper-tail sum
//! Σ_{c>y} p̂_c + U·p̂_y, which is algebraically identical but exactly
//! zero at the top class when U = 0 and never goes negative. Thresholds
//! extend the real line with +∞, standing in for the (n+1)-th "infinite"
//! calibration score; serialized JSON writes it as the string "+inf".

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ProbabilityMatrix, SurveyDataset};
use crate::error::{AuditError, Result};
use crate::numeric::compensated_sum;
use crate::rng::{unit_uniform_for_id, unit_uniform_for_id_label};

/// Default shrinkage strength for the regularized per-group method.
pub const DEFAULT_LAMBDA: f64 = 50.0;

/// Calibration method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Standard,
    Mondrian,
    RegMondrian,
    WeightedMondrian,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Standard,
        Method::Mondrian,
        Method::RegMondrian,
        Method::WeightedMondrian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "STANDARD",
            Method::Mondrian => "MONDRIAN",
            Method::RegMondrian => "REG_MONDRIAN",
            Method::WeightedMondrian => "WEIGHTED_MONDRIAN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "STANDARD" => Ok(Method::Standard),
            "MONDRIAN" => Ok(Method::Mondrian),
            "REG_MONDRIAN" => Ok(Method::RegMondrian),
            "WEIGHTED_MONDRIAN" => Ok(Method::WeightedMondrian),
            other => Err(AuditError::Config(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One calibration respondent's nonconformity score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    pub u_draw: f64,
    pub group: usize,
}

/// The randomized ordinal score for class `y` (1-based) given a
/// probability row and a uniform draw.
#[inline]
pub fn ordinal_score(row: &[f64], y: usize, u: f64) -> f64 {
    let tail: f64 = row[y..].iter().sum();
    tail + u * row[y - 1]
}

/// Score every calibration respondent at its true label. U draws are
/// keyed by (seed, id), so scores do not depend on iteration order.
pub fn score_calibration(
    probs: &ProbabilityMatrix,
    ds: &SurveyDataset,
    cal_ids: &[String],
    seed: u64,
) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::with_capacity(cal_ids.len());
    for id in cal_ids {
        let r = ds
            .respondent(id)
            .ok_or_else(|| AuditError::Validation(format!("unknown id '{id}'")))?;
        let row = probs.row(id).ok_or_else(|| {
            AuditError::Validation(format!("missing probability row for id '{id}'"))
        })?;
        let u = unit_uniform_for_id(seed, id);
        out.push(ScoreRecord {
            id: id.clone(),
            score: ordinal_score(row, r.outcome, u),
            u_draw: u,
            group: r.group,
        });
    }
    Ok(out)
}

/// The ⌈(1−α)(n+1)⌉-th smallest element of `scores` ∪ {+∞}; +∞ when the
/// rank exceeds n (including the empty-calibration fallback).
///
/// Requires 0 < alpha < 1. The small epsilon inside the ceiling guards
/// against products like 0.9·10 evaluating to 9.000000000000002.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let n = scores.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let rank = (((1.0 - alpha) * (n + 1) as f64 - 1e-9).ceil()).max(1.0) as usize;
    if rank > n {
        return f64::INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    sorted[rank - 1]
}

/// Shrinkage weight w_g = n_g / (n_g + λ).
#[inline]
pub fn shrinkage_weight(n_g: usize, lambda: f64) -> f64 {
    n_g as f64 / (n_g as f64 + lambda)
}

/// Weighted analog of [`conformal_quantile`]: sort the group's scores
/// ascending, place one pseudo-observation of the group's mean weight
/// at +∞, and return the smallest score whose cumulative normalized
/// weight reaches 1−α. With equal weights this reduces exactly to the
/// unweighted rule.
fn weighted_conformal_quantile(pairs: &[(f64, f64)], alpha: f64) -> f64 {
    if pairs.is_empty() {
        return f64::INFINITY;
    }
    let weight_sum = compensated_sum(pairs.iter().map(|&(_, w)| w));
    let mean_w = weight_sum / pairs.len() as f64;
    let total = weight_sum + mean_w;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));
    let target = 1.0 - alpha;
    let mut cum = crate::numeric::CompensatedSum::new();
    for (score, w) in sorted {
        cum.add(w);
        if cum.value() / total >= target - 1e-9 {
            return score;
        }
    }
    f64::INFINITY
}

/// Calibration output: global and per-group thresholds plus metadata.
///
/// Serializes to JSON with infinite thresholds written as "+inf".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ThresholdSetJson", try_from = "ThresholdSetJson")]
pub struct ThresholdSet {
    pub method: Method,
    pub alpha: f64,
    pub lambda: Option<f64>,
    pub group_labels: Vec<String>,
    pub global_q: f64,
    /// Per-group thresholds aligned with `group_labels`; empty for the
    /// global method.
    pub per_group_q: Vec<f64>,
    /// Calibration-cell size per group.
    pub cell_sizes: Vec<usize>,
    /// Shrinkage weights per group (regularized method only).
    pub shrink_weights: Option<Vec<f64>>,
    /// Groups whose own threshold was unavailable (empty cell or
    /// infinite group quantile) and fell back as documented.
    pub fallback_groups: Vec<String>,
    pub warnings: Vec<String>,
}

impl ThresholdSet {
    /// The threshold applying to a respondent of the given 1-based
    /// group index.
    pub fn threshold_for(&self, group: usize) -> Result<f64> {
        match self.method {
            Method::Standard => Ok(self.global_q),
            _ => self.per_group_q.get(group - 1).copied().ok_or_else(|| {
                AuditError::Validation(format!(
                    "no threshold for group index {group} ({} groups calibrated)",
                    self.per_group_q.len()
                ))
            }),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn ext_to_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!("+inf")
    }
}

fn ext_from_json(v: &serde_json::Value) -> std::result::Result<f64, String> {
    match v {
        serde_json::Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| format!("threshold {n} is not representable")),
        serde_json::Value::String(s) if s == "+inf" => Ok(f64::INFINITY),
        other => Err(format!("expected number or \"+inf\", got {other}")),
    }
}

/// JSON wire format: per-group values keyed by group label, with the
/// "+inf" sentinel for infinite thresholds.
#[derive(Serialize, Deserialize)]
struct ThresholdSetJson {
    method: Method,
    alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    group_labels: Vec<String>,
    global_q: serde_json::Value,
    per_group_q: serde_json::Map<String, serde_json::Value>,
    cell_sizes: serde_json::Map<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shrink_weights: Option<serde_json::Map<String, serde_json::Value>>,
    fallback_groups: Vec<String>,
    warnings: Vec<String>,
}

impl From<ThresholdSet> for ThresholdSetJson {
    fn from(t: ThresholdSet) -> Self {
        let by_group = |vals: &[serde_json::Value]| {
            t.group_labels
                .iter()
                .cloned()
                .zip(vals.iter().cloned())
                .collect::<serde_json::Map<_, _>>()
        };
        let per_group: Vec<serde_json::Value> =
            t.per_group_q.iter().map(|&q| ext_to_json(q)).collect();
        let cells: Vec<serde_json::Value> =
            t.cell_sizes.iter().map(|&n| serde_json::json!(n)).collect();
        let shrink = t.shrink_weights.as_ref().map(|ws| {
            by_group(&ws.iter().map(|&w| serde_json::json!(w)).collect::<Vec<_>>())
        });
        ThresholdSetJson {
            method: t.method,
            alpha: t.alpha,
            lambda: t.lambda,
            global_q: ext_to_json(t.global_q),
            per_group_q: by_group(&per_group),
            cell_sizes: by_group(&cells),
            shrink_weights: shrink,
            fallback_groups: t.fallback_groups,
            warnings: t.warnings,
            group_labels: t.group_labels,
        }
    }
}

impl TryFrom<ThresholdSetJson> for ThresholdSet {
    type Error = String;

    fn try_from(j: ThresholdSetJson) -> std::result::Result<Self, String> {
        let pick = |map: &serde_json::Map<String, serde_json::Value>,
                    label: &String|
         -> std::result::Result<serde_json::Value, String> {
            map.get(label)
                .cloned()
                .ok_or_else(|| format!("missing group '{label}'"))
        };
        let mut per_group_q = Vec::new();
        let mut cell_sizes = Vec::new();
        let mut shrink_weights = j.shrink_weights.as_ref().map(|_| Vec::new());
        for label in &j.group_labels {
            if !j.per_group_q.is_empty() {
                per_group_q.push(ext_from_json(&pick(&j.per_group_q, label)?)?);
            }
            cell_sizes.push(
                pick(&j.cell_sizes, label)?
                    .as_u64()
                    .ok_or_else(|| format!("cell size for '{label}' is not an integer"))?
                    as usize,
            );
            if let (Some(ws), Some(out)) = (&j.shrink_weights, shrink_weights.as_mut()) {
                out.push(
                    pick(ws, label)?
                        .as_f64()
                        .ok_or_else(|| format!("shrink weight for '{label}' is not a number"))?,
                );
            }
        }
        Ok(ThresholdSet {
            method: j.method,
            alpha: j.alpha,
            lambda: j.lambda,
            group_labels: j.group_labels,
            global_q: ext_from_json(&j.global_q)?,
            per_group_q,
            cell_sizes,
            shrink_weights,
            fallback_groups: j.fallback_groups,
            warnings: j.warnings,
        })
    }
}

/// Calibrate thresholds from scored calibration data.
///
/// Fallback rules: an empty calibration group gets +∞ under the
/// per-group method (maximally conservative); under the regularized
/// method, a group whose own quantile is +∞ falls back to the global
/// threshold, and when the global threshold is itself +∞ the result is
/// +∞. All fallbacks are recorded in the returned metadata.
pub fn calibrate(
    scores: &[ScoreRecord],
    method: Method,
    alpha: f64,
    lambda: Option<f64>,
    weights: Option<&HashMap<String, f64>>,
    group_labels: &[String],
) -> Result<ThresholdSet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AuditError::Config(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let g = group_labels.len();
    for s in scores {
        if s.group < 1 || s.group > g {
            return Err(AuditError::Validation(format!(
                "score for id '{}' has group index {} outside 1..={g}",
                s.id, s.group
            )));
        }
    }
    let mut warnings = Vec::new();
    let mut fallback_groups = Vec::new();
    let all: Vec<f64> = scores.iter().map(|s| s.score).collect();
    if all.is_empty() {
        warnings.push("empty calibration set; global threshold is +inf".to_string());
    }
    let global_q = conformal_quantile(&all, alpha);
    let mut cell_sizes = vec![0usize; g];
    let mut by_group: Vec<Vec<&ScoreRecord>> = vec![Vec::new(); g];
    for s in scores {
        cell_sizes[s.group - 1] += 1;
        by_group[s.group - 1].push(s);
    }

    let mut per_group_q = Vec::new();
    let mut shrink_weights = None;
    let mut used_lambda = None;
    match method {
        Method::Standard => {}
        Method::Mondrian => {
            for (gi, members) in by_group.iter().enumerate() {
                let vals: Vec<f64> = members.iter().map(|s| s.score).collect();
                if vals.is_empty() {
                    warnings.push(format!(
                        "group '{}' has no calibration scores; threshold is +inf",
                        group_labels[gi]
                    ));
                    fallback_groups.push(group_labels[gi].clone());
                }
                per_group_q.push(conformal_quantile(&vals, alpha));
            }
        }
        Method::RegMondrian => {
            let lam = lambda.unwrap_or(DEFAULT_LAMBDA);
            if lam.is_nan() || lam <= 0.0 {
                return Err(AuditError::Config(format!(
                    "lambda must be positive for the regularized method, got {lam}"
                )));
            }
            used_lambda = Some(lam);
            let mut ws = Vec::with_capacity(g);
            for (gi, members) in by_group.iter().enumerate() {
                let vals: Vec<f64> = members.iter().map(|s| s.score).collect();
                let q_g = conformal_quantile(&vals, alpha);
                let w = shrinkage_weight(vals.len(), lam);
                ws.push(w);
                let q = if !q_g.is_finite() {
                    fallback_groups.push(group_labels[gi].clone());
                    global_q
                } else if !global_q.is_finite() {
                    f64::INFINITY
                } else {
                    w * q_g + (1.0 - w) * global_q
                };
                per_group_q.push(q);
            }
            shrink_weights = Some(ws);
        }
        Method::WeightedMondrian => {
            let weights = weights.ok_or_else(|| {
                AuditError::Config(
                    "respondent weights are required for the weighted-threshold method".into(),
                )
            })?;
            for (gi, members) in by_group.iter().enumerate() {
                let mut pairs = Vec::with_capacity(members.len());
                for s in members.iter() {
                    let w = *weights.get(&s.id).ok_or_else(|| {
                        AuditError::Validation(format!("no weight for id '{}'", s.id))
                    })?;
                    if w <= 0.0 || !w.is_finite() {
                        return Err(AuditError::Validation(format!(
                            "weight for id '{}' must be positive and finite, got {w}",
                            s.id
                        )));
                    }
                    pairs.push((s.score, w));
                }
                if pairs.is_empty() {
                    warnings.push(format!(
                        "group '{}' has no calibration scores; threshold is +inf",
                        group_labels[gi]
                    ));
                    fallback_groups.push(group_labels[gi].clone());
                }
                per_group_q.push(weighted_conformal_quantile(&pairs, alpha));
            }
        }
    }

    Ok(ThresholdSet {
        method,
        alpha,
        lambda: used_lambda,
        group_labels: group_labels.to_vec(),
        global_q,
        per_group_q,
        cell_sizes,
        shrink_weights,
        fallback_groups,
        warnings,
    })
}

/// Options for prediction-set construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct PredictOptions {
    /// Add the argmax label (ties toward the lower class) when a set
    /// would otherwise be empty.
    pub force_nonempty: bool,
    /// Draw a separate U per candidate label instead of one shared U
    /// per respondent.
    pub independent_u_per_label: bool,
}

/// One respondent's prediction set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub id: String,
    /// Included labels, ascending. Not necessarily contiguous.
    pub labels: Vec<usize>,
    pub set_size: usize,
    pub covered: bool,
}

impl PredictionSet {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Index of the largest entry, ties toward the lower class.
fn argmax_label(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, p) in row.iter().enumerate().skip(1) {
        if *p > row[best] {
            best = c;
        }
    }
    best + 1
}

/// Build prediction sets for the test respondents: include every label
/// whose score falls at or below the applicable threshold. One U per
/// respondent is shared across candidate labels unless configured
/// otherwise.
pub fn predict_sets(
    probs: &ProbabilityMatrix,
    thresholds: &ThresholdSet,
    ds: &SurveyDataset,
    test_ids: &[String],
    seed: u64,
    options: PredictOptions,
) -> Result<Vec<PredictionSet>> {
    let mut out = Vec::with_capacity(test_ids.len());
    for id in test_ids {
        let r = ds
            .respondent(id)
            .ok_or_else(|| AuditError::Validation(format!("unknown id '{id}'")))?;
        let row = probs.row(id).ok_or_else(|| {
            AuditError::Validation(format!("missing probability row for id '{id}'"))
        })?;
        let q = thresholds.threshold_for(r.group)?;
        let shared_u = unit_uniform_for_id(seed, id);
        let k = row.len();
        // Suffix sums: tail[y-1] = Σ_{c>y} p_c.
        let mut tail = vec![0.0; k];
        for y in (0..k - 1).rev() {
            tail[y] = tail[y + 1] + row[y + 1];
        }
        let mut labels = Vec::new();
        for y in 1..=k {
            let u = if options.independent_u_per_label {
                unit_uniform_for_id_label(seed, id, y)
            } else {
                shared_u
            };
            if tail[y - 1] + u * row[y - 1] <= q {
                labels.push(y);
            }
        }
        if labels.is_empty() && options.force_nonempty {
            labels.push(argmax_label(row));
        }
        out.push(PredictionSet {
            id: id.clone(),
            set_size: labels.len(),
            covered: labels.contains(&r.outcome),
            labels,
        });
    }
    Ok(out)
}

/// Finite-sample group coverage floor min(1, 1 − α + 1/(n_g + 1)).
pub fn coverage_floor(n_g: usize, alpha: f64) -> f64 {
    (1.0 - alpha + 1.0 / (n_g as f64 + 1.0)).min(1.0)
}

/// Closed-form MSE-optimal shrinkage weight
/// w* = (σ²/n_cal + b²) / (σ²/n_g + σ²/n_cal + b²).
pub fn mse_optimal_weight(sigma2: f64, n_g: usize, n_cal: usize, bias: f64) -> f64 {
    let b2 = bias * bias;
    (sigma2 / n_cal as f64 + b2) / (sigma2 / n_g as f64 + sigma2 / n_cal as f64 + b2)
}

/// Write prediction sets as CSV `id,labels,set_size,covered`, labels
/// dash-joined (empty string for an empty set).
pub fn save_prediction_sets(sets: &[PredictionSet], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "labels", "set_size", "covered"])?;
    for s in sets {
        let labels = s
            .labels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-");
        w.write_record([
            s.id.as_str(),
            &labels,
            &s.set_size.to_string(),
            &s.covered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read prediction sets written by [`save_prediction_sets`].
pub fn load_prediction_sets(path: &Path) -> Result<Vec<PredictionSet>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record
            .get(0)
            .ok_or_else(|| AuditError::Schema("prediction CSV: short record".into()))?
            .to_string();
        let labels: Vec<usize> = match record.get(1) {
            Some("") | None => Vec::new(),
            Some(s) => s
                .split('-')
                .map(|t| {
                    t.parse().map_err(|_| {
                        AuditError::Schema(format!("prediction CSV: bad label '{t}'"))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let set_size: usize = record.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| {
            AuditError::Schema("prediction CSV: bad set_size".into())
        })?;
        let covered: bool = record.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| {
            AuditError::Schema("prediction CSV: bad covered flag".into())
        })?;
        if set_size != labels.len() {
            return Err(AuditError::Validation(format!(
                "id '{id}': set_size {set_size} disagrees with {} labels",
                labels.len()
            )));
        }
        out.push(PredictionSet {
            id,
            labels,
            set_size,
            covered,
        });
    }
    Ok(out)
}
