//! Multi-split experiment orchestration: splits × models × methods,
//! with integrity verification, failure diagnostics, and content
//! hashing for byte-level reproducibility.
//!
//! Splits run as independent tasks with deterministic per-split seeds
//! and merge in split-index order, so the parallel and sequential
//! execution modes produce identical artifacts.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{
    calibrate, predict_sets, score_calibration, Method, PredictOptions, ThresholdSet,
    DEFAULT_LAMBDA,
};
use crate::data::{load_dataset, DatasetSchema, ProbabilityMatrix, SurveyDataset};
use crate::error::{AuditError, Result};
use crate::evaluation::{
    cell_size_correlations, evaluate_split, extrema_concentration, overconfidence_by_group,
    paired_stats, ExtremaCounts, GroupDelta, Overconfidence, SplitGroupDeltas, SplitResult,
};
use crate::exec::{try_map_collect, ExecMode};
use crate::predictors::{fit_ordered_logistic, fit_prior, ingest_probs, FitOptions};
use crate::splitter::{make_splits, save_splits, verify_split, IntegrityReport, Partition};
use crate::synthetic::{generate, GeneratorConfig};

/// Where the survey data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// CSV respondent file plus its JSON schema.
    Csv { path: PathBuf, schema_path: PathBuf },
    /// Planted synthetic population.
    Synthetic { generator: GeneratorConfig },
}

/// A probabilistic predictor to audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// Training-set class frequencies, ignoring covariates.
    Prior,
    /// Proportional-odds model fit on each split's TRAIN partition.
    OrderedLogistic,
    /// The synthetic generator's reported probabilities (synthetic
    /// data sources only).
    Oracle,
    /// Externally supplied probability CSV covering every respondent.
    External { tag: String, path: PathBuf },
}

impl ModelSource {
    pub fn tag(&self) -> &str {
        match self {
            ModelSource::Prior => "prior",
            ModelSource::OrderedLogistic => "ordered-logistic",
            ModelSource::Oracle => "oracle",
            ModelSource::External { tag, .. } => tag,
        }
    }
}

/// Outcome recoding applied before anything else runs: a sensitivity
/// branch is a relabeling plus optional row filter, not a code path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub tag: String,
    /// `relabel[c-1]` is the new 1-based outcome for original class c,
    /// or 0 to drop respondents with that outcome. Probability columns
    /// merge by the same map and rows renormalize over kept classes.
    pub relabel: Vec<usize>,
    pub n_classes_after: usize,
}

fn default_n_splits() -> usize {
    100
}
fn default_fractions() -> [f64; 3] {
    [0.4, 0.3, 0.3]
}
fn default_alpha() -> f64 {
    0.10
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_models() -> Vec<ModelSource> {
    vec![ModelSource::Prior]
}
fn default_min_cell_warn() -> usize {
    20
}

/// Full experiment specification; one JSON document drives a run.
/// Unknown keys are rejected so config typos and bad CLI overrides
/// fail loudly instead of being ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default = "default_n_splits")]
    pub n_splits: usize,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSource>,
    #[serde(default)]
    pub branch: Option<BranchSpec>,
    pub master_seed: u64,
    #[serde(default = "default_min_cell_warn")]
    pub min_cell_warn: usize,
    #[serde(default)]
    pub force_nonempty: bool,
    #[serde(default)]
    pub independent_u_per_label: bool,
}

/// Per-(model, method) means over splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub method: Method,
    pub n_splits: usize,
    pub mean_weighted_coverage: f64,
    pub mean_unweighted_coverage: f64,
    pub mean_weighted_gap: f64,
    pub mean_unweighted_gap: f64,
    pub mean_weighted_size: f64,
    pub mean_unweighted_size: f64,
    pub mean_empty_sets: f64,
}

/// One paired-delta table row (method − baseline on one metric).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedRow {
    pub model: String,
    pub baseline: Method,
    pub method: Method,
    pub metric: String,
    pub n_splits: usize,
    pub mean_delta: f64,
    pub sd: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub cohens_dz: Option<f64>,
}

/// Correlation between calibration-cell size and a per-group delta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub n_obs: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// True when the correlation is undefined (too few points or zero
    /// variance); no significance testing is attached either way.
    pub degenerate: bool,
}

/// Split-mean per-group metrics for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean_weighted_coverage: f64,
    pub mean_weighted_size: f64,
    pub mean_n_cal: f64,
    pub mean_n_test: f64,
    pub splits_present: usize,
}

/// Failure-analysis diagnostics for one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    /// Split-mean per-group confidence/accuracy comparison.
    pub overconfidence: BTreeMap<String, Overconfidence>,
    /// How often each group is the worst-affected cell when comparing
    /// MONDRIAN against STANDARD; present only when both methods ran.
    pub extrema_counts: Option<BTreeMap<String, ExtremaCounts>>,
    /// Correlation of n_cal_g with |Δ set size_g| (MONDRIAN − STANDARD).
    pub size_delta_correlation: Option<CorrelationSummary>,
    /// Correlation of n_cal_g with the coverage-error change.
    pub coverage_error_delta_correlation: Option<CorrelationSummary>,
    /// method → group → split-mean metrics, for per-group reporting.
    pub per_group_summary: BTreeMap<String, BTreeMap<String, GroupSummary>>,
}

/// All failure-analysis output for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub alpha: f64,
    pub n_splits: usize,
    pub per_model: BTreeMap<String, ModelDiagnostics>,
}

/// Integrity artifacts: per-split verification plus non-fatal warnings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrityFile {
    pub reports: Vec<IntegrityReport>,
    pub warnings: Vec<String>,
}

/// Everything a run produced, in memory. The same content is on disk
/// in the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub n_respondents: usize,
    pub summary: Vec<SummaryRow>,
    pub paired: Vec<PairedRow>,
    pub diagnostics: DiagnosticsReport,
    pub integrity: Vec<IntegrityReport>,
    pub warnings: Vec<String>,
    /// Hex digest over all artifact bytes (the HASH file's TOTAL line).
    pub content_hash: String,
    pub results: Vec<SplitResult>,
}

/// Salt separating the score-randomization stream from the shuffle
/// stream that shares the per-split seed. Public so external drivers
/// can reproduce a split's exact thresholds.
pub const U_STREAM_SALT: u64 = 0x9bd1_e7a3_55aa_11ee;

fn validate_config(config: &ExperimentConfig) -> Result<()> {
    if config.methods.is_empty() {
        return Err(AuditError::Config("at least one method required".into()));
    }
    if config.models.is_empty() {
        return Err(AuditError::Config("at least one model required".into()));
    }
    let mut tags = std::collections::HashSet::new();
    for m in &config.models {
        let tag = m.tag();
        if tag.is_empty()
            || !tag
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(AuditError::Config(format!(
                "model tag '{tag}' must be non-empty and use only [A-Za-z0-9_-]"
            )));
        }
        if !tags.insert(tag.to_string()) {
            return Err(AuditError::Config(format!("duplicate model tag '{tag}'")));
        }
        if matches!(m, ModelSource::Oracle)
            && !matches!(config.data, DataSource::Synthetic { .. })
        {
            return Err(AuditError::Config(
                "the oracle model needs a synthetic data source".into(),
            ));
        }
    }
    let mut methods = std::collections::HashSet::new();
    for m in &config.methods {
        if !methods.insert(*m) {
            return Err(AuditError::Config(format!("duplicate method {m}")));
        }
    }
    Ok(())
}

/// Apply a sensitivity branch: relabel/drop outcomes and merge
/// probability columns by the same map.
pub fn apply_branch(
    branch: &BranchSpec,
    ds: &SurveyDataset,
    matrices: Vec<ProbabilityMatrix>,
) -> Result<(SurveyDataset, Vec<ProbabilityMatrix>)> {
    let k = ds.n_classes();
    if branch.relabel.len() != k {
        return Err(AuditError::Config(format!(
            "branch '{}': relabel length {} does not match {} classes",
            branch.tag,
            branch.relabel.len(),
            k
        )));
    }
    if branch.n_classes_after < 2 {
        return Err(AuditError::Config(format!(
            "branch '{}': need at least 2 classes after relabeling",
            branch.tag
        )));
    }
    if branch.relabel.iter().all(|&v| v == 0) {
        return Err(AuditError::Config(format!(
            "branch '{}': relabel drops every class",
            branch.tag
        )));
    }
    if let Some(&bad) = branch
        .relabel
        .iter()
        .find(|&&v| v > branch.n_classes_after)
    {
        return Err(AuditError::Config(format!(
            "branch '{}': relabel value {} exceeds n_classes_after {}",
            branch.tag, bad, branch.n_classes_after
        )));
    }
    let mut respondents = Vec::new();
    for r in ds.respondents() {
        let new = branch.relabel[r.outcome - 1];
        if new == 0 {
            continue;
        }
        let mut r2 = r.clone();
        r2.outcome = new;
        respondents.push(r2);
    }
    let ds2 = SurveyDataset::new(respondents, branch.n_classes_after, ds.group_labels().to_vec())?;
    let mut out_matrices = Vec::with_capacity(matrices.len());
    for m in matrices {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (id, row) in m.iter() {
            if !ds2.contains_id(id) {
                continue;
            }
            let mut merged = vec![0.0; branch.n_classes_after];
            let mut kept = 0.0;
            for (c, &p) in row.iter().enumerate() {
                let new = branch.relabel[c];
                if new > 0 {
                    merged[new - 1] += p;
                    kept += p;
                }
            }
            if kept < 1e-9 {
                return Err(AuditError::Validation(format!(
                    "branch '{}': row for id '{}' has no probability mass on kept classes",
                    branch.tag, id
                )));
            }
            for v in &mut merged {
                *v /= kept;
            }
            ids.push(id.to_string());
            rows.push(merged);
        }
        out_matrices.push(ProbabilityMatrix::new(
            m.source_tag(),
            ids,
            rows,
            ProbabilityMatrix::STRICT_TOLERANCE,
        )?);
    }
    Ok((ds2, out_matrices))
}

/// A model ready for per-split use: either a source to refit on every
/// split's training partition or a fixed matrix shared by all splits.
pub enum PreparedModel {
    PerSplit { tag: String, source: ModelSource },
    Fixed { tag: String, probs: Arc<ProbabilityMatrix> },
}

impl PreparedModel {
    pub fn tag(&self) -> &str {
        match self {
            PreparedModel::PerSplit { tag, .. } => tag,
            PreparedModel::Fixed { tag, .. } => tag,
        }
    }
}

struct SplitBundle {
    integrity: IntegrityReport,
    results: Vec<SplitResult>,
    thresholds: Vec<(String, Method, usize, ThresholdSet)>,
    overconfidence: BTreeMap<String, BTreeMap<String, Overconfidence>>,
    warnings: Vec<String>,
}

/// Load or generate the dataset plus any fixed probability matrices,
/// after validating the configuration and applying any branch. This is
/// the shared front half of [`run_experiment`], exposed so thinner
/// drivers (validation, single-split tooling) start from the same
/// inputs.
pub fn prepare_inputs(
    config: &ExperimentConfig,
) -> Result<(SurveyDataset, Vec<PreparedModel>)> {
    validate_config(config)?;
    let (ds, oracle_probs) = match &config.data {
        DataSource::Csv { path, schema_path } => {
            let schema = DatasetSchema::load(schema_path)?;
            (load_dataset(path, &schema)?, None)
        }
        DataSource::Synthetic { generator } => {
            let (ds, probs, _manifest) = generate(generator)?;
            (ds, Some(probs))
        }
    };
    let mut fixed: Vec<(String, ProbabilityMatrix)> = Vec::new();
    let mut models = Vec::new();
    for source in &config.models {
        match source {
            ModelSource::Prior | ModelSource::OrderedLogistic => {
                models.push(PreparedModel::PerSplit {
                    tag: source.tag().to_string(),
                    source: source.clone(),
                })
            }
            ModelSource::Oracle => {
                let probs = oracle_probs
                    .clone()
                    .expect("validated: oracle requires synthetic source");
                fixed.push(("oracle".to_string(), probs));
            }
            ModelSource::External { tag, path } => {
                let probs = ingest_probs(path, &ds)?;
                fixed.push((tag.clone(), probs));
            }
        }
    }
    // Apply the branch to the dataset and every fixed matrix, then
    // verify each fixed matrix covers the whole (post-branch) dataset.
    let (ds, fixed) = match &config.branch {
        Some(branch) => {
            let tags: Vec<String> = fixed.iter().map(|(t, _)| t.clone()).collect();
            let (ds2, mats) =
                apply_branch(branch, &ds, fixed.into_iter().map(|(_, m)| m).collect())?;
            (ds2, tags.into_iter().zip(mats).collect::<Vec<_>>())
        }
        None => (ds, fixed),
    };
    for (tag, probs) in &fixed {
        for id in ds.ids() {
            if probs.row(id).is_none() {
                return Err(AuditError::Validation(format!(
                    "model '{tag}' has no probability row for id '{id}'"
                )));
            }
        }
    }
    models.extend(
        fixed
            .into_iter()
            .map(|(tag, probs)| PreparedModel::Fixed {
                tag,
                probs: Arc::new(probs),
            }),
    );
    // Keep config order: per-split and fixed models were split apart,
    // so re-sort by the configured order.
    let order: HashMap<&str, usize> = config
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.tag(), i))
        .collect();
    models.sort_by_key(|m| order[m.tag()]);
    Ok((ds, models))
}

/// Check the regularized thresholds sit between the group and global
/// thresholds wherever all three are finite.
fn check_method_coherence(
    split_index: usize,
    per_method: &BTreeMap<Method, ThresholdSet>,
) -> Result<()> {
    let (Some(std_t), Some(mon_t), Some(reg_t)) = (
        per_method.get(&Method::Standard),
        per_method.get(&Method::Mondrian),
        per_method.get(&Method::RegMondrian),
    ) else {
        return Ok(());
    };
    let global = std_t.global_q;
    if !global.is_finite() {
        return Ok(());
    }
    for (gi, label) in reg_t.group_labels.iter().enumerate() {
        let q_g = mon_t.per_group_q[gi];
        let q_reg = reg_t.per_group_q[gi];
        if !q_g.is_finite() || !q_reg.is_finite() {
            continue;
        }
        let (lo, hi) = if q_g <= global { (q_g, global) } else { (global, q_g) };
        if q_reg < lo - 1e-9 || q_reg > hi + 1e-9 {
            return Err(AuditError::Integrity(format!(
                "split {split_index}: regularized threshold {q_reg} for group '{label}' \
                 falls outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

fn run_one_split(
    config: &ExperimentConfig,
    ds: &SurveyDataset,
    models: &[PreparedModel],
    split: &crate::splitter::SplitAssignment,
) -> Result<SplitBundle> {
    let idx = split.split_index;
    let integrity = verify_split(ds, split)?;
    if !integrity.ok() {
        return Err(AuditError::Integrity(format!(
            "split {idx} failed integrity verification: {integrity:?}"
        )));
    }
    let mut warnings = Vec::new();
    if let Some(min_cell) = &integrity.min_cal_cell {
        if min_cell.count < config.min_cell_warn {
            warnings.push(format!(
                "split {idx}: smallest calibration cell '{}' has {} respondents (< {})",
                min_cell.group, min_cell.count, config.min_cell_warn
            ));
        }
    }
    let train_ids = split.ids_in(Partition::Train);
    let cal_ids = split.ids_in(Partition::Cal);
    let test_ids = split.ids_in(Partition::Test);
    let mut cal_counts = vec![0usize; ds.n_groups()];
    let mut cal_weights: HashMap<String, f64> = HashMap::new();
    for id in &cal_ids {
        let r = ds.respondent(id).expect("verified");
        cal_counts[r.group - 1] += 1;
        cal_weights.insert(id.clone(), r.weight);
    }
    let needed: Vec<String> = cal_ids.iter().chain(&test_ids).cloned().collect();
    let u_seed = crate::rng::counter_seed(split.seed, U_STREAM_SALT);
    let options = PredictOptions {
        force_nonempty: config.force_nonempty,
        independent_u_per_label: config.independent_u_per_label,
    };

    let mut results = Vec::new();
    let mut thresholds_out = Vec::new();
    let mut overconfidence = BTreeMap::new();
    for model in models {
        let tag = model.tag().to_string();
        let context = |e: AuditError| {
            AuditError::Validation(format!("split {idx}, model '{tag}': {e}"))
        };
        let fitted;
        let matrix: &ProbabilityMatrix = match model {
            PreparedModel::Fixed { probs, .. } => probs.as_ref(),
            PreparedModel::PerSplit { source, .. } => {
                fitted = match source {
                    ModelSource::Prior => fit_prior(ds, &train_ids)
                        .and_then(|m| m.predict_probs(ds, &needed))
                        .map_err(context)?,
                    ModelSource::OrderedLogistic => {
                        fit_ordered_logistic(ds, &train_ids, &FitOptions::default())
                            .and_then(|m| m.predict_probs(ds, &needed))
                            .map_err(context)?
                    }
                    _ => unreachable!("fixed sources handled above"),
                };
                &fitted
            }
        };
        let scores = score_calibration(matrix, ds, &cal_ids, u_seed).map_err(context)?;
        let mut per_method = BTreeMap::new();
        for &method in &config.methods {
            let weights = matches!(method, Method::WeightedMondrian).then_some(&cal_weights);
            let threshold_set = calibrate(
                &scores,
                method,
                config.alpha,
                Some(config.lambda),
                weights,
                ds.group_labels(),
            )
            .map_err(context)?;
            for w in &threshold_set.warnings {
                warnings.push(format!("split {idx}, model '{tag}', {method}: {w}"));
            }
            per_method.insert(method, threshold_set);
        }
        check_method_coherence(idx, &per_method)?;
        for &method in &config.methods {
            let threshold_set = &per_method[&method];
            let sets = predict_sets(matrix, threshold_set, ds, &test_ids, u_seed, options)
                .map_err(context)?;
            results.push(evaluate_split(
                &sets,
                ds,
                threshold_set,
                idx,
                &tag,
                &cal_counts,
            )?);
        }
        for (method, threshold_set) in per_method {
            thresholds_out.push((tag.clone(), method, idx, threshold_set));
        }
        overconfidence.insert(
            tag.clone(),
            overconfidence_by_group(matrix, ds, &test_ids).map_err(context)?,
        );
    }
    Ok(SplitBundle {
        integrity,
        results,
        thresholds: thresholds_out,
        overconfidence,
        warnings,
    })
}

/// Means over splits for each (model, method) pair, in first-seen
/// (config) order.
fn summarize(results: &[SplitResult]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, Method)> = Vec::new();
    let mut acc: HashMap<(String, Method), Vec<&SplitResult>> = HashMap::new();
    for r in results {
        let key = (r.model_tag.clone(), r.method);
        if !acc.contains_key(&key) {
            order.push(key.clone());
        }
        acc.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &acc[&key];
            let mean_of = |f: &dyn Fn(&SplitResult) -> f64| {
                let vals: Vec<f64> = rows.iter().map(|r| f(r)).collect();
                crate::numeric::mean(&vals)
            };
            SummaryRow {
                model: key.0.clone(),
                method: key.1,
                n_splits: rows.len(),
                mean_weighted_coverage: mean_of(&|r| r.weighted_coverage),
                mean_unweighted_coverage: mean_of(&|r| r.unweighted_coverage),
                mean_weighted_gap: mean_of(&|r| r.weighted_gap),
                mean_unweighted_gap: mean_of(&|r| r.unweighted_gap),
                mean_weighted_size: mean_of(&|r| r.weighted_size),
                mean_unweighted_size: mean_of(&|r| r.unweighted_size),
                mean_empty_sets: mean_of(&|r| r.n_empty_sets as f64),
            }
        })
        .collect()
}

/// Paired deltas of every non-baseline method against STANDARD, per
/// model, on the three weighted metrics.
fn paired_tables(
    config: &ExperimentConfig,
    results: &[SplitResult],
    warnings: &mut Vec<String>,
) -> Result<Vec<PairedRow>> {
    if !config.methods.contains(&Method::Standard) {
        warnings.push("paired deltas skipped: STANDARD baseline not in methods".into());
        return Ok(Vec::new());
    }
    if config.n_splits < 2 {
        warnings.push("paired deltas skipped: need at least 2 splits".into());
        return Ok(Vec::new());
    }
    let mut series: HashMap<(String, Method), Vec<&SplitResult>> = HashMap::new();
    for r in results {
        series
            .entry((r.model_tag.clone(), r.method))
            .or_default()
            .push(r);
    }
    type Extract = fn(&SplitResult) -> f64;
    let metrics: [(&str, Extract); 3] = [
        ("weighted_coverage", |r| r.weighted_coverage),
        ("weighted_gap", |r| r.weighted_gap),
        ("weighted_size", |r| r.weighted_size),
    ];
    let mut rows = Vec::new();
    for model in &config.models {
        let tag = model.tag().to_string();
        let base = &series[&(tag.clone(), Method::Standard)];
        for &method in &config.methods {
            if method == Method::Standard {
                continue;
            }
            let other = &series[&(tag.clone(), method)];
            for (name, extract) in metrics {
                let a: Vec<f64> = base.iter().map(|r| extract(r)).collect();
                let b: Vec<f64> = other.iter().map(|r| extract(r)).collect();
                let p = paired_stats(name, &a, &b)?;
                rows.push(PairedRow {
                    model: tag.clone(),
                    baseline: Method::Standard,
                    method,
                    metric: name.to_string(),
                    n_splits: p.deltas.len(),
                    mean_delta: p.mean,
                    sd: p.sd,
                    se: p.se,
                    ci_lo: p.ci95.0,
                    ci_hi: p.ci95.1,
                    cohens_dz: p.cohens_dz,
                });
            }
        }
    }
    Ok(rows)
}

fn correlation_summary(obs: &[(f64, f64)]) -> CorrelationSummary {
    match cell_size_correlations(obs) {
        Ok((r, rho)) => CorrelationSummary {
            n_obs: obs.len(),
            pearson: Some(r),
            spearman: Some(rho),
            degenerate: false,
        },
        Err(_) => CorrelationSummary {
            n_obs: obs.len(),
            pearson: None,
            spearman: None,
            degenerate: true,
        },
    }
}

fn diagnostics(
    config: &ExperimentConfig,
    results: &[SplitResult],
    bundles_overconfidence: &[BTreeMap<String, BTreeMap<String, Overconfidence>>],
) -> DiagnosticsReport {
    let target = 1.0 - config.alpha;
    let mut per_model = BTreeMap::new();
    for model in &config.models {
        let tag = model.tag().to_string();
        // Split-mean overconfidence per group.
        let mut oc_acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for split_oc in bundles_overconfidence {
            if let Some(groups) = split_oc.get(&tag) {
                for (label, oc) in groups {
                    let e = oc_acc.entry(label.clone()).or_insert((0.0, 0.0, 0));
                    e.0 += oc.weighted_accuracy;
                    e.1 += oc.weighted_confidence;
                    e.2 += 1;
                }
            }
        }
        let overconfidence: BTreeMap<String, Overconfidence> = oc_acc
            .into_iter()
            .map(|(label, (acc, conf, n))| {
                let weighted_accuracy = acc / n as f64;
                let weighted_confidence = conf / n as f64;
                (
                    label,
                    Overconfidence {
                        weighted_accuracy,
                        weighted_confidence,
                        overconfidence: weighted_confidence - weighted_accuracy,
                    },
                )
            })
            .collect();

        // Per-group summary per method.
        let mut per_group_summary: BTreeMap<String, BTreeMap<String, GroupSummary>> =
            BTreeMap::new();
        // (coverage, size, n_cal, n_test) running sums plus a count.
        type Sums = (f64, f64, f64, f64, usize);
        let mut pg_acc: BTreeMap<(Method, String), Sums> = BTreeMap::new();
        for r in results.iter().filter(|r| r.model_tag == tag) {
            for (label, gm) in &r.per_group {
                let e = pg_acc
                    .entry((r.method, label.clone()))
                    .or_insert((0.0, 0.0, 0.0, 0.0, 0));
                e.0 += gm.weighted_coverage;
                e.1 += gm.weighted_size;
                e.2 += gm.n_cal as f64;
                e.3 += gm.n_test as f64;
                e.4 += 1;
            }
        }
        for ((method, label), (cov, size, ncal, ntest, n)) in pg_acc {
            per_group_summary
                .entry(method.as_str().to_string())
                .or_default()
                .insert(
                    label,
                    GroupSummary {
                        mean_weighted_coverage: cov / n as f64,
                        mean_weighted_size: size / n as f64,
                        mean_n_cal: ncal / n as f64,
                        mean_n_test: ntest / n as f64,
                        splits_present: n,
                    },
                );
        }

        // MONDRIAN vs STANDARD per-split per-group deltas.
        let both = config.methods.contains(&Method::Mondrian)
            && config.methods.contains(&Method::Standard);
        let (extrema_counts, size_corr, cov_corr) = if both {
            let mut by_split: BTreeMap<usize, (Option<&SplitResult>, Option<&SplitResult>)> =
                BTreeMap::new();
            for r in results.iter().filter(|r| r.model_tag == tag) {
                let slot = by_split.entry(r.split_index).or_insert((None, None));
                match r.method {
                    Method::Standard => slot.0 = Some(r),
                    Method::Mondrian => slot.1 = Some(r),
                    _ => {}
                }
            }
            let mut deltas = Vec::new();
            let mut size_obs = Vec::new();
            let mut cov_obs = Vec::new();
            for (split_index, (std_r, mon_r)) in by_split {
                let (Some(std_r), Some(mon_r)) = (std_r, mon_r) else { continue };
                let mut groups = BTreeMap::new();
                for (label, mon_g) in &mon_r.per_group {
                    let Some(std_g) = std_r.per_group.get(label) else { continue };
                    let size_delta = mon_g.weighted_size - std_g.weighted_size;
                    let coverage_error_delta = (mon_g.weighted_coverage - target).abs()
                        - (std_g.weighted_coverage - target).abs();
                    groups.insert(
                        label.clone(),
                        GroupDelta {
                            size_delta,
                            coverage_error_delta,
                            n_cal: mon_g.n_cal,
                        },
                    );
                    size_obs.push((mon_g.n_cal as f64, size_delta.abs()));
                    cov_obs.push((mon_g.n_cal as f64, coverage_error_delta));
                }
                deltas.push(SplitGroupDeltas {
                    split_index,
                    groups,
                });
            }
            (
                Some(extrema_concentration(&deltas)),
                Some(correlation_summary(&size_obs)),
                Some(correlation_summary(&cov_obs)),
            )
        } else {
            (None, None, None)
        };

        per_model.insert(
            tag,
            ModelDiagnostics {
                overconfidence,
                extrema_counts,
                size_delta_correlation: size_corr,
                coverage_error_delta_correlation: cov_corr,
                per_group_summary,
            },
        );
    }
    DiagnosticsReport {
        alpha: config.alpha,
        n_splits: config.n_splits,
        per_model,
    }
}

fn float_field(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "+inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn write_results_csv(path: &Path, results: &[SplitResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "split_index",
        "model",
        "method",
        "weighted_coverage",
        "unweighted_coverage",
        "weighted_gap",
        "unweighted_gap",
        "weighted_size",
        "unweighted_size",
        "n_empty_sets",
    ])?;
    for r in results {
        w.write_record([
            r.split_index.to_string(),
            r.model_tag.clone(),
            r.method.as_str().to_string(),
            float_field(r.weighted_coverage),
            float_field(r.unweighted_coverage),
            float_field(r.weighted_gap),
            float_field(r.unweighted_gap),
            float_field(r.weighted_size),
            float_field(r.unweighted_size),
            r.n_empty_sets.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One results.csv row (the per-group detail lives in
/// diagnostics.json, not here).
#[derive(Debug, Clone)]
pub struct ResultsRow {
    pub split_index: usize,
    pub model: String,
    pub method: Method,
    pub weighted_coverage: f64,
    pub unweighted_coverage: f64,
    pub weighted_gap: f64,
    pub unweighted_gap: f64,
    pub weighted_size: f64,
    pub unweighted_size: f64,
    pub n_empty_sets: usize,
}

fn parse_float_field(s: &str) -> Result<f64> {
    match s {
        "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse()
            .map_err(|_| AuditError::Schema(format!("bad float field '{s}'"))),
    }
}

pub fn load_results_csv(path: &Path) -> Result<Vec<ResultsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 10 {
            return Err(AuditError::Schema(format!(
                "results row has {} fields, expected 10",
                record.len()
            )));
        }
        rows.push(ResultsRow {
            split_index: record[0]
                .parse()
                .map_err(|_| AuditError::Schema(format!("bad split_index '{}'", &record[0])))?,
            model: record[1].to_string(),
            method: Method::parse(&record[2])?,
            weighted_coverage: parse_float_field(&record[3])?,
            unweighted_coverage: parse_float_field(&record[4])?,
            weighted_gap: parse_float_field(&record[5])?,
            unweighted_gap: parse_float_field(&record[6])?,
            weighted_size: parse_float_field(&record[7])?,
            unweighted_size: parse_float_field(&record[8])?,
            n_empty_sets: record[9]
                .parse()
                .map_err(|_| AuditError::Schema(format!("bad n_empty_sets '{}'", &record[9])))?,
        });
    }
    Ok(rows)
}

fn write_paired_csv(path: &Path, rows: &[PairedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "baseline",
        "method",
        "metric",
        "n_splits",
        "mean_delta",
        "sd",
        "se",
        "ci_lo",
        "ci_hi",
        "cohens_dz",
    ])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.baseline.as_str().to_string(),
            r.method.as_str().to_string(),
            r.metric.clone(),
            r.n_splits.to_string(),
            float_field(r.mean_delta),
            float_field(r.sd),
            float_field(r.se),
            float_field(r.ci_lo),
            float_field(r.ci_hi),
            r.cohens_dz.map(float_field).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_paired_csv(path: &Path) -> Result<Vec<PairedRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 11 {
            return Err(AuditError::Schema(format!(
                "paired row has {} fields, expected 11",
                record.len()
            )));
        }
        rows.push(PairedRow {
            model: record[0].to_string(),
            baseline: Method::parse(&record[1])?,
            method: Method::parse(&record[2])?,
            metric: record[3].to_string(),
            n_splits: record[4]
                .parse()
                .map_err(|_| AuditError::Schema(format!("bad n_splits '{}'", &record[4])))?,
            mean_delta: parse_float_field(&record[5])?,
            sd: parse_float_field(&record[6])?,
            se: parse_float_field(&record[7])?,
            ci_lo: parse_float_field(&record[8])?,
            ci_hi: parse_float_field(&record[9])?,
            cohens_dz: if record[10].is_empty() {
                None
            } else {
                Some(parse_float_field(&record[10])?)
            },
        });
    }
    Ok(rows)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash each tracked artifact, write the HASH manifest (one
/// `«hex»  «relpath»` line per file plus a TOTAL line), and return the
/// total digest.
fn write_hash_file(out_dir: &Path, tracked: &mut Vec<String>) -> Result<String> {
    tracked.sort();
    tracked.dedup();
    let mut body = String::new();
    for rel in tracked.iter() {
        let bytes = std::fs::read(out_dir.join(rel))?;
        body.push_str(&format!("{}  {}\n", sha256_hex(&bytes), rel));
    }
    let total = sha256_hex(body.as_bytes());
    body.push_str(&format!("{total}  TOTAL\n"));
    std::fs::write(out_dir.join("HASH"), body)?;
    Ok(total)
}

/// Re-hash every file listed in an output directory's HASH manifest.
/// Returns human-readable mismatch descriptions; empty means clean.
pub fn verify_hashes(out_dir: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(out_dir.join("HASH"))?;
    let mut problems = Vec::new();
    let mut body = String::new();
    let mut recorded_total = None;
    for line in text.lines() {
        let Some((hex, name)) = line.split_once("  ") else {
            problems.push(format!("malformed HASH line: '{line}'"));
            continue;
        };
        if name == "TOTAL" {
            recorded_total = Some(hex.to_string());
            continue;
        }
        match std::fs::read(out_dir.join(name)) {
            Ok(bytes) => {
                let actual = sha256_hex(&bytes);
                if actual != hex {
                    problems.push(format!("hash mismatch for {name}"));
                }
                body.push_str(&format!("{hex}  {name}\n"));
            }
            Err(_) => problems.push(format!("listed file missing: {name}")),
        }
    }
    if let Some(total) = recorded_total {
        if sha256_hex(body.as_bytes()) != total {
            problems.push("TOTAL line does not match the listed hashes".into());
        }
    } else {
        problems.push("HASH manifest has no TOTAL line".into());
    }
    Ok(problems)
}

/// Run the full experiment, writing all artifacts into `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    mode: ExecMode,
) -> Result<ExperimentReport> {
    let (ds, models) = prepare_inputs(config)?;
    let splits = make_splits(&ds, config.n_splits, config.fractions, config.master_seed)?;

    std::fs::create_dir_all(out_dir.join("thresholds"))?;
    let mut tracked: Vec<String> = Vec::new();

    let indices: Vec<usize> = (0..splits.len()).collect();
    let bundles = try_map_collect(mode, indices, |i| {
        run_one_split(config, &ds, &models, &splits[i])
    })?;

    // Merge in split order (try_map_collect preserves input order).
    let mut results = Vec::new();
    let mut integrity = Vec::new();
    let mut warnings = Vec::new();
    let mut overconfidence_per_split = Vec::new();
    for bundle in &bundles {
        results.extend(bundle.results.iter().cloned());
        integrity.push(bundle.integrity.clone());
        warnings.extend(bundle.warnings.iter().cloned());
        overconfidence_per_split.push(bundle.overconfidence.clone());
    }

    let summary = summarize(&results);
    let paired = paired_tables(config, &results, &mut warnings)?;
    let diagnostics_report = diagnostics(config, &results, &overconfidence_per_split);

    // Artifacts, in deterministic order.
    save_splits(
        &splits,
        config.master_seed,
        &out_dir.join("splits.csv"),
        &out_dir.join("splits.json"),
    )?;
    tracked.push("splits.csv".into());
    tracked.push("splits.json".into());
    for bundle in &bundles {
        for (tag, method, split_index, threshold_set) in &bundle.thresholds {
            let rel = format!(
                "thresholds/{}_{}_split{:03}.json",
                tag,
                method.as_str(),
                split_index
            );
            threshold_set.save_json(&out_dir.join(&rel))?;
            tracked.push(rel);
        }
    }
    write_results_csv(&out_dir.join("results.csv"), &results)?;
    tracked.push("results.csv".into());
    write_paired_csv(&out_dir.join("paired.csv"), &paired)?;
    tracked.push("paired.csv".into());
    std::fs::write(
        out_dir.join("diagnostics.json"),
        serde_json::to_string_pretty(&diagnostics_report)?,
    )?;
    tracked.push("diagnostics.json".into());
    std::fs::write(
        out_dir.join("integrity.json"),
        serde_json::to_string_pretty(&IntegrityFile {
            reports: integrity.clone(),
            warnings: warnings.clone(),
        })?,
    )?;
    tracked.push("integrity.json".into());
    let content_hash = write_hash_file(out_dir, &mut tracked)?;

    Ok(ExperimentReport {
        config: config.clone(),
        n_respondents: ds.len(),
        summary,
        paired,
        diagnostics: diagnostics_report,
        integrity,
        warnings,
        content_hash,
        results,
    })
}

/// Mechanism study: the same synthetic population at several predictor
/// informativeness levels, MONDRIAN vs STANDARD only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    pub base: ExperimentConfig,
    pub informativeness_levels: Vec<f64>,
}

/// Run the experiment at each informativeness level and merge the
/// per-model diagnostics under `model[info=level]` keys.
pub fn mechanism_study(
    config: &MechanismConfig,
    out_dir: &Path,
    mode: ExecMode,
) -> Result<DiagnosticsReport> {
    let DataSource::Synthetic { generator } = &config.base.data else {
        return Err(AuditError::Config(
            "mechanism study requires a synthetic data source".into(),
        ));
    };
    if config.informativeness_levels.len() < 2 {
        return Err(AuditError::Config(
            "mechanism study needs at least two informativeness levels".into(),
        ));
    }
    let mut merged = BTreeMap::new();
    for (i, &level) in config.informativeness_levels.iter().enumerate() {
        let mut level_generator = generator.clone();
        level_generator.informativeness = level;
        let mut level_config = config.base.clone();
        level_config.data = DataSource::Synthetic {
            generator: level_generator,
        };
        level_config.methods = vec![Method::Standard, Method::Mondrian];
        let report = run_experiment(&level_config, &out_dir.join(format!("info_{i}")), mode)?;
        for (tag, md) in report.diagnostics.per_model {
            merged.insert(format!("{tag}[info={level}]"), md);
        }
    }
    let report = DiagnosticsReport {
        alpha: config.base.alpha,
        n_splits: config.base.n_splits,
        per_model: merged,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("diagnostics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
