//! Subcommand implementations. Each one loads the (override-patched)
//! configuration, drives the core library, writes artifacts into the
//! output directory, and prints aligned tables unless `--quiet`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use conformal_audit_core::conformal::{
    calibrate, score_calibration, Method, ThresholdSet,
};
use conformal_audit_core::data::cross_tabulate;
use conformal_audit_core::error::{AuditError, Result};
use conformal_audit_core::exec::ExecMode;
use conformal_audit_core::harness::{
    mechanism_study, run_experiment, prepare_inputs, ExperimentConfig, MechanismConfig,
    ModelSource, PreparedModel, U_STREAM_SALT,
};
use conformal_audit_core::predictors::{fit_ordered_logistic, fit_prior, FitOptions};
use conformal_audit_core::rng::counter_seed;
use conformal_audit_core::splitter::{make_splits, verify_split, Partition, SplitAssignment};
use conformal_audit_core::data::ProbabilityMatrix;

use crate::render::{self, Table};
use crate::{CommonArgs, ReportArgs};

// ---------------------------------------------------------------------------
// Configuration loading and overrides
// ---------------------------------------------------------------------------

/// Set `path` (dot-separated; numeric segments index arrays) to
/// `value`. Intermediate segments must already exist; whether the final
/// key is legal is decided by schema validation afterwards.
fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(AuditError::Config(format!(
            "override path '{path}' has an empty segment"
        )));
    }
    let mut cur = doc;
    let mut value = Some(value);
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*seg).to_string(), value.take().unwrap());
                    return Ok(());
                }
                cur = map.get_mut(*seg).ok_or_else(|| {
                    AuditError::Config(format!(
                        "override path '{path}': key '{seg}' is not present in the configuration"
                    ))
                })?;
            }
            Value::Array(arr) => {
                let idx: usize = seg.parse().map_err(|_| {
                    AuditError::Config(format!(
                        "override path '{path}': '{seg}' is not an array index"
                    ))
                })?;
                let len = arr.len();
                let slot = arr.get_mut(idx).ok_or_else(|| {
                    AuditError::Config(format!(
                        "override path '{path}': index {idx} out of range (len {len})"
                    ))
                })?;
                if last {
                    *slot = value.take().unwrap();
                    return Ok(());
                }
                cur = slot;
            }
            _ => {
                return Err(AuditError::Config(format!(
                    "override path '{path}': '{seg}' does not address an object or array"
                )))
            }
        }
    }
    unreachable!("loop always returns on the last segment")
}

/// Read the config file and apply `--seed` plus `--override` patches.
fn load_patched_config(args: &CommonArgs, mechanism: bool) -> Result<Value> {
    let text = fs::read_to_string(&args.config).map_err(|e| {
        AuditError::Config(format!(
            "cannot read config '{}': {e}",
            args.config.display()
        ))
    })?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| {
        AuditError::Config(format!(
            "config '{}' is not valid JSON: {e}",
            args.config.display()
        ))
    })?;
    if !doc.is_object() {
        return Err(AuditError::Config(format!(
            "config '{}' must be a JSON object",
            args.config.display()
        )));
    }
    if let Some(seed) = args.seed {
        let path = if mechanism { "base.master_seed" } else { "master_seed" };
        set_path(&mut doc, path, serde_json::json!(seed))?;
    }
    for ov in &args.overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| {
            AuditError::Config(format!("override '{ov}' must look like KEY=VALUE"))
        })?;
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut doc, key, value)?;
    }
    Ok(doc)
}

fn experiment_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    serde_json::from_value(load_patched_config(args, false)?)
        .map_err(|e| AuditError::Config(e.to_string()))
}

fn mechanism_config(args: &CommonArgs) -> Result<MechanismConfig> {
    serde_json::from_value(load_patched_config(args, true)?)
        .map_err(|e| AuditError::Config(format!("mechanism config: {e}")))
}

fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_pretty_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, format!("{}\n", serde_json::to_string_pretty(value)?))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Split-0 plumbing shared by fit/calibrate
// ---------------------------------------------------------------------------

struct FirstSplit {
    config: ExperimentConfig,
    ds: conformal_audit_core::data::SurveyDataset,
    models: Vec<PreparedModel>,
    split: SplitAssignment,
    train_ids: Vec<String>,
    cal_ids: Vec<String>,
    needed_ids: Vec<String>,
    u_seed: u64,
}

fn first_split(args: &CommonArgs) -> Result<FirstSplit> {
    let config = experiment_config(args)?;
    let (ds, models) = prepare_inputs(&config)?;
    let splits = make_splits(&ds, config.n_splits, config.fractions, config.master_seed)?;
    let split = splits.into_iter().next().expect("n_splits >= 1 validated");
    let report = verify_split(&ds, &split)?;
    if !report.ok() {
        return Err(AuditError::Integrity(format!(
            "split 0 failed integrity verification: {report:?}"
        )));
    }
    let train_ids = split.ids_in(Partition::Train);
    let cal_ids = split.ids_in(Partition::Cal);
    let test_ids = split.ids_in(Partition::Test);
    let needed_ids: Vec<String> = cal_ids.iter().chain(&test_ids).cloned().collect();
    let u_seed = counter_seed(split.seed, U_STREAM_SALT);
    Ok(FirstSplit {
        config,
        ds,
        models,
        split,
        train_ids,
        cal_ids,
        needed_ids,
        u_seed,
    })
}

/// Fit (or fetch) one model's probability matrix for the given ids,
/// plus the fitted parameters when there was a fit at all.
fn model_matrix(
    model: &PreparedModel,
    ds: &conformal_audit_core::data::SurveyDataset,
    train_ids: &[String],
    predict_ids: &[String],
) -> Result<(ProbabilityMatrix, Option<Value>)> {
    match model {
        PreparedModel::Fixed { probs, .. } => Ok((probs.as_ref().clone(), None)),
        PreparedModel::PerSplit { source, .. } => match source {
            ModelSource::Prior => {
                let m = fit_prior(ds, train_ids)?;
                Ok((m.predict_probs(ds, predict_ids)?, Some(serde_json::to_value(&m)?)))
            }
            ModelSource::OrderedLogistic => {
                let m = fit_ordered_logistic(ds, train_ids, &FitOptions::default())?;
                Ok((m.predict_probs(ds, predict_ids)?, Some(serde_json::to_value(&m)?)))
            }
            _ => unreachable!("fixed sources are prepared as Fixed"),
        },
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub(crate) fn cmd_validate(args: &CommonArgs) -> Result<()> {
    let config = experiment_config(args)?;
    let (ds, models) = prepare_inputs(&config)?;
    let groups = cross_tabulate(&ds, None);
    ensure_out(&args.out)?;
    let summary = serde_json::json!({
        "n_respondents": ds.len(),
        "n_classes": ds.n_classes(),
        "n_groups": ds.n_groups(),
        "groups": groups,
        "models": models.iter().map(|m| m.tag().to_string()).collect::<Vec<_>>(),
        "methods": config.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "n_splits": config.n_splits,
        "alpha": config.alpha,
    });
    write_pretty_json(&args.out.join("validation.json"), &summary)?;
    if !args.quiet {
        println!(
            "configuration valid: {} respondents, {} classes, {} groups",
            ds.len(),
            ds.n_classes(),
            ds.n_groups()
        );
        let mut t = Table::new(["group", "count", "weight share"]);
        let total_w = groups.total_weight();
        for cell in &groups.cells {
            t.row([
                cell.label.clone(),
                cell.count.to_string(),
                format!("{:.4}", cell.weight_sum / total_w),
            ]);
        }
        print!("{}", t.render());
        println!(
            "models: {}; methods: {}",
            models.iter().map(|m| m.tag()).collect::<Vec<_>>().join(", "),
            config
                .methods
                .iter()
                .map(|m| m.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    Ok(())
}

pub(crate) fn cmd_split(args: &CommonArgs) -> Result<()> {
    let config = experiment_config(args)?;
    let (ds, _models) = prepare_inputs(&config)?;
    let splits = make_splits(&ds, config.n_splits, config.fractions, config.master_seed)?;
    let mut min_cal: Option<(String, usize)> = None;
    for split in &splits {
        let report = verify_split(&ds, split)?;
        if !report.ok() {
            return Err(AuditError::Integrity(format!(
                "split {} failed integrity verification: {report:?}",
                split.split_index
            )));
        }
        if let Some(cell) = &report.min_cal_cell {
            if min_cal.as_ref().is_none_or(|(_, n)| cell.count < *n) {
                min_cal = Some((cell.group.clone(), cell.count));
            }
        }
    }
    ensure_out(&args.out)?;
    conformal_audit_core::splitter::save_splits(
        &splits,
        config.master_seed,
        &args.out.join("splits.csv"),
        &args.out.join("splits.json"),
    )?;
    if !args.quiet {
        let sizes = splits[0].sizes();
        println!(
            "wrote {} split(s) over {} respondents (train/cal/test = {}/{}/{})",
            splits.len(),
            ds.len(),
            sizes[0],
            sizes[1],
            sizes[2]
        );
        if let Some((group, n)) = min_cal {
            println!("smallest calibration cell across splits: '{group}' with {n}");
        }
    }
    Ok(())
}

pub(crate) fn cmd_fit(args: &CommonArgs) -> Result<()> {
    let fs0 = first_split(args)?;
    ensure_out(&args.out)?;
    let mut lines = Vec::new();
    for model in &fs0.models {
        let tag = model.tag();
        match model {
            PreparedModel::Fixed { probs, .. } => {
                let rel = format!("probs_{tag}.csv");
                probs.save_csv(&args.out.join(&rel))?;
                lines.push(format!(
                    "model '{tag}': fixed matrix ({} rows) -> {rel}",
                    probs.len()
                ));
            }
            PreparedModel::PerSplit { .. } => {
                let (matrix, params) =
                    model_matrix(model, &fs0.ds, &fs0.train_ids, &fs0.needed_ids)?;
                let rel = format!("probs_{tag}_split000.csv");
                matrix.save_csv(&args.out.join(&rel))?;
                if let Some(params) = params {
                    write_pretty_json(
                        &args.out.join(format!("model_{tag}_split000.json")),
                        &params,
                    )?;
                }
                lines.push(format!(
                    "model '{tag}': fit on {} training rows, {} scored -> {rel}",
                    fs0.train_ids.len(),
                    matrix.len()
                ));
            }
        }
    }
    if !args.quiet {
        for line in lines {
            println!("{line}");
        }
    }
    Ok(())
}

pub(crate) fn cmd_calibrate(args: &CommonArgs) -> Result<()> {
    let fs0 = first_split(args)?;
    fs::create_dir_all(args.out.join("thresholds"))?;
    let mut cal_weights: HashMap<String, f64> = HashMap::new();
    for id in &fs0.cal_ids {
        cal_weights.insert(id.clone(), fs0.ds.respondent(id).expect("verified").weight);
    }
    let mut t = Table::new(["model", "method", "global q", "min group q", "max group q"]);
    for model in &fs0.models {
        let tag = model.tag().to_string();
        let (matrix, _) = model_matrix(model, &fs0.ds, &fs0.train_ids, &fs0.needed_ids)?;
        let scores = score_calibration(&matrix, &fs0.ds, &fs0.cal_ids, fs0.u_seed)?;
        for &method in &fs0.config.methods {
            let weights =
                matches!(method, Method::WeightedMondrian).then_some(&cal_weights);
            let ts = calibrate(
                &scores,
                method,
                fs0.config.alpha,
                Some(fs0.config.lambda),
                weights,
                fs0.ds.group_labels(),
            )?;
            let rel = format!(
                "thresholds/{}_{}_split{:03}.json",
                tag,
                method.as_str(),
                fs0.split.split_index
            );
            ts.save_json(&args.out.join(&rel))?;
            let (lo, hi) = per_group_extremes(&ts);
            t.row([
                tag.clone(),
                method.as_str().to_string(),
                render::fmt_threshold(ts.global_q),
                lo,
                hi,
            ]);
        }
    }
    if !args.quiet {
        println!(
            "calibrated split {} at alpha={}",
            fs0.split.split_index, fs0.config.alpha
        );
        print!("{}", t.render());
    }
    Ok(())
}

fn per_group_extremes(ts: &ThresholdSet) -> (String, String) {
    let finite_min = ts.per_group_q.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = ts.per_group_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if ts.per_group_q.is_empty() {
        ("-".into(), "-".into())
    } else {
        (render::fmt_threshold(finite_min), render::fmt_threshold(max))
    }
}

pub(crate) fn cmd_audit(args: &CommonArgs) -> Result<()> {
    let mut config = experiment_config(args)?;
    // An audit is the first split of the configured run, end to end:
    // split seeds depend only on (master_seed, index), so its artifacts
    // match split 0 of the full experiment.
    config.n_splits = 1;
    let report = run_experiment(&config, &args.out, ExecMode::from_env())?;
    render::print_warnings(&report.warnings);
    if !args.quiet {
        print!("{}", render::summary_table(&report.summary).render());
        for (model, md) in &report.diagnostics.per_model {
            let t = render::per_group_table(md);
            if !t.is_empty() {
                println!("per-group means, model '{model}' (sorted by STANDARD coverage):");
                print!("{}", t.render());
            }
        }
        println!("content hash: {}", report.content_hash);
    }
    Ok(())
}

pub(crate) fn cmd_experiment(args: &CommonArgs) -> Result<()> {
    let config = experiment_config(args)?;
    let report = run_experiment(&config, &args.out, ExecMode::from_env())?;
    render::print_warnings(&report.warnings);
    if !args.quiet {
        println!(
            "{} splits x {} models x {} methods over {} respondents",
            config.n_splits,
            config.models.len(),
            config.methods.len(),
            report.n_respondents
        );
        print!("{}", render::summary_table(&report.summary).render());
        println!("content hash: {}", report.content_hash);
    }
    Ok(())
}

pub(crate) fn cmd_mechanism(args: &CommonArgs) -> Result<()> {
    let config = mechanism_config(args)?;
    let report = mechanism_study(&config, &args.out, ExecMode::from_env())?;
    if !args.quiet {
        let mut t = Table::new([
            "model[level]",
            "corr(n_cal, |dSize|)",
            "corr(n_cal, dCovErr)",
            "top size-inflation cell",
        ]);
        for (key, md) in &report.per_model {
            t.row([
                key.clone(),
                render::fmt_correlation(md.size_delta_correlation.as_ref()),
                render::fmt_correlation(md.coverage_error_delta_correlation.as_ref()),
                render::fmt_top_extremum(md.extrema_counts.as_ref()),
            ]);
        }
        print!("{}", t.render());
    }
    Ok(())
}

pub(crate) fn cmd_report(args: &ReportArgs) -> Result<()> {
    render::render_report(&args.out, args.quiet)
}
