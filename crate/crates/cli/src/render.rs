//! Aligned plain-text tables plus the `report` subcommand, which
//! renders an experiment directory and re-emits the aggregated tables
//! as CSV files.

use std::collections::BTreeMap;
use std::path::Path;

use conformal_audit_core::conformal::Method;
use conformal_audit_core::error::{AuditError, Result};
use conformal_audit_core::evaluation::ExtremaCounts;
use conformal_audit_core::harness::{
    load_paired_csv, load_results_csv, verify_hashes, CorrelationSummary, DiagnosticsReport,
    ModelDiagnostics, PairedRow, ResultsRow, SummaryRow,
};

// ---------------------------------------------------------------------------
// Table rendering
// ---------------------------------------------------------------------------

/// A plain-text table: first column left-aligned, the rest
/// right-aligned, one dash rule under the header.
pub(crate) struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<'a>(header: impl IntoIterator<Item = &'a str>) -> Self {
        Table {
            header: header.into_iter().map(str::to_string).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: impl IntoIterator<Item = String>) {
        let cells: Vec<String> = cells.into_iter().collect();
        assert_eq!(cells.len(), self.header.len(), "ragged table row");
        self.rows.push(cells);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let emit = |out: &mut String, cells: &[String]| {
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    out.push_str("  ");
                }
                if i == 0 {
                    out.push_str(&format!("{cell:<w$}"));
                } else {
                    out.push_str(&format!("{cell:>w$}"));
                }
            }
            // Trim the padding after the last column.
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        };
        emit(&mut out, &self.header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        emit(&mut out, &rule);
        for row in &self.rows {
            emit(&mut out, row);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Cell formatting
// ---------------------------------------------------------------------------

pub(crate) fn fmt_threshold(q: f64) -> String {
    if q.is_finite() {
        format!("{q:.6}")
    } else if q > 0.0 {
        "+inf".into()
    } else {
        "-inf".into()
    }
}

fn fmt_cov(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_size(v: f64) -> String {
    format!("{v:.3}")
}

fn fmt_delta(v: f64) -> String {
    format!("{v:+.4}")
}

pub(crate) fn fmt_correlation(c: Option<&CorrelationSummary>) -> String {
    match c {
        None => "-".into(),
        Some(c) if c.degenerate => format!("degenerate (n={})", c.n_obs),
        Some(c) => format!(
            "r={} rho={} (n={})",
            c.pearson.map(|r| format!("{r:+.3}")).unwrap_or_else(|| "n/a".into()),
            c.spearman.map(|r| format!("{r:+.3}")).unwrap_or_else(|| "n/a".into()),
            c.n_obs
        ),
    }
}

pub(crate) fn fmt_top_extremum(counts: Option<&BTreeMap<String, ExtremaCounts>>) -> String {
    counts
        .and_then(|m| m.iter().max_by_key(|(_, c)| c.size_inflation))
        .map(|(label, c)| format!("{label} ({}x)", c.size_inflation))
        .unwrap_or_else(|| "-".into())
}

pub(crate) fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

// ---------------------------------------------------------------------------
// Tables over harness outputs
// ---------------------------------------------------------------------------

pub(crate) fn summary_table(summary: &[SummaryRow]) -> Table {
    let mut t = Table::new([
        "model", "method", "w-cov", "u-cov", "w-gap", "w-size", "empty",
    ]);
    for r in summary {
        t.row([
            r.model.clone(),
            r.method.as_str().to_string(),
            fmt_cov(r.mean_weighted_coverage),
            fmt_cov(r.mean_unweighted_coverage),
            fmt_cov(r.mean_weighted_gap),
            fmt_size(r.mean_weighted_size),
            format!("{:.2}", r.mean_empty_sets),
        ]);
    }
    t
}

/// Canonical method ordering for columns, then anything unexpected.
fn method_order(keys: impl Iterator<Item = String>) -> Vec<String> {
    let canon: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
    let mut present: Vec<String> = keys.collect();
    present.sort_by_key(|k| {
        canon
            .iter()
            .position(|c| c == k)
            .unwrap_or(canon.len())
    });
    present
}

/// Per-group split-mean table for one model, groups sorted by the
/// STANDARD method's coverage ascending (worst-covered cells first).
pub(crate) fn per_group_table(md: &ModelDiagnostics) -> Table {
    let methods = method_order(md.per_group_summary.keys().cloned());
    let mut header = vec!["group".to_string(), "n_cal".to_string()];
    for m in &methods {
        header.push(format!("{m} cov"));
        header.push(format!("{m} size"));
    }
    let mut t = Table::new(header.iter().map(String::as_str));
    let Some(first) = methods.first() else {
        return t;
    };
    let sort_key = md
        .per_group_summary
        .get(Method::Standard.as_str())
        .unwrap_or(&md.per_group_summary[first]);
    let mut groups: Vec<&String> = sort_key.keys().collect();
    groups.sort_by(|a, b| {
        sort_key[*a]
            .mean_weighted_coverage
            .partial_cmp(&sort_key[*b].mean_weighted_coverage)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(b))
    });
    for group in groups {
        let mut cells = vec![
            group.clone(),
            format!("{:.1}", sort_key[group].mean_n_cal),
        ];
        for m in &methods {
            match md.per_group_summary[m].get(group) {
                Some(g) => {
                    cells.push(fmt_cov(g.mean_weighted_coverage));
                    cells.push(fmt_size(g.mean_weighted_size));
                }
                None => {
                    cells.push("-".into());
                    cells.push("-".into());
                }
            }
        }
        t.row(cells);
    }
    t
}

// ---------------------------------------------------------------------------
// The report subcommand
// ---------------------------------------------------------------------------

/// Recompute per-(model, method) means from the per-split rows,
/// preserving first-seen order.
fn aggregate_results(rows: &[ResultsRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, Method)> = Vec::new();
    let mut acc: BTreeMap<(String, Method), Vec<&ResultsRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.model.clone(), r.method);
        if !acc.contains_key(&key) {
            order.push(key.clone());
        }
        acc.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &acc[&key];
            let n = rows.len() as f64;
            let mean = |f: &dyn Fn(&ResultsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                model: key.0,
                method: key.1,
                n_splits: rows.len(),
                mean_weighted_coverage: mean(&|r| r.weighted_coverage),
                mean_unweighted_coverage: mean(&|r| r.unweighted_coverage),
                mean_weighted_gap: mean(&|r| r.weighted_gap),
                mean_unweighted_gap: mean(&|r| r.unweighted_gap),
                mean_weighted_size: mean(&|r| r.weighted_size),
                mean_unweighted_size: mean(&|r| r.unweighted_size),
                mean_empty_sets: mean(&|r| r.n_empty_sets as f64),
            }
        })
        .collect()
}

fn paired_table(paired: &[PairedRow]) -> Table {
    let mut t = Table::new([
        "model", "method", "metric", "mean delta", "95% CI", "dz",
    ]);
    for r in paired {
        t.row([
            r.model.clone(),
            format!("{} - {}", r.method.as_str(), r.baseline.as_str()),
            r.metric.clone(),
            fmt_delta(r.mean_delta),
            format!("[{:+.4}, {:+.4}]", r.ci_lo, r.ci_hi),
            r.cohens_dz
                .map(|d| format!("{d:+.2}"))
                .unwrap_or_else(|| "n/a".into()),
        ]);
    }
    t
}

/// With a single split there is nothing to pair, so the table carries
/// the raw single-split deltas against STANDARD with "CI n/a" markers.
fn single_split_paired(rows: &[ResultsRow]) -> (Table, Vec<PairedRow>) {
    let mut t = Table::new([
        "model", "method", "metric", "mean delta", "95% CI", "dz",
    ]);
    let mut csv_rows = Vec::new();
    let Some(first_split) = rows.iter().map(|r| r.split_index).min() else {
        return (t, csv_rows);
    };
    let split: Vec<&ResultsRow> = rows
        .iter()
        .filter(|r| r.split_index == first_split)
        .collect();
    type Extract = fn(&ResultsRow) -> f64;
    let metrics: [(&str, Extract); 3] = [
        ("weighted_coverage", |r| r.weighted_coverage),
        ("weighted_gap", |r| r.weighted_gap),
        ("weighted_size", |r| r.weighted_size),
    ];
    for r in &split {
        if r.method == Method::Standard {
            continue;
        }
        let Some(base) = split
            .iter()
            .find(|b| b.model == r.model && b.method == Method::Standard)
        else {
            continue;
        };
        for (name, metric) in metrics {
            let delta = metric(r) - metric(base);
            t.row([
                r.model.clone(),
                format!("{} - STANDARD", r.method.as_str()),
                name.to_string(),
                fmt_delta(delta),
                "CI n/a".into(),
                "n/a".into(),
            ]);
            csv_rows.push(PairedRow {
                model: r.model.clone(),
                baseline: Method::Standard,
                method: r.method,
                metric: name.to_string(),
                n_splits: 1,
                mean_delta: delta,
                sd: f64::NAN,
                se: f64::NAN,
                ci_lo: f64::NAN,
                ci_hi: f64::NAN,
                cohens_dz: None,
            });
        }
    }
    (t, csv_rows)
}

fn diagnostics_tables(diagnostics: &DiagnosticsReport) -> Vec<(String, Table)> {
    let mut out = Vec::new();
    for (model, md) in &diagnostics.per_model {
        let pg = per_group_table(md);
        if !pg.is_empty() {
            out.push((
                format!("per-group weighted coverage, model '{model}' (sorted by STANDARD coverage)"),
                pg,
            ));
        }
        let mut over = Table::new(["group", "w-accuracy", "w-confidence", "overconfidence"]);
        for (group, o) in &md.overconfidence {
            over.row([
                group.clone(),
                fmt_cov(o.weighted_accuracy),
                fmt_cov(o.weighted_confidence),
                fmt_delta(o.overconfidence),
            ]);
        }
        if !over.is_empty() {
            out.push((format!("reported-confidence audit, model '{model}'"), over));
        }
        let mut diag = Table::new(["diagnostic", "value"]);
        diag.row([
            "corr(n_cal, |delta size|)".into(),
            fmt_correlation(md.size_delta_correlation.as_ref()),
        ]);
        diag.row([
            "corr(n_cal, delta |coverage err|)".into(),
            fmt_correlation(md.coverage_error_delta_correlation.as_ref()),
        ]);
        diag.row([
            "most size-inflated cell".into(),
            fmt_top_extremum(md.extrema_counts.as_ref()),
        ]);
        out.push((format!("failure diagnostics, model '{model}'"), diag));
    }
    out
}

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "method",
        "n_splits",
        "mean_weighted_coverage",
        "mean_unweighted_coverage",
        "mean_weighted_gap",
        "mean_unweighted_gap",
        "mean_weighted_size",
        "mean_unweighted_size",
        "mean_empty_sets",
    ])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.method.as_str().to_string(),
            r.n_splits.to_string(),
            format!("{}", r.mean_weighted_coverage),
            format!("{}", r.mean_unweighted_coverage),
            format!("{}", r.mean_weighted_gap),
            format!("{}", r.mean_unweighted_gap),
            format!("{}", r.mean_weighted_size),
            format!("{}", r.mean_unweighted_size),
            format!("{}", r.mean_empty_sets),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_per_group_csv(path: &Path, diagnostics: &DiagnosticsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "method",
        "group",
        "mean_n_cal",
        "mean_n_test",
        "mean_weighted_coverage",
        "mean_weighted_size",
        "splits_present",
    ])?;
    for (model, md) in &diagnostics.per_model {
        for (method, groups) in &md.per_group_summary {
            for (group, g) in groups {
                w.write_record([
                    model.clone(),
                    method.clone(),
                    group.clone(),
                    format!("{}", g.mean_n_cal),
                    format!("{}", g.mean_n_test),
                    format!("{}", g.mean_weighted_coverage),
                    format!("{}", g.mean_weighted_size),
                    g.splits_present.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_paired_report_csv(path: &Path, rows: &[PairedRow]) -> Result<()> {
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
    let opt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.baseline.as_str().to_string(),
            r.method.as_str().to_string(),
            r.metric.clone(),
            r.n_splits.to_string(),
            format!("{}", r.mean_delta),
            opt(r.sd),
            opt(r.se),
            opt(r.ci_lo),
            opt(r.ci_hi),
            r.cohens_dz.map(|d| format!("{d}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Render all tables from an experiment directory. Hash mismatches are
/// reported as warnings without blocking the rendering; genuinely
/// missing artifacts abort with the offending path named.
pub(crate) fn render_report(out: &Path, quiet: bool) -> Result<()> {
    match verify_hashes(out) {
        Ok(problems) => {
            for p in &problems {
                eprintln!("warning: {p}");
            }
        }
        Err(e) => eprintln!("warning: hash verification unavailable: {e}"),
    }
    let results_path = out.join("results.csv");
    let paired_path = out.join("paired.csv");
    let diagnostics_path = out.join("diagnostics.json");
    for p in [&results_path, &paired_path, &diagnostics_path] {
        if !p.exists() {
            return Err(AuditError::Validation(format!(
                "missing artifact: {}",
                p.display()
            )));
        }
    }
    let results = load_results_csv(&results_path)?;
    if results.is_empty() {
        return Err(AuditError::Validation(format!(
            "no result rows in {}",
            results_path.display()
        )));
    }
    let paired = load_paired_csv(&paired_path)?;
    let diagnostics: DiagnosticsReport =
        serde_json::from_str(&std::fs::read_to_string(&diagnostics_path)?)?;

    let summary = aggregate_results(&results);
    let (paired_tbl, paired_for_csv) = if paired.is_empty() {
        single_split_paired(&results)
    } else {
        (paired_table(&paired), paired.clone())
    };

    write_summary_csv(&out.join("report_main_results.csv"), &summary)?;
    write_per_group_csv(&out.join("report_per_group.csv"), &diagnostics)?;
    write_paired_report_csv(&out.join("report_paired.csv"), &paired_for_csv)?;

    if !quiet {
        println!(
            "main results over {} split(s) at alpha={}:",
            diagnostics.n_splits, diagnostics.alpha
        );
        print!("{}", summary_table(&summary).render());
        println!();
        println!("paired deltas vs STANDARD:");
        if paired_tbl.is_empty() {
            println!("(none: single model/method)");
        } else {
            print!("{}", paired_tbl.render());
        }
        for (title, table) in diagnostics_tables(&diagnostics) {
            println!();
            println!("{title}:");
            print!("{}", table.render());
        }
    }
    Ok(())
}
