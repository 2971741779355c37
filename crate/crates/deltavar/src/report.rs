//! Report directory files: `report.csv`, `metrics.json`, `provenance.json`,
//! `timing.json` and the tidy plot CSVs under `plots/`.

use std::path::{Path, PathBuf};

use deltavar_core::bench::{MetricSummary, ReportRow, ScenarioReport, Timing};
use deltavar_core::covariance::SigmaKind;
use deltavar_core::oracles::OracleKind;
use serde_json::{json, Map, Value};

use crate::error::{CliError, Result};
use crate::floats::{fmt_f64, fmt_opt, json_num};

pub const REPORT_HEADER: [&str; 8] = ["input_id", "qoi_id", "method", "nu", "error", "sigma_kind", "reg", "oracle_kind"];

fn csv_fail(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Failure(format!("{}: {e}", path.display()))
}

pub fn report_record(r: &ReportRow) -> [String; 8] {
    [
        r.input_id.clone(),
        r.qoi_id.clone(),
        r.method.clone(),
        fmt_f64(r.nu),
        fmt_opt(r.error),
        r.sigma_kind.map(|k| k.name().to_owned()).unwrap_or_default(),
        fmt_opt(r.reg),
        r.oracle_kind.map(|k| k.name().to_owned()).unwrap_or_default(),
    ]
}

/// Report rows as CSV text, header included.
pub fn report_csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Failure(e.to_string());
    w.write_record(REPORT_HEADER).map_err(fail)?;
    for r in rows {
        w.write_record(report_record(r)).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Failure(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Failure(e.to_string()))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_fail(path))?;
    let header: Vec<String> = r.headers().map_err(csv_fail(path))?.iter().map(String::from).collect();
    if header != REPORT_HEADER {
        return Err(CliError::Failure(format!("{}: unexpected header {header:?}", path.display())));
    }
    let bad = |what: &str| CliError::Failure(format!("{}: bad {what}", path.display()));
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad("number"))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_fail(path))?;
        rows.push(ReportRow {
            input_id: rec[0].to_owned(),
            qoi_id: rec[1].to_owned(),
            method: rec[2].to_owned(),
            nu: rec[3].parse().map_err(|_| bad("nu"))?,
            error: opt(&rec[4])?,
            sigma_kind: if rec[5].is_empty() { None } else { Some(SigmaKind::parse(&rec[5])?) },
            reg: opt(&rec[6])?,
            oracle_kind: if rec[7].is_empty() { None } else { Some(OracleKind::parse(&rec[7])?) },
        });
    }
    Ok(rows)
}

pub fn metric_json(m: &MetricSummary) -> Value {
    json!({
        "qoi_id": m.qoi_id,
        "method": m.method,
        "auc": json_num(m.auc),
        "corr": json_num(m.corr),
        "loglik": json_num(m.loglik),
        "improvement_auc": json_num(m.improvement_auc),
        "improvement_corr": json_num(m.improvement_corr),
        "improvement_loglik": json_num(m.improvement_loglik),
        "stderr_auc": json_num(m.stderr_auc),
        "stderr_corr": json_num(m.stderr_corr),
        "stderr_loglik": json_num(m.stderr_loglik),
        "alpha": json_num(m.alpha),
        "beta": json_num(m.beta),
        "hyper": m.hyper.map_or(Value::Null, json_num),
    })
}

pub fn metrics_json(report: &ScenarioReport) -> Value {
    json!({
        "scenario": report.scenario.name(),
        "metrics": report.metrics.iter().map(metric_json).collect::<Vec<_>>(),
        "cost_quality": report.cost_quality.iter().map(|c| json!({
            "method": c.method,
            "metric": c.metric,
            "cost": json_num(c.cost),
            "improvement": json_num(c.improvement),
            "stderr": json_num(c.stderr),
        })).collect::<Vec<_>>(),
    })
}

/// Seeds, versions, the resolved config and run facts. Contains nothing
/// that depends on the machine or the thread count.
pub fn provenance_json(command: &str, seed: u64, config: &Value, values: &[(String, f64)]) -> Value {
    let mut facts = Map::new();
    for (k, v) in values {
        facts.insert(k.clone(), json_num(*v));
    }
    json!({
        "command": command,
        "seed": seed,
        "versions": {
            "deltavar": env!("CARGO_PKG_VERSION"),
            "deltavar-core": deltavar_core::VERSION,
        },
        "config": config,
        "values": facts,
    })
}

pub fn timing_json(threads: usize, timings: &[Timing]) -> Value {
    let mut t = Map::new();
    for x in timings {
        t.insert(x.label.clone(), json_num(x.seconds));
    }
    json!({ "threads": threads, "seconds": t })
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn table(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Failure(e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Failure(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Failure(e.to_string()))
}

/// The tidy plot tables of a report, as `(file name, CSV text)`. Every table
/// is emitted, header-only when the scenario has no such series.
pub fn plot_tables(report: &ScenarioReport) -> Result<Vec<(&'static str, String)>> {
    let f = fmt_f64;
    Ok(vec![
        (
            "retention.csv",
            table(
                &["qoi_id", "method", "fraction_removed", "mean_l1"],
                report
                    .retention
                    .iter()
                    .map(|p| vec![p.qoi_id.clone(), p.method.clone(), f(p.fraction_removed), f(p.mean_l1)]),
            )?,
        ),
        (
            "cost_quality.csv",
            table(
                &["method", "metric", "cost", "improvement", "stderr"],
                report
                    .cost_quality
                    .iter()
                    .map(|p| vec![p.method.clone(), p.metric.clone(), f(p.cost), f(p.improvement), f(p.stderr)]),
            )?,
        ),
        (
            "convergence.csv",
            table(
                &[
                    "qoi_id",
                    "n",
                    "true_var",
                    "delta_var",
                    "ensemble_var",
                    "beta_var",
                    "linearized_var",
                    "delta_lo",
                    "delta_hi",
                    "ensemble_lo",
                    "ensemble_hi",
                ],
                report.convergence.iter().map(|p| {
                    vec![
                        p.qoi_id.clone(),
                        p.n.to_string(),
                        f(p.true_var),
                        f(p.delta_var),
                        f(p.ensemble_var),
                        f(p.beta_var),
                        f(p.linearized_var),
                        f(p.delta_lo),
                        f(p.delta_hi),
                        f(p.ensemble_lo),
                        f(p.ensemble_hi),
                    ]
                }),
            )?,
        ),
        (
            "posterior_gap.csv",
            table(
                &["n", "delta_var", "mc_var", "mc_stderr", "gap"],
                report
                    .posterior_gap
                    .iter()
                    .map(|p| vec![p.n.to_string(), f(p.delta_var), f(p.mc_var), f(p.mc_stderr), f(p.gap)]),
            )?,
        ),
        (
            "eigen.csv",
            table(
                &["index", "eigenvalue", "delta_var", "mc_var", "mc_stderr"],
                report
                    .eigen
                    .iter()
                    .map(|p| vec![p.index.to_string(), f(p.eigenvalue), f(p.delta_var), f(p.mc_var), f(p.mc_stderr)]),
            )?,
        ),
        (
            "finetune.csv",
            table(
                &["qoi_id", "untuned", "tuned", "scales"],
                report.finetune.iter().map(|p| {
                    let scales: Vec<String> = p.scales.iter().map(|s| f(*s)).collect();
                    vec![p.qoi_id.clone(), f(p.untuned), f(p.tuned), scales.join(";")]
                }),
            )?,
        ),
    ])
}

/// Writes the plot tables into `dir/plots/`. `dir` must already hold the
/// run's `report.csv`.
pub fn emit_plotdata(report: &ScenarioReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.join("report.csv").is_file() {
        return Err(CliError::Failure(format!("{} is not a report directory (no report.csv)", dir.display())));
    }
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(CliError::io(&plots))?;
    let mut out = Vec::new();
    for (name, text) in plot_tables(report)? {
        let p = plots.join(name);
        std::fs::write(&p, text).map_err(CliError::io(&p))?;
        out.push(p);
    }
    Ok(out)
}
