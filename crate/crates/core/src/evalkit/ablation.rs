//! Ablation tables: one row per method variant with its AUROC, best F1, and
//! the `(theta, K_d)` that achieved it. The best value of each metric column
//! is wrapped in `**`.

use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["Method", "K_p", "loss", "AUROC", "F1", "(θ, K_d)"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub kp: Option<usize>,
    pub loss: Option<String>,
    pub auroc: Option<f64>,
    pub f1: f64,
    pub theta: f64,
    pub density_size: usize,
}

impl AblationRow {
    pub fn from_report(method: &str, kp: Option<usize>, loss: Option<&str>, report: &MetricsReport) -> Self {
        AblationRow {
            method: method.to_string(),
            kp,
            loss: loss.map(str::to_string),
            auroc: report.auroc,
            f1: report.f1,
            theta: report.best_params.theta,
            density_size: report.best_params.density_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub csv: String,
    pub text: String,
}

fn column_max(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.flatten().fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

fn mark(cell: String, is_max: bool) -> String {
    if is_max {
        format!("**{cell}**")
    } else {
        cell
    }
}

/// Cells of each row; `digits` of `None` keeps full precision.
fn cells(rows: &[AblationRow], digits: Option<usize>) -> Vec<[String; 6]> {
    let best_auroc = column_max(rows.iter().map(|r| r.auroc));
    let best_f1 = column_max(rows.iter().map(|r| Some(r.f1)));
    let num = |v: f64| match digits {
        Some(d) => format!("{v:.d$}"),
        None => format!("{v}"),
    };
    rows.iter()
        .map(|r| {
            [
                r.method.clone(),
                r.kp.map_or("-".into(), |k| k.to_string()),
                r.loss.clone().unwrap_or_else(|| "-".into()),
                r.auroc.map_or("-".into(), |a| mark(num(a), Some(a) == best_auroc)),
                mark(num(r.f1), Some(r.f1) == best_f1),
                format!("({}, {})", num(r.theta), r.density_size),
            ]
        })
        .collect()
}

/// Renders the rows as CSV (full precision) and as an aligned text table
/// (three decimals).
pub fn ablation_report(rows: &[AblationRow]) -> Result<AblationTable> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    writer.write_record(HEADER).map_err(csv_err)?;
    for row in cells(rows, None) {
        writer.write_record(&row).map_err(csv_err)?;
    }
    let csv = String::from_utf8(writer.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?).expect("utf-8 input");

    let body = cells(rows, Some(3));
    let mut widths: Vec<usize> = HEADER.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cols: Vec<&str>| -> String {
        let padded: Vec<String> = cols.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut text = line(HEADER.to_vec());
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    text.push_str(&line(rule.iter().map(String::as_str).collect()));
    for row in &body {
        text.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    Ok(AblationTable { csv, text })
}

fn parse_num(cell: &str) -> Result<f64> {
    cell.trim_matches('*').parse().map_err(|_| Error::Config(format!("bad number `{cell}` in ablation csv")))
}

/// Reads rows back from [`ablation_report`]'s CSV.
pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Config(format!("csv: {e}")))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Config(format!("unexpected ablation header {header:?}")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| Error::Config(format!("csv: {e}")))?;
        let opt = |s: &str| (s != "-").then(|| s.to_string());
        let pair = r[5].trim_start_matches('(').trim_end_matches(')');
        let (theta, kd) = pair.split_once(", ").ok_or_else(|| Error::Config(format!("bad (θ, K_d) cell `{}`", &r[5])))?;
        rows.push(AblationRow {
            method: r[0].to_string(),
            kp: opt(&r[1]).map(|k| k.parse().map_err(|_| Error::Config(format!("bad K_p `{k}`")))).transpose()?,
            loss: opt(&r[2]),
            auroc: opt(&r[3]).map(|a| parse_num(&a)).transpose()?,
            f1: parse_num(&r[4])?,
            theta: parse_num(theta)?,
            density_size: kd.parse().map_err(|_| Error::Config(format!("bad K_d `{kd}`")))?,
        });
    }
    Ok(rows)
}
