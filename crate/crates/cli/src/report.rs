//! Benchmark tables: one column per encoder, one row per metric, the best
//! cell of every row marked.
//!
//! Cells are rounded to 5 decimals. A row whose largest magnitude reaches
//! [`SCIENTIFIC_THRESHOLD`] switches entirely to two-decimal scientific
//! notation (`6.35E04`, `3.15E00`). The JSON rendering stores the rounded
//! value of every cell, so text and JSON carry the same numbers.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use trio_core::dataset::Split;
use trio_core::metrics::TauMeasurement;
use trio_core::{MetricsReport, Stat};

use crate::error::{CliError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DECIMALS: usize = 5;
pub const SCIENTIFIC_THRESHOLD: f64 = 1e4;

const METRIC_ORDER: [&str; 13] = [
    "loss",
    "tau_seconds",
    "tceocs_t",
    "mse_t",
    "r2_mean_t",
    "r2_std_t",
    "tceocs_i",
    "mse_i",
    "r2_mean_i",
    "r2_std_i",
    "mse_rt",
    "r2_mean_rt",
    "r2_std_rt",
];

/// Output of `trio evaluate`: one encoder's metrics on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub schema_version: u32,
    pub encoder: String,
    pub split: Split,
    pub observations: usize,
    pub metrics: MetricsReport,
}

/// Output of `trio bench-timing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub schema_version: u32,
    pub encoder: String,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub batches: usize,
    pub last_batch: usize,
    pub repeats: usize,
    pub tau_seconds: f64,
    pub pass_seconds: f64,
}

impl TimingRecord {
    pub fn new(encoder: &str, dataset_size: usize, batch_size: usize, m: &TauMeasurement) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            encoder: encoder.to_string(),
            dataset_size,
            batch_size,
            batches: m.batches.len(),
            last_batch: m.batches.last().copied().unwrap_or(0),
            repeats: m.repeats,
            tau_seconds: m.tau_seconds,
            pass_seconds: m.pass_seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Notation {
    Decimal,
    Scientific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub encoder: String,
    pub split: Split,
    pub observations: usize,
}

/// One rendered cell; `value` is `text` read back as a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub text: String,
    pub value: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub higher_is_better: bool,
    pub notation: Notation,
    pub cells: Vec<Cell>,
    /// Encoder holding the single best marker.
    pub best: String,
    /// Several encoders share the best rounded value; `best` is the first by name.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub columns: Vec<ReportColumn>,
    pub rows: Vec<MetricRow>,
}

/// `d.ddEdd` with a zero-padded exponent.
pub fn format_scientific(v: f64) -> String {
    let s = format!("{v:.2E}");
    let (mantissa, exponent) = s.split_once('E').expect("LowerExp output has an exponent");
    let e: i32 = exponent.parse().expect("exponent is an integer");
    let sign = if e < 0 { "-" } else { "" };
    format!("{mantissa}E{sign}{:02}", e.abs())
}

pub fn format_value(v: f64, notation: Notation) -> String {
    match notation {
        Notation::Decimal => format!("{v:.DECIMALS$}"),
        Notation::Scientific => format_scientific(v),
    }
}

fn cell(stat: Option<Stat>, notation: Notation) -> Cell {
    match stat {
        None => Cell {
            text: "-".into(),
            value: None,
        },
        Some(Stat::Invalid) => Cell {
            text: "invalid".into(),
            value: Some(Stat::Invalid),
        },
        Some(Stat::Value(v)) => {
            let text = format_value(v, notation);
            let rounded = text.parse().expect("formatted numbers parse");
            Cell {
                text,
                value: Some(Stat::Value(rounded)),
            }
        }
    }
}

impl BenchmarkReport {
    /// Builds the table; timings attach `tau_seconds` to the column of the same encoder.
    pub fn build(records: &[EvaluationRecord], timings: &[TimingRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(CliError::Config(
                "a report needs at least one evaluation".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for r in records {
            if !names.insert(r.encoder.as_str()) {
                return Err(CliError::Config(format!(
                    "encoder {:?} has two evaluations",
                    r.encoder
                )));
            }
        }
        let mut metrics: Vec<MetricsReport> = records.iter().map(|r| r.metrics.clone()).collect();
        for t in timings {
            let i = records
                .iter()
                .position(|r| r.encoder == t.encoder)
                .ok_or_else(|| {
                    CliError::Config(format!("timing for {:?} has no evaluation", t.encoder))
                })?;
            metrics[i] = metrics[i].clone().with_tau(t.tau_seconds);
        }
        let per_column: Vec<Vec<(&'static str, Stat, bool)>> =
            metrics.iter().map(MetricsReport::rows).collect();

        let mut rows = Vec::new();
        for metric in METRIC_ORDER {
            let stats: Vec<Option<(Stat, bool)>> = per_column
                .iter()
                .map(|col| {
                    col.iter()
                        .find(|(name, _, _)| *name == metric)
                        .map(|&(_, s, h)| (s, h))
                })
                .collect();
            let Some(higher_is_better) = stats.iter().flatten().map(|&(_, h)| h).next() else {
                continue;
            };
            let largest = stats
                .iter()
                .flatten()
                .filter_map(|(s, _)| s.value())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let notation = if largest >= SCIENTIFIC_THRESHOLD {
                Notation::Scientific
            } else {
                Notation::Decimal
            };
            let cells: Vec<Cell> = stats
                .iter()
                .map(|s| cell(s.map(|(stat, _)| stat), notation))
                .collect();
            let (best, tie) = pick_best(records, &cells, higher_is_better);
            rows.push(MetricRow {
                metric: metric.to_string(),
                higher_is_better,
                notation,
                cells,
                best,
                tie,
            });
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            columns: records
                .iter()
                .map(|r| ReportColumn {
                    encoder: r.encoder.clone(),
                    split: r.split,
                    observations: r.observations,
                })
                .collect(),
            rows,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Aligned table; the best cell of each row carries a `*`.
    pub fn to_text(&self) -> String {
        let header: Vec<String> = self.columns.iter().map(|c| c.encoder.clone()).collect();
        let body: Vec<(String, Vec<String>, bool)> = self
            .rows
            .iter()
            .map(|row| {
                let cells = row
                    .cells
                    .iter()
                    .zip(&self.columns)
                    .map(|(c, col)| {
                        if col.encoder == row.best {
                            format!("{}*", c.text)
                        } else {
                            c.text.clone()
                        }
                    })
                    .collect();
                (row.metric.clone(), cells, row.tie)
            })
            .collect();
        let first = body
            .iter()
            .map(|(m, _, _)| m.len())
            .chain(["metric".len(), "observations".len()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                body.iter()
                    .map(|(_, cells, _)| cells[i].len())
                    .chain([
                        header[i].len(),
                        self.columns[i].observations.to_string().len(),
                    ])
                    .max()
                    .unwrap_or(0)
            })
            .collect();

        let mut out = String::new();
        let mut line = |label: &str, cells: &[String], note: &str| {
            let mut l = format!("{label:<first$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(l, "  {c:>w$}");
            }
            if !note.is_empty() {
                let _ = write!(l, "  {note}");
            }
            out.push_str(l.trim_end());
            out.push('\n');
        };
        line("metric", &header, "");
        let splits: Vec<String> = self.columns.iter().map(|c| c.split.to_string()).collect();
        line("split", &splits, "");
        let counts: Vec<String> = self
            .columns
            .iter()
            .map(|c| c.observations.to_string())
            .collect();
        line("observations", &counts, "");
        for (metric, cells, tie) in &body {
            line(metric, cells, if *tie { "(tie)" } else { "" });
        }
        out.push_str("* best in row; (tie): equal best values, first encoder by name marked\n");
        out
    }
}

fn pick_best(
    records: &[EvaluationRecord],
    cells: &[Cell],
    higher_is_better: bool,
) -> (String, bool) {
    let better = |a: f64, b: f64| {
        let ord = a.total_cmp(&b);
        if higher_is_better {
            ord
        } else {
            ord.reverse()
        }
    };
    let candidates: Vec<(&str, f64)> = records
        .iter()
        .zip(cells)
        .filter_map(|(r, c)| Some((r.encoder.as_str(), c.value?.value()?)))
        .collect();
    let Some(top) = candidates.iter().map(|&(_, v)| v).reduce(|a, b| {
        if better(a, b) == Ordering::Less {
            b
        } else {
            a
        }
    }) else {
        let first = records
            .iter()
            .map(|r| r.encoder.as_str())
            .min()
            .unwrap_or_default();
        return (first.to_string(), records.len() > 1);
    };
    let tied: Vec<&str> = candidates
        .iter()
        .filter(|&&(_, v)| v == top)
        .map(|&(n, _)| n)
        .collect();
    let best = tied.iter().min().expect("the top value has an owner");
    (best.to_string(), tied.len() > 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(loss: f64, mse_rt: Option<f64>) -> MetricsReport {
        let s = Stat::Value;
        MetricsReport {
            loss,
            tceocs_t: 16.47286,
            tceocs_i: 16.3,
            mse_t: s(0.0026),
            mse_i: s(0.0023),
            mse_rt: mse_rt.map(s),
            r2_mean_t: s(-1.01e10),
            r2_mean_i: s(-3.3193),
            r2_mean_rt: mse_rt.map(|_| s(-1.84e16)),
            r2_std_t: s(3.57e10),
            r2_std_i: s(6.7023),
            r2_std_rt: mse_rt.map(|_| Stat::Invalid),
            r2_excluded_t: 0,
            r2_excluded_i: 0,
            r2_excluded_rt: mse_rt.map(|_| 0),
            tau_seconds: None,
        }
    }

    fn record(name: &str, m: MetricsReport) -> EvaluationRecord {
        EvaluationRecord {
            schema_version: REPORT_SCHEMA_VERSION,
            encoder: name.into(),
            split: Split::Test,
            observations: 16,
            metrics: m,
        }
    }

    #[test]
    fn scientific_format_matches_table_style() {
        assert_eq!(format_scientific(63_512.0), "6.35E04");
        assert_eq!(format_scientific(3.1482), "3.15E00");
        assert_eq!(format_scientific(-1.01e10), "-1.01E10");
        assert_eq!(format_scientific(0.00261), "2.61E-03");
        assert_eq!("6.35E04".parse::<f64>().unwrap(), 63_500.0);
        assert_eq!(format_value(5.459051, Notation::Decimal), "5.45905");
    }

    #[test]
    fn whole_row_switches_notation() {
        let report = BenchmarkReport::build(
            &[
                record("a", metrics(5.45905, Some(63_512.0))),
                record("b", metrics(5.48628, Some(3.1482))),
            ],
            &[],
        )
        .unwrap();
        let row = |m: &str| report.rows.iter().find(|r| r.metric == m).unwrap();
        let texts: Vec<&str> = row("mse_rt")
            .cells
            .iter()
            .map(|c| c.text.as_str())
            .collect();
        assert_eq!(texts, ["6.35E04", "3.15E00"]);
        assert_eq!(row("loss").notation, Notation::Decimal);
        assert_eq!(row("loss").best, "a");
        assert_eq!(row("r2_std_rt").cells[0].text, "invalid");
    }

    #[test]
    fn ties_pick_first_name_and_are_flagged() {
        let report = BenchmarkReport::build(
            &[
                record("zeta", metrics(1.0, None)),
                record("alpha", metrics(1.0, None)),
            ],
            &[],
        )
        .unwrap();
        for row in &report.rows {
            assert_eq!(row.best, "alpha");
            assert!(row.tie);
        }
        let text = report.to_text();
        assert!(text
            .lines()
            .any(|l| l.starts_with("loss") && l.ends_with("(tie)")));
    }

    #[test]
    fn rejects_duplicate_and_orphan_columns() {
        let a = record("a", metrics(1.0, None));
        assert!(BenchmarkReport::build(&[a.clone(), a.clone()], &[]).is_err());
        let orphan = TimingRecord {
            schema_version: 1,
            encoder: "b".into(),
            dataset_size: 1,
            batch_size: 1,
            batches: 1,
            last_batch: 1,
            repeats: 1,
            tau_seconds: 0.1,
            pass_seconds: 0.1,
        };
        assert!(BenchmarkReport::build(&[a], &[orphan]).is_err());
    }
}
