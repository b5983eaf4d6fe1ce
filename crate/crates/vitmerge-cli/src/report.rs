//! Result aggregation.
//!
//! Every evaluation writes one row per artifact; the report command folds
//! all rows from all seeds into a per-seed table and a seed-mean summary,
//! rendered both as JSON and as plain text. Nothing here reads the clock,
//! so equal inputs produce byte-identical reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task_id: usize,
    pub samples: usize,
    /// Fraction correct in [0, 1].
    pub accuracy: f64,
}

/// One evaluated artifact under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Method name as used on the command line; "individual" for the
    /// unmerged fine-tuned models, with "-scratch" appended for the
    /// independent-initialization lane.
    pub method: String,
    /// Gated-block count; absent for static merges and individual models.
    #[serde(default)]
    pub m: Option<usize>,
    pub seed: u64,
    pub per_task: Vec<TaskAccuracy>,
    /// Unweighted mean of the per-task accuracies.
    pub avg_accuracy: f64,
    /// Fraction of evaluation inputs routed to their own task's model;
    /// only gated merges have one.
    #[serde(default)]
    pub selection_accuracy: Option<f64>,
    pub params: usize,
    pub flops: u64,
}

/// Seed-mean of one (method, m) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    #[serde(default)]
    pub m: Option<usize>,
    pub seeds: Vec<u64>,
    pub per_task_mean: Vec<TaskAccuracy>,
    pub avg_accuracy: f64,
    #[serde(default)]
    pub selection_accuracy: Option<f64>,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<SummaryRow>,
}

/// Fixed display order: individual models first, then static merges, then
/// gated merges, scratch lanes after their shared-base counterparts.
fn method_rank(method: &str) -> (u8, &str) {
    match method {
        "individual" => (0, method),
        "individual-scratch" => (1, method),
        "base" => (2, method),
        "avgmean" => (3, method),
        "avgmean-scratch" => (4, method),
        "taskarith" => (5, method),
        "regmean" => (6, method),
        "regmean-scratch" => (7, method),
        "gated-avgmean" => (8, method),
        "gated-regmean" => (9, method),
        other => (100, other),
    }
}

fn sort_rows(rows: &mut [EvalRow]) {
    rows.sort_by(|a, b| {
        method_rank(&a.method)
            .cmp(&method_rank(&b.method))
            .then(a.m.cmp(&b.m))
            .then(a.seed.cmp(&b.seed))
    });
}

/// Builds the report from unsorted evaluation rows.
pub fn build(mut rows: Vec<EvalRow>) -> Result<Report> {
    sort_rows(&mut rows);
    let mut groups: BTreeMap<(u8, String, Option<usize>), Vec<&EvalRow>> = BTreeMap::new();
    for row in &rows {
        let (rank, _) = method_rank(&row.method);
        groups.entry((rank, row.method.clone(), row.m)).or_default().push(row);
    }
    let mut summary = Vec::with_capacity(groups.len());
    for ((_, method, m), group) in groups {
        let seeds: Vec<u64> = group.iter().map(|r| r.seed).collect();
        let params = group[0].params;
        let flops = group[0].flops;
        for r in &group {
            if r.params != params || r.flops != flops {
                return Err(Error::Config(format!(
                    "rows for {method} disagree on params or flops across seeds"
                )));
            }
            if r.per_task.len() != group[0].per_task.len() {
                return Err(Error::Config(format!(
                    "rows for {method} disagree on the task roster across seeds"
                )));
            }
        }
        let n = group.len() as f64;
        let per_task_mean: Vec<TaskAccuracy> = (0..group[0].per_task.len())
            .map(|i| TaskAccuracy {
                task_id: group[0].per_task[i].task_id,
                samples: group[0].per_task[i].samples,
                accuracy: group.iter().map(|r| r.per_task[i].accuracy).sum::<f64>() / n,
            })
            .collect();
        let avg_accuracy = group.iter().map(|r| r.avg_accuracy).sum::<f64>() / n;
        let selection_accuracy = if group.iter().all(|r| r.selection_accuracy.is_some()) {
            Some(group.iter().map(|r| r.selection_accuracy.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        summary.push(SummaryRow {
            method,
            m,
            seeds,
            per_task_mean,
            avg_accuracy,
            selection_accuracy,
            params,
            flops,
        });
    }
    Ok(Report { rows, summary })
}

fn fmt_m(m: Option<usize>) -> String {
    m.map(|v| v.to_string()).unwrap_or_else(|| "-".to_string())
}

fn fmt_pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn fmt_opt_pct(v: Option<f64>) -> String {
    v.map(fmt_pct).unwrap_or_else(|| "-".to_string())
}

fn render_table(header: Vec<String>, body: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String]| {
        let line: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:>w$}", c, w = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    emit(&mut out, &header);
    for row in &body {
        emit(&mut out, row);
    }
    out
}

/// Plain-text rendering: one per-seed table and one seed-mean table.
/// Accuracies are percentages.
pub fn render_text(report: &Report) -> String {
    let task_ids: Vec<usize> = report
        .rows
        .first()
        .map(|r| r.per_task.iter().map(|t| t.task_id).collect())
        .unwrap_or_default();
    let mut header = vec!["method".to_string(), "m".to_string(), "seed".to_string()];
    header.extend(task_ids.iter().map(|id| format!("task{id}")));
    header.extend(["avg".to_string(), "sel".to_string(), "params".to_string(), "flops".to_string()]);

    let body: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.method.clone(), fmt_m(r.m), r.seed.to_string()];
            for id in &task_ids {
                let cell = r
                    .per_task
                    .iter()
                    .find(|t| t.task_id == *id)
                    .map(|t| fmt_pct(t.accuracy))
                    .unwrap_or_else(|| "-".to_string());
                row.push(cell);
            }
            row.push(fmt_pct(r.avg_accuracy));
            row.push(fmt_opt_pct(r.selection_accuracy));
            row.push(r.params.to_string());
            row.push(r.flops.to_string());
            row
        })
        .collect();

    let mut header2 = vec!["method".to_string(), "m".to_string(), "seeds".to_string()];
    header2.extend(task_ids.iter().map(|id| format!("task{id}")));
    header2.extend(["avg".to_string(), "sel".to_string(), "params".to_string(), "flops".to_string()]);
    let body2: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|r| {
            let seeds =
                r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
            let mut row = vec![r.method.clone(), fmt_m(r.m), seeds];
            for id in &task_ids {
                let cell = r
                    .per_task_mean
                    .iter()
                    .find(|t| t.task_id == *id)
                    .map(|t| fmt_pct(t.accuracy))
                    .unwrap_or_else(|| "-".to_string());
                row.push(cell);
            }
            row.push(fmt_pct(r.avg_accuracy));
            row.push(fmt_opt_pct(r.selection_accuracy));
            row.push(r.params.to_string());
            row.push(r.flops.to_string());
            row
        })
        .collect();

    format!(
        "per-seed results (accuracy %)\n{}\nseed means (accuracy %)\n{}",
        render_table(header, body),
        render_table(header2, body2)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, m: Option<usize>, seed: u64, accs: &[f64]) -> EvalRow {
        let per_task: Vec<TaskAccuracy> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| TaskAccuracy { task_id: i + 1, samples: 96, accuracy: a })
            .collect();
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        EvalRow {
            method: method.to_string(),
            m,
            seed,
            per_task,
            avg_accuracy: avg,
            selection_accuracy: None,
            params: 52_099,
            flops: 1_835_712,
        }
    }

    #[test]
    fn rows_sort_by_method_then_m_then_seed() {
        let rows = vec![
            row("regmean", None, 12, &[0.9, 0.9]),
            row("gated-regmean", Some(2), 11, &[0.95, 0.95]),
            row("individual", None, 11, &[0.99, 0.98]),
            row("gated-regmean", Some(0), 11, &[0.93, 0.93]),
            row("regmean", None, 11, &[0.91, 0.9]),
        ];
        let report = build(rows).unwrap();
        let order: Vec<(String, Option<usize>, u64)> =
            report.rows.iter().map(|r| (r.method.clone(), r.m, r.seed)).collect();
        assert_eq!(
            order,
            vec![
                ("individual".to_string(), None, 11),
                ("regmean".to_string(), None, 11),
                ("regmean".to_string(), None, 12),
                ("gated-regmean".to_string(), Some(0), 11),
                ("gated-regmean".to_string(), Some(2), 11),
            ]
        );
    }

    #[test]
    fn summary_means_accuracies_over_seeds() {
        let rows = vec![
            row("regmean", None, 11, &[0.90, 0.80]),
            row("regmean", None, 12, &[0.70, 0.60]),
        ];
        let report = build(rows).unwrap();
        assert_eq!(report.summary.len(), 1);
        let s = &report.summary[0];
        assert_eq!(s.seeds, vec![11, 12]);
        assert!((s.per_task_mean[0].accuracy - 0.80).abs() < 1e-12);
        assert!((s.per_task_mean[1].accuracy - 0.70).abs() < 1e-12);
        assert!((s.avg_accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn text_rendering_lists_every_expected_column() {
        let report = build(vec![row("individual", None, 11, &[0.99, 0.98])]).unwrap();
        let text = render_text(&report);
        for needle in ["method", "m", "seed", "task1", "task2", "avg", "sel", "params", "flops"] {
            assert!(text.contains(needle), "missing column {needle}:\n{text}");
        }
        assert!(text.contains("99.00"), "{text}");
        assert!(text.contains("52099"), "{text}");
    }

    #[test]
    fn mismatched_params_across_seeds_are_rejected() {
        let mut a = row("regmean", None, 11, &[0.9]);
        let b = row("regmean", None, 12, &[0.9]);
        a.params += 1;
        assert!(build(vec![a, b]).is_err());
    }
}
