use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matching::{ClassScores, EvalConfig};
use super::stats::{aggregate_runs, RunSummary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub scores: ClassScores,
    /// Per-category and average intervals, present when several runs exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<RunIntervals>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunIntervals {
    pub per_category: Vec<Option<RunSummary>>,
    pub average: RunSummary,
}

/// Intervals over several runs' scores. A category is summarized only when
/// every run scored it.
pub fn run_intervals(runs: &[ClassScores]) -> Result<RunIntervals> {
    let average = aggregate_runs(&runs.iter().map(|r| r.average_f1).collect::<Vec<_>>())?;
    let cats = runs.iter().map(|r| r.per_category.len()).max().unwrap_or(0);
    let per_category = (0..cats)
        .map(|c| {
            let v: Option<Vec<f64>> = runs.iter().map(|r| r.per_category.get(c).and_then(|s| s.f1)).collect();
            v.map(|v| aggregate_runs(&v)).transpose()
        })
        .collect::<Result<_>>()?;
    Ok(RunIntervals { per_category, average })
}

/// One row per method: per-category F1 then the average, in percent.
pub fn f1_table_csv(rows: &[(String, ClassScores)], categories: usize) -> String {
    let mut s = String::from("method");
    for c in 0..categories {
        let _ = write!(s, ",f1_c{c}");
    }
    s.push_str(",f1_avg\n");
    for (name, scores) in rows {
        s.push_str(name);
        for c in 0..categories {
            match scores.per_category.get(c).and_then(|x| x.f1) {
                Some(f) => {
                    let _ = write!(s, ",{:.4}", 100.0 * f);
                }
                None => s.push(','),
            }
        }
        let _ = writeln!(s, ",{:.4}", 100.0 * scores.average_f1);
    }
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::matching::{f1_from_counts, CategoryCounts, EmptyCategory};

    #[test]
    fn table_has_one_row_per_method() {
        let s = f1_from_counts(
            &[CategoryCounts { tp: 1, fp: 0, fn_: 0 }, CategoryCounts::default()],
            EmptyCategory::Exclude,
        );
        let csv = f1_table_csv(&[("a".into(), s.clone()), ("b".into(), s)], 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,f1_c0,f1_c1,f1_avg");
        assert_eq!(lines[1], "a,100.0000,,100.0000");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn intervals_skip_partially_scored_categories() {
        let a = f1_from_counts(&[CategoryCounts { tp: 1, fp: 1, fn_: 0 }, CategoryCounts::default()], EmptyCategory::Exclude);
        let b = f1_from_counts(&[CategoryCounts { tp: 1, fp: 0, fn_: 0 }, CategoryCounts { tp: 1, fp: 0, fn_: 0 }], EmptyCategory::Exclude);
        let r = run_intervals(&[a, b]).unwrap();
        assert!(r.per_category[0].is_some());
        assert!(r.per_category[1].is_none());
    }
}
