//! Continual-learning metrics over accuracy matrices and task logs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ClassId;
use crate::inference::ScoreTable;
use crate::trainer::{Phase, TaskLog};

/// `a[k][j]`: accuracy on task `j`'s test set after training task `k`,
/// stored as ragged rows with `j <= k`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from ragged rows, checking shape and range.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (k, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::DimensionMismatch {
                    expected: k + 1,
                    got: row.len(),
                });
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::NonFiniteInput);
            }
        }
        Ok(Self { rows })
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len();
        if row.len() != k + 1 {
            return Err(Error::DimensionMismatch {
                expected: k + 1,
                got: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Square CSV with empty cells above the diagonal.
    pub fn to_csv(&self) -> String {
        let t = self.rows.len();
        let mut out = String::from("after_task");
        for j in 1..=t {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            out.push_str(&(k + 1).to_string());
            for j in 0..t {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&format_acc(*a));
                }
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn format_acc(a: f64) -> String {
    format!("{a:.6}")
}

/// Mean of the per-step task-agnostic accuracies.
pub fn avg_inc_accuracy(step_accuracies: &[f64]) -> Option<f64> {
    if step_accuracies.is_empty() {
        return None;
    }
    Some(step_accuracies.iter().sum::<f64>() / step_accuracies.len() as f64)
}

/// Mean drop from the best accuracy ever reached on a task to its final
/// accuracy, over all tasks but the last. The final row takes part in the
/// maximum, so the value is never negative. `None` with fewer than two tasks.
pub fn forgetting(m: &AccuracyMatrix) -> Option<f64> {
    let t = m.tasks();
    if t < 2 {
        return None;
    }
    let last = &m.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let best = (j..t).map(|l| m.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Some(total / (t - 1) as f64)
}

/// Mean gap between a jointly trained reference and the diagonal entries.
pub fn intransigence(m: &AccuracyMatrix, joint: &[f64]) -> Result<f64> {
    let t = m.tasks();
    if t == 0 || joint.len() < t {
        return Err(Error::MissingReference);
    }
    let total: f64 = (0..t).map(|k| joint[k] - m.rows[k][k]).sum();
    Ok(total / t as f64)
}

/// Per-expert accuracy on each task's test samples minus the column mean.
///
/// `table` holds scores for the concatenated test sets, `task_ranges[j]` the
/// sample range of task `j`, and `labels` the true class per sample. Each
/// expert predicts the argmax of its own log-likelihoods over the seen classes
/// it holds.
pub fn expert_relative_accuracy(
    table: &ScoreTable,
    labels: &[ClassId],
    task_ranges: &[std::ops::Range<usize>],
    candidates: &[ClassId],
) -> Vec<Vec<f64>> {
    let e = table.experts.len();
    let mut raw = vec![vec![0.0; task_ranges.len()]; e];
    for (j, range) in task_ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        for (slot, row) in raw.iter_mut().enumerate() {
            let correct = range
                .clone()
                .filter(|&i| table.predict_single(i, slot, candidates) == Some(labels[i]))
                .count();
            row[j] = correct as f64 / range.len() as f64;
        }
    }
    center_columns(&mut raw);
    raw
}

/// Subtracts each column's mean from its entries.
pub fn center_columns(m: &mut [Vec<f64>]) {
    let Some(cols) = m.first().map(Vec::len) else { return };
    let n = m.len() as f64;
    for j in 0..cols {
        let base = m[0][j];
        let mean = base + m.iter().map(|r| r[j] - base).sum::<f64>() / n;
        for r in m.iter_mut() {
            r[j] -= mean;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    /// One-based task id.
    pub task: usize,
    pub selection: bool,
    /// One-based fine-tuned experts.
    pub chosen: Vec<usize>,
    pub scores: Vec<Option<f64>>,
}

pub fn overlap_report(logs: &[TaskLog]) -> Vec<OverlapRow> {
    logs.iter()
        .map(|l| OverlapRow {
            task: l.task,
            selection: l.phase == Phase::Selection,
            chosen: l.chosen.clone(),
            scores: l.overlaps.clone(),
        })
        .collect()
}

/// CSV with one column per expert; bootstrap rows read `no selection` and
/// the chosen expert's score is starred.
pub fn overlap_csv(rows: &[OverlapRow], experts: usize) -> String {
    let mut out = String::from("task");
    for k in 1..=experts {
        out.push_str(&format!(",expert_{k}"));
    }
    out.push_str(",chosen\n");
    for r in rows {
        out.push_str(&r.task.to_string());
        for k in 0..experts {
            out.push(',');
            if !r.selection {
                out.push_str("no selection");
                continue;
            }
            match r.scores.get(k).copied().flatten() {
                Some(v) => {
                    out.push_str(&format!("{v:.6}"));
                    if r.chosen.contains(&(k + 1)) {
                        out.push('*');
                    }
                }
                None => out.push_str("n/a"),
            }
        }
        let chosen: Vec<String> = r.chosen.iter().map(usize::to_string).collect();
        out.push_str(&format!(",{}\n", chosen.join(" ")));
    }
    out
}

/// CSV of an experts×tasks matrix; `experts` are the zero-based row labels.
pub fn expert_matrix_csv(m: &[Vec<f64>], experts: &[usize], tasks: usize) -> String {
    let mut out = String::from("expert");
    for j in 1..=tasks {
        out.push_str(&format!(",task_{j}"));
    }
    out.push('\n');
    for (row, k) in m.iter().zip(experts) {
        out.push_str(&(k + 1).to_string());
        for v in row {
            out.push(',');
            out.push_str(&format!("{v:.6}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_inc_examples() {
        assert_eq!(avg_inc_accuracy(&[0.8]), Some(0.8));
        assert_eq!(avg_inc_accuracy(&[1.0, 0.5]), Some(0.75));
        assert_eq!(avg_inc_accuracy(&[]), None);
    }

    #[test]
    fn forgetting_examples() {
        let flat = AccuracyMatrix::from_rows(vec![vec![0.7], vec![0.7, 0.7], vec![0.7, 0.7, 0.7]]).unwrap();
        assert_eq!(forgetting(&flat), Some(0.0));
        let two = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.6, 0.8]]).unwrap();
        assert!((forgetting(&two).unwrap() - 0.3).abs() < 1e-15);
        let up = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.6, 0.5], vec![0.7, 0.6, 0.5]]).unwrap();
        assert_eq!(forgetting(&up), Some(0.0));
        let one = AccuracyMatrix::from_rows(vec![vec![0.5]]).unwrap();
        assert_eq!(forgetting(&one), None);
    }

    #[test]
    fn intransigence_examples() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.7], vec![0.1, 0.7]]).unwrap();
        assert!((intransigence(&m, &[0.9, 0.9]).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(intransigence(&m, &[0.7, 0.7]).unwrap(), 0.0);
        assert!(intransigence(&m, &[0.5, 0.5]).unwrap() < 0.0);
        assert!(matches!(intransigence(&m, &[0.9]), Err(Error::MissingReference)));
    }

    #[test]
    fn centering_zeroes_identical_rows() {
        let mut m = vec![vec![0.4, 0.9], vec![0.4, 0.9], vec![0.4, 0.9]];
        center_columns(&mut m);
        assert!(m.iter().flatten().all(|v| *v == 0.0));
        let mut m = vec![vec![0.1, 0.3], vec![0.7, 0.2], vec![0.35, 0.95]];
        center_columns(&mut m);
        for j in 0..2 {
            assert!(m.iter().map(|r| r[j]).sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_shape_enforced() {
        assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
        let m = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.25, 1.0]]).unwrap();
        assert_eq!(m.to_csv(), "after_task,task_1,task_2\n1,0.500000,\n2,0.250000,1.000000\n");
    }

    #[test]
    fn overlap_csv_marks_bootstrap() {
        let rows = vec![
            OverlapRow { task: 1, selection: false, chosen: vec![1], scores: vec![None, None] },
            OverlapRow { task: 3, selection: true, chosen: vec![2], scores: vec![Some(1.5), Some(2.5)] },
        ];
        let csv = overlap_csv(&rows, 2);
        assert!(csv.contains("1,no selection,no selection,1"));
        assert!(csv.contains("3,1.500000,2.500000*,2"));
    }
}
