//! Accuracy matrix, average accuracy and average forgetting.

use crate::batch::Batch;
use crate::error::{OclError, Result};
use crate::network::Network;
use crate::tricks::PrototypeTable;

/// Lower-triangular `a[i][j]`: accuracy on task `j` after training through
/// task `i` (both 0-based here, `j <= i`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the next row; it must hold one entry per task seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if row.len() != i + 1 {
            return Err(OclError::IncompleteRow(i + 1));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(OclError::InvalidConfig(format!(
                "row {} has an accuracy outside [0, 1]",
                i + 1
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }
}

/// `A_i`, the mean of row `i` (1-based).
pub fn average_accuracy(m: &AccuracyMatrix, i: usize) -> Result<f64> {
    if i == 0 || i > m.num_tasks() {
        return Err(OclError::IncompleteRow(i));
    }
    let row = &m.rows[i - 1];
    Ok(row.iter().sum::<f64>() / i as f64)
}

/// `F_i` (1-based, `i >= 2`): mean over earlier tasks of the drop from their
/// best earlier accuracy to their accuracy after task `i`.
pub fn average_forgetting(m: &AccuracyMatrix, i: usize) -> Result<f64> {
    if i < 2 {
        return Err(OclError::TooFewTasks(i));
    }
    if i > m.num_tasks() {
        return Err(OclError::IncompleteRow(i));
    }
    let total: f64 = (0..i - 1)
        .map(|j| {
            let best = (j..i - 1)
                .map(|l| m.rows[l][j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - m.rows[i - 1][j]
        })
        .sum();
    Ok(total / (i - 1) as f64)
}

/// How a trained model labels test examples.
#[derive(Clone, Copy, Debug)]
pub enum Classifier<'a> {
    Argmax(&'a Network<f64>),
    NearestMean(&'a Network<f64>, &'a PrototypeTable<f64>),
}

impl Classifier<'_> {
    pub fn predict(&self, batch: &Batch<f64>) -> Result<Vec<usize>> {
        match self {
            Classifier::Argmax(net) => net.predict(&batch.x),
            Classifier::NearestMean(net, table) => table.predict(&net.features(&batch.x)?),
        }
    }
}

/// Accuracy on the test split of every task `0..upto`.
pub fn evaluate_task_accuracies(
    clf: &Classifier<'_>,
    tests: &[Batch<f64>],
    upto: usize,
) -> Result<Vec<f64>> {
    (0..upto)
        .map(|j| {
            let split = tests
                .get(j)
                .filter(|b| !b.is_empty())
                .ok_or(OclError::MissingSplit(j))?;
            let pred = clf.predict(split)?;
            let correct = pred.iter().zip(&split.y).filter(|(p, y)| p == y).count();
            Ok(correct as f64 / split.len() as f64)
        })
        .collect()
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
