use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    rows: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            rows: vec![vec![0; classes]; classes],
        }
    }

    /// Builds a matrix from explicit rows; they must form a square.
    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        Ok(Self { rows })
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.rows
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.rows[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.rows[i][i]).sum()
    }

    /// Overall accuracy, `trace / total`.
    pub fn wa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("accuracy of an empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Mean per-class recall. Every class needs at least one sample.
    pub fn ua(&self) -> Result<f64> {
        let mut sum = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n == 0 {
                return Err(Error::Data(format!(
                    "unweighted accuracy undefined: class {i} has no samples"
                )));
            }
            sum += row[i] as f64 / n as f64;
        }
        Ok(sum / self.classes() as f64)
    }
}

/// Weighted and unweighted accuracy of a confusion matrix.
pub fn wa_ua(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    Ok((cm.wa()?, cm.ua()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imbalanced_example() {
        let cm = ConfusionMatrix::from_rows(vec![vec![10, 0], vec![5, 5]]).unwrap();
        assert_eq!(wa_ua(&cm).unwrap(), (0.75, 0.75));
    }

    #[test]
    fn perfect_and_symmetric() {
        let cm = ConfusionMatrix::from_rows(vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(wa_ua(&cm).unwrap(), (1.0, 1.0));
        let cm = ConfusionMatrix::from_rows(vec![vec![8, 2], vec![2, 8]]).unwrap();
        assert_eq!(wa_ua(&cm).unwrap(), (0.8, 0.8));
    }

    #[test]
    fn empty_row_has_no_ua() {
        let cm = ConfusionMatrix::from_rows(vec![vec![1, 0], vec![0, 0]]).unwrap();
        assert_eq!(cm.wa().unwrap(), 1.0);
        assert!(cm.ua().is_err());
        assert!(ConfusionMatrix::from_rows(vec![vec![1, 2]]).is_err());
    }
}
