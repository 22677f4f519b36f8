//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut m = Self::new(classes);
        for (t, p) in pairs {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || pred >= c {
            return Err(Error::shape(format!("pair ({truth}, {pred}) out of range for {c} classes")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Correct / total; 0 for an empty matrix.
    pub fn micro(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        correct as f64 / total as f64
    }

    /// Recall of each class, `None` for classes with no samples.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    /// Mean per-class accuracy over the classes present.
    pub fn macro_acc(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<F: PartialOrd + Copy>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imbalanced_example() {
        let pairs = (0..90).map(|_| (0, 0)).chain((0..10).map(|_| (1, 0)));
        let m = ConfusionMatrix::from_pairs(2, pairs).unwrap();
        assert_eq!(m.micro(), 0.9);
        assert_eq!(m.macro_acc(), 0.5);
        assert_eq!(m.support(), vec![90, 10]);
    }

    #[test]
    fn perfect_predictions() {
        let m = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 1), (2, 2), (2, 2)]).unwrap();
        assert_eq!(m.micro(), 1.0);
        assert_eq!(m.macro_acc(), 1.0);
        assert_eq!(m.rows(), &[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn absent_classes_do_not_count() {
        let m = ConfusionMatrix::from_pairs(3, [(0, 0), (0, 1)]).unwrap();
        assert_eq!(m.per_class(), vec![Some(0.5), None, None]);
        assert_eq!(m.macro_acc(), 0.5);
        assert!(ConfusionMatrix::new(2).add(2, 0).is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0f32]), 0);
    }
}
