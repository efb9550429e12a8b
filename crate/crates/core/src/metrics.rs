//! Accuracy, quadratic weighted kappa, and their average.

use crate::error::{Error, Result};

/// `C x C` counts, rows are true classes and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    n: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            n: 0,
        })
    }

    /// Builds from a row-major table of counts.
    pub fn from_counts(rows: &[&[u64]]) -> Result<Self> {
        let classes = rows.len();
        let mut cm = Self::new(classes)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::LengthMismatch(row.len(), classes));
            }
            for (j, &v) in row.iter().enumerate() {
                cm.counts[i * classes + j] = v;
                cm.n += v;
            }
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for label in [truth, pred] {
            if label >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        self.n += 1;
        Ok(())
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::LengthMismatch(self.classes, other.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.n += other.n;
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.classes)
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch(truth.len(), pred.len()));
    }
    let mut cm = ConfusionMatrix::new(classes)?;
    for (&t, &p) in truth.iter().zip(pred) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.n == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty confusion matrix"));
    }
    let trace: u64 = (0..cm.classes).map(|i| cm.get(i, i)).sum();
    Ok(trace as f64 / cm.n as f64)
}

/// Quadratic weighted kappa: `1 - sum(W*O) / sum(W*E)` with
/// `W_ij = (i-j)^2 / (C-1)^2` and `E_ij = row_i * col_j / n`.
pub fn qwk(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.n == 0 {
        return Err(Error::UndefinedMetric("kappa of an empty confusion matrix"));
    }
    let c = cm.classes;
    let n = cm.n as f64;
    let rows: Vec<f64> = (0..c).map(|i| (0..c).map(|j| cm.get(i, j)).sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..c).map(|j| (0..c).map(|i| cm.get(i, j)).sum::<u64>() as f64).collect();
    let denom_w = ((c - 1) * (c - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64) - (j as f64)).powi(2) / denom_w;
            observed += w * cm.get(i, j) as f64;
            expected += w * rows[i] * cols[j] / n;
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedMetric("kappa with degenerate marginals"));
    }
    Ok(1.0 - observed / expected)
}

pub fn avg_metric(acc: f64, qwk: f64) -> f64 {
    0.5 * (acc + qwk)
}

/// ACC, QWK and AVG of one confusion matrix; QWK is `None` when undefined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub acc: f64,
    pub qwk: Option<f64>,
}

impl Scores {
    pub fn of(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Scores {
            acc: accuracy(cm)?,
            qwk: qwk(cm).ok(),
        })
    }

    pub fn avg(&self) -> Option<f64> {
        self.qwk.map(|q| avg_metric(self.acc, q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts() {
        let cm = confusion(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_counts(&[&[1, 0], &[0, 1]]).unwrap());
        let cm = confusion(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_counts(&[&[0, 2], &[2, 0]]).unwrap());
        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.n(), 0);
        assert!(empty.rows().all(|r| r.iter().all(|&v| v == 0)));
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(confusion(&[0], &[2], 2), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
        assert!(matches!(confusion(&[0, 1], &[0], 2), Err(Error::LengthMismatch(2, 1))));
    }

    #[test]
    fn accuracy_cases() {
        let id = ConfusionMatrix::from_counts(&[&[3, 0], &[0, 2]]).unwrap();
        assert_eq!(accuracy(&id).unwrap(), 1.0);
        let anti = ConfusionMatrix::from_counts(&[&[0, 2], &[2, 0]]).unwrap();
        assert_eq!(accuracy(&anti).unwrap(), 0.0);
        let half = ConfusionMatrix::from_counts(&[&[1, 1], &[1, 1]]).unwrap();
        assert_eq!(accuracy(&half).unwrap(), 0.5);
        assert!(accuracy(&ConfusionMatrix::new(2).unwrap()).is_err());
    }

    #[test]
    fn kappa_cases() {
        let diag = ConfusionMatrix::from_counts(&[&[2, 0, 0], &[0, 1, 0], &[0, 0, 4]]).unwrap();
        assert!((qwk(&diag).unwrap() - 1.0).abs() < 1e-9);
        let chance = ConfusionMatrix::from_counts(&[&[1, 1], &[1, 1]]).unwrap();
        assert!(qwk(&chance).unwrap().abs() < 1e-9);
        let opposite = ConfusionMatrix::from_counts(&[&[0, 2], &[2, 0]]).unwrap();
        assert!((qwk(&opposite).unwrap() + 1.0).abs() < 1e-9);
        let degenerate = ConfusionMatrix::from_counts(&[&[5, 0], &[0, 0]]).unwrap();
        assert!(matches!(qwk(&degenerate), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn average() {
        assert_eq!(avg_metric(1.0, 1.0), 1.0);
        assert_eq!(avg_metric(0.5, 0.0), 0.25);
        assert!((avg_metric(0.539, 0.601) - 0.570).abs() < 1e-12);
    }
}
