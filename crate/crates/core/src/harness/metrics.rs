//! Classification metrics.

use ndarray::Array2;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// overall accuracy, percent
    pub oa: f64,
    /// mean per-class accuracy over classes present in the labels, percent
    pub macc: f64,
    /// rows: true class, columns: predicted class
    pub confusion: Array2<usize>,
    /// classes with no labelled sample, left out of `macc`
    pub absent: Vec<usize>,
}

pub fn metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(invalid("no samples"));
    }
    let mut confusion = Array2::zeros((num_classes, num_classes));
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(invalid(format!("class index out of range ({y} → {p})")));
        }
        confusion[[y, p]] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[[c, c]]).sum();
    let oa = 100.0 * correct as f64 / labels.len() as f64;
    let mut absent = Vec::new();
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let total: usize = confusion.row(c).sum();
        if total == 0 {
            absent.push(c);
        } else {
            per_class.push(confusion[[c, c]] as f64 / total as f64);
        }
    }
    let macc = 100.0 * per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(Metrics {
        oa,
        macc,
        confusion,
        absent,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
