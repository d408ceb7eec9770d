//! Optimal-transport distances between weighted feature sets.
//!
//! Ground distance for the solvers in this module ([`emd_bruteforce`],
//! [`emd_assignment`], [`sinkhorn`], [`remd`]) is Euclidean distance in
//! feature space. The FMD plan in [`fmd`] instead measures distance between
//! point positions; the two are kept as separate arguments.

mod assignment;
mod baselines;
mod emd;
pub mod fmd;
mod sinkhorn;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{invalid, shape, Result};

pub use assignment::min_cost_assignment;
pub use baselines::{fl2_loss, remd_loss};
pub use emd::{emd_assignment, emd_bruteforce, remd, BRUTE_FORCE_LIMIT};
pub use fmd::{adaptive_tau, apc_weights, fmd_loss, fmd_plan, FmdOptions, KnnPlan, TauMode};
pub use sinkhorn::{sinkhorn, SinkhornOptions, SinkhornResult};

/// Feature rows paired with nonnegative masses.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFeatureSet {
    features: Array2<f64>,
    weights: Array1<f64>,
}

impl WeightedFeatureSet {
    pub fn new(features: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if features.nrows() != weights.len() {
            return Err(shape(format!(
                "{} feature rows but {} weights",
                features.nrows(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        Ok(Self { features, weights })
    }

    /// Equal mass `1/N` on every row.
    pub fn uniform(features: Array2<f64>) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(invalid("empty feature set"));
        }
        Self::new(features, Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    /// Weights scaled to unit total mass.
    pub fn normalized_weights(&self) -> Result<Array1<f64>> {
        let total = self.weights.sum();
        if total <= 0.0 {
            return Err(invalid("weights sum to zero"));
        }
        Ok(&self.weights / total)
    }

    pub(crate) fn is_uniform(&self) -> bool {
        let first = self.weights[0];
        self.weights
            .iter()
            .all(|w| (w - first).abs() <= 1e-12 * first.abs().max(1.0))
            && first > 0.0
    }
}

/// Dense nonnegative flow between a source and a target set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub flow: Array2<f64>,
    pub total_cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.flow.sum_axis(ndarray::Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.flow.sum_axis(ndarray::Axis(0))
    }
}

/// Euclidean distance between rows of two feature matrices.
pub fn feature_cost(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(shape(format!("feature dims {} vs {}", a.ncols(), b.ncols())));
    }
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }))
}

fn check_pair(a: &WeightedFeatureSet, b: &WeightedFeatureSet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("empty feature set"));
    }
    if a.dim() != b.dim() {
        return Err(shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}
