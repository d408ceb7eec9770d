use itertools::Itertools;
use ndarray::Array2;

use crate::error::{Error, Result};

use super::{check_pair, feature_cost, min_cost_assignment, TransportPlan, WeightedFeatureSet};

/// Largest set size accepted by [`emd_bruteforce`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

fn check_uniform_square(a: &WeightedFeatureSet, b: &WeightedFeatureSet) -> Result<()> {
    check_pair(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Unsupported(format!(
            "exact EMD needs equal cardinalities, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !a.is_uniform() || !b.is_uniform() {
        return Err(Error::Unsupported("exact EMD needs uniform weights".into()));
    }
    Ok(())
}

/// Exact EMD for uniform, equal-size sets by enumerating every permutation.
pub fn emd_bruteforce(a: &WeightedFeatureSet, b: &WeightedFeatureSet) -> Result<f64> {
    if a.len() > BRUTE_FORCE_LIMIT || b.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::Size(format!(
            "brute force limited to {BRUTE_FORCE_LIMIT} points"
        )));
    }
    check_uniform_square(a, b)?;
    let n = a.len();
    let cost = feature_cost(a.features().view(), b.features().view())?;
    let best = (0..n)
        .permutations(n)
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best / n as f64)
}

/// Exact EMD for uniform, equal-size sets via min-cost assignment.
///
/// With uniform marginals an optimal flow is a scaled permutation matrix, so
/// the transport LP reduces to an assignment problem.
pub fn emd_assignment(
    a: &WeightedFeatureSet,
    b: &WeightedFeatureSet,
) -> Result<(f64, TransportPlan)> {
    check_uniform_square(a, b)?;
    let n = a.len();
    let cost = feature_cost(a.features().view(), b.features().view())?;
    let (assign, total) = min_cost_assignment(cost.view())?;
    let mass = 1.0 / n as f64;
    let mut flow = Array2::zeros((n, n));
    for (i, &j) in assign.iter().enumerate() {
        flow[[i, j]] = mass;
    }
    let emd = total * mass;
    Ok((
        emd,
        TransportPlan {
            flow,
            total_cost: emd,
        },
    ))
}

/// Relaxed EMD: the larger of the two one-sided relaxations, each of which
/// keeps only one marginal constraint and is solved by sending every unit of
/// mass to its nearest counterpart.
pub fn remd(a: &WeightedFeatureSet, b: &WeightedFeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let s = a.normalized_weights()?;
    let t = b.normalized_weights()?;
    let cost = feature_cost(a.features().view(), b.features().view())?;
    let source_side: f64 = cost
        .rows()
        .into_iter()
        .zip(s.iter())
        .map(|(row, w)| w * row.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum();
    let target_side: f64 = cost
        .columns()
        .into_iter()
        .zip(t.iter())
        .map(|(col, w)| w * col.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum();
    Ok(source_side.max(target_side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn set(rows: Array2<f64>) -> WeightedFeatureSet {
        WeightedFeatureSet::uniform(rows).unwrap()
    }

    #[test]
    fn bruteforce_examples() {
        let a = set(array![[0.0], [1.0]]);
        let b = set(array![[0.1], [0.9]]);
        assert!((emd_bruteforce(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(emd_bruteforce(&a, &a).unwrap(), 0.0);
        let p = set(array![[0.0, 0.0]]);
        let q = set(array![[3.0, 4.0]]);
        assert_eq!(emd_bruteforce(&p, &q).unwrap(), 5.0);
    }

    #[test]
    fn bruteforce_limits() {
        let big = set(Array2::zeros((9, 1)));
        assert!(matches!(emd_bruteforce(&big, &big), Err(Error::Size(_))));
        let a = WeightedFeatureSet::new(array![[0.0], [1.0]], Array1::from(vec![0.3, 0.7])).unwrap();
        assert!(matches!(emd_bruteforce(&a, &a), Err(Error::Unsupported(_))));
    }

    #[test]
    fn assignment_identity_plan() {
        let a = set(array![[0.0, 1.0], [2.0, 0.5], [-1.0, 3.0]]);
        let (cost, plan) = emd_assignment(&a, &a).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(plan.flow, Array2::eye(3) / 3.0);
    }

    #[test]
    fn assignment_homogeneous() {
        let a = set(array![[0.0, 1.0], [2.0, 0.5], [-1.0, 3.0]]);
        let b = set(array![[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]);
        let (c1, _) = emd_assignment(&a, &b).unwrap();
        let (c2, _) = emd_assignment(&set(a.features() * 2.5), &set(b.features() * 2.5)).unwrap();
        assert!((c2 - 2.5 * c1).abs() < 1e-12);
    }

    #[test]
    fn assignment_rejects_unequal() {
        let a = set(array![[0.0], [1.0]]);
        let b = set(array![[0.0]]);
        assert!(matches!(emd_assignment(&a, &b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn remd_examples() {
        let a = set(array![[0.0], [1.0]]);
        let b = set(array![[0.1], [0.9]]);
        assert!((remd(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(remd(&a, &a).unwrap(), 0.0);
    }
}
