use ndarray::{Array1, Array2};

use crate::error::{invalid, Result};

use super::{check_pair, feature_cost, TransportPlan, WeightedFeatureSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    /// entropic regularization strength
    pub eps: f64,
    pub max_iters: usize,
    /// stop once the L1 row-marginal error falls below this
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            eps: 1e-2,
            max_iters: 100_000,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    /// transport cost `Σ d_ij π_ij`, without the entropy term
    pub cost: f64,
    pub plan: TransportPlan,
    pub iters: usize,
    pub converged: bool,
    /// L1 distance between plan marginals and the input weights
    pub marginal_error: f64,
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport by alternating dual updates in the log domain.
///
/// Weights are normalized to unit mass. Running out of iterations is not an
/// error; the result carries `converged = false`.
pub fn sinkhorn(
    a: &WeightedFeatureSet,
    b: &WeightedFeatureSet,
    opts: &SinkhornOptions,
) -> Result<SinkhornResult> {
    check_pair(a, b)?;
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(invalid(format!("eps must be positive, got {}", opts.eps)));
    }
    let s = a.normalized_weights()?;
    let t = b.normalized_weights()?;
    if s.iter().chain(t.iter()).any(|&w| w <= 0.0) {
        return Err(invalid("sinkhorn needs strictly positive weights"));
    }
    let cost = feature_cost(a.features().view(), b.features().view())?;
    let (n, m) = cost.dim();
    let eps = opts.eps;
    let log_s = s.mapv(f64::ln);
    let log_t = t.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);

    let row_error = |f: &Array1<f64>, g: &Array1<f64>, eps: f64| -> f64 {
        (0..n)
            .map(|i| {
                let mass: f64 = (0..m).map(|j| ((f[i] + g[j] - cost[[i, j]]) / eps).exp()).sum();
                (mass - s[i]).abs()
            })
            .sum()
    };

    // Halve eps from the cost scale down to the target, warm-starting the
    // potentials; coarse stages only need a loose fit.
    let c_max = cost.iter().fold(0.0f64, |a, &c| a.max(c));
    let mut stages = vec![eps];
    while stages.last().unwrap() * 2.0 < c_max {
        let next = stages.last().unwrap() * 2.0;
        stages.push(next);
    }
    stages.reverse();

    let mut iters = 0;
    let mut err = f64::INFINITY;
    for (k, &e) in stages.iter().enumerate() {
        let stage_tol = if k + 1 == stages.len() { opts.tol } else { opts.tol.max(1e-3) };
        while iters < opts.max_iters {
            for i in 0..n {
                f[i] = e * (log_s[i] - logsumexp((0..m).map(|j| (g[j] - cost[[i, j]]) / e)));
            }
            for j in 0..m {
                g[j] = e * (log_t[j] - logsumexp((0..n).map(|i| (f[i] - cost[[i, j]]) / e)));
            }
            iters += 1;
            // columns are exact after the g update; only rows can be off
            err = row_error(&f, &g, e);
            if err < stage_tol {
                break;
            }
        }
    }
    let flow = Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / eps).exp());
    let col_err: f64 = flow
        .sum_axis(ndarray::Axis(0))
        .iter()
        .zip(t.iter())
        .map(|(x, y)| (x - y).abs())
        .sum();
    let total: f64 = (&flow * &cost).sum();
    Ok(SinkhornResult {
        cost: total,
        plan: TransportPlan {
            flow,
            total_cost: total,
        },
        iters,
        converged: err < opts.tol,
        marginal_error: err + col_err,
    })
}
