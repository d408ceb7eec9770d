//! Feature mover's distance.
//!
//! Every student point is matched against its `k` nearest teacher points in
//! position space. A normalized Gaussian kernel over those distances gives a
//! local transport plan, the plan-weighted teacher features form a
//! barycenter, and the loss sums the residual norms weighted by each
//! student feature's clamped correlation with the mean teacher feature.

use ndarray::{Array2, ArrayView2, Axis};

use crate::diffcore::{Graph, Var};
use crate::error::{invalid, shape, Result};
use crate::pointops::{knn, NeighborIndex, Stencil};

/// Kernel temperature selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMode {
    /// mean of the kNN distances of the plan being built
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmdOptions {
    pub k: usize,
    pub tau: TauMode,
    /// divide the correlation weights by their sum
    pub normalize_apc: bool,
}

impl Default for FmdOptions {
    fn default() -> Self {
        Self {
            k: 5,
            tau: TauMode::Adaptive,
            normalize_apc: false,
        }
    }
}

/// Sparse plan with exactly `k` entries per student row.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnPlan {
    pub stencil: Stencil,
    /// position-space distance of each stored entry
    pub distances: Array2<f64>,
    pub tau: f64,
    pub n_target: usize,
}

impl KnnPlan {
    pub fn k(&self) -> usize {
        self.stencil.index.ncols()
    }

    pub fn row_sums(&self) -> ndarray::Array1<f64> {
        self.stencil.weight.sum_axis(Axis(1))
    }

    /// Dense N×N_t flow matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.stencil.index.nrows(), self.n_target));
        for ((i, c), &j) in self.stencil.index.indexed_iter() {
            dense[[i, j]] += self.stencil.weight[[i, c]];
        }
        dense
    }

    /// Plan-weighted teacher barycenter for every student row.
    pub fn barycenters(&self, teacher: ArrayView2<f64>) -> Array2<f64> {
        self.stencil.apply(teacher)
    }
}

/// Mean of all neighbor distances, falling back to 1 when they all vanish.
pub fn adaptive_tau(nn: &NeighborIndex) -> f64 {
    let mean = nn.distances.mean().unwrap_or(0.0);
    if mean > 1e-12 {
        mean
    } else {
        1.0
    }
}

/// Distance-based local transport plan from student to teacher positions.
///
/// Row `i` is supported on the `k` teacher points nearest to student point
/// `i`, with weights `exp(-d²/2τ²)` normalized over that neighborhood.
pub fn fmd_plan(
    pos_s: ArrayView2<f64>,
    pos_t: ArrayView2<f64>,
    k: usize,
    tau: TauMode,
) -> Result<KnnPlan> {
    let nn = knn(pos_s, pos_t, k)?;
    let tau = match tau {
        TauMode::Adaptive => adaptive_tau(&nn),
        TauMode::Fixed(t) => t,
    };
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let denom = 2.0 * tau * tau;
    let mut weight = Array2::zeros(nn.distances.dim());
    for (mut w_row, d_row) in weight.rows_mut().into_iter().zip(nn.distances.rows()) {
        // distances are sorted, so d_row[0] is the minimum; shifting by it keeps exp() in range
        let d0 = d_row[0] * d_row[0];
        for (w, d) in w_row.iter_mut().zip(d_row) {
            *w = (-(d * d - d0) / denom).exp();
        }
        let total: f64 = w_row.sum();
        w_row /= total;
    }
    Ok(KnnPlan {
        stencil: Stencil {
            index: nn.indices,
            weight,
        },
        distances: nn.distances,
        tau,
        n_target: pos_t.nrows(),
    })
}

/// Per-point correlation weights `max(0, <F_r^i, mean_j F_t^j>)`, as an N×1 node.
pub fn apc_weights(g: &mut Graph, f_r: Var, f_t: &Array2<f64>) -> Result<Var> {
    let d = g.shape(f_r).1;
    if f_t.ncols() != d {
        return Err(shape(format!("student dim {d} vs teacher dim {}", f_t.ncols())));
    }
    if f_t.nrows() == 0 {
        return Err(invalid("empty teacher feature set"));
    }
    let mean = f_t.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(1));
    let w = g.constant(mean);
    let b = g.constant(Array2::zeros((1, 1)));
    let corr = g.linear(f_r, w, b)?;
    Ok(g.relu(corr))
}

/// FMD loss of reconfigured student features against constant teacher features.
pub fn fmd_loss(
    g: &mut Graph,
    f_r: Var,
    pos_s: ArrayView2<f64>,
    f_t: &Array2<f64>,
    pos_t: ArrayView2<f64>,
    opts: &FmdOptions,
) -> Result<Var> {
    let (n, d) = g.shape(f_r);
    if pos_s.nrows() != n {
        return Err(shape(format!("{n} student features but {} positions", pos_s.nrows())));
    }
    if f_t.nrows() != pos_t.nrows() {
        return Err(shape(format!(
            "{} teacher features but {} positions",
            f_t.nrows(),
            pos_t.nrows()
        )));
    }
    if f_t.ncols() != d {
        return Err(shape(format!("student dim {d} vs teacher dim {}", f_t.ncols())));
    }
    let plan = fmd_plan(pos_s, pos_t, opts.k, opts.tau)?;
    let bary = g.constant(plan.barycenters(f_t.view()));
    let resid = g.sub(f_r, bary)?;
    let norms = g.row_norm(resid);
    let mut s = apc_weights(g, f_r, f_t)?;
    if opts.normalize_apc {
        let total = g.sum(s);
        s = g.div_scalar(s, total)?;
    }
    let weighted = g.hadamard(s, norms)?;
    Ok(g.sum(weighted))
}
