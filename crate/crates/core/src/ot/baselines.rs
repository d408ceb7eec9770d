//! Differentiable baseline distillation losses.

use ndarray::Array2;

use crate::diffcore::{Graph, Var};
use crate::error::{invalid, shape, Result};

use super::feature_cost;

/// Index-aligned feature regression: mean over rows of
/// `‖adapter(F_s)_i − F_t^i‖²`.
///
/// Rows are compared by index, so any reordering or misplacement of the
/// teacher points changes the value.
pub fn fl2_loss(g: &mut Graph, f_s: Var, f_t: &Array2<f64>, adapter: (Var, Var)) -> Result<Var> {
    let n = g.shape(f_s).0;
    if f_t.nrows() != n {
        return Err(shape(format!("{n} student rows vs {} teacher rows", f_t.nrows())));
    }
    let projected = g.linear(f_s, adapter.0, adapter.1)?;
    let target = g.constant(f_t.clone());
    let diff = g.sub(projected, target)?;
    let sq = g.hadamard(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Relaxed EMD between student features (uniform weights) and constant
/// teacher features (uniform weights), differentiable in the student side.
///
/// The nearest-neighbor assignments and the larger of the two relaxations
/// are fixed in the forward pass; the gradient is that of the selected branch.
pub fn remd_loss(g: &mut Graph, f_r: Var, f_t: &Array2<f64>) -> Result<Var> {
    let (n, d) = g.shape(f_r);
    if n == 0 || f_t.nrows() == 0 {
        return Err(invalid("empty feature set"));
    }
    if f_t.ncols() != d {
        return Err(shape(format!("student dim {d} vs teacher dim {}", f_t.ncols())));
    }
    let cost = feature_cost(g.value(f_r).view(), f_t.view())?;
    let argmin = |it: ndarray::ArrayView1<f64>| {
        it.iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
    };
    let (src_pick, src_cost): (Vec<usize>, f64) = cost
        .rows()
        .into_iter()
        .map(|r| argmin(r))
        .fold((Vec::new(), 0.0), |(mut v, s), (j, c)| {
            v.push(j);
            (v, s + c)
        });
    let (tgt_pick, tgt_cost): (Vec<usize>, f64) = cost
        .columns()
        .into_iter()
        .map(|c| argmin(c))
        .fold((Vec::new(), 0.0), |(mut v, s), (i, c)| {
            v.push(i);
            (v, s + c)
        });
    let m = f_t.nrows();
    if src_cost / n as f64 >= tgt_cost / m as f64 {
        let nearest = g.constant(f_t.select(ndarray::Axis(0), &src_pick));
        let diff = g.sub(f_r, nearest)?;
        let norms = g.row_norm(diff);
        Ok(g.mean(norms))
    } else {
        let picked = g.gather_rows(f_r, &tgt_pick)?;
        let target = g.constant(f_t.clone());
        let diff = g.sub(picked, target)?;
        let norms = g.row_norm(diff);
        Ok(g.mean(norms))
    }
}
