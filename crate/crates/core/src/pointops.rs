//! Deterministic spatial operators on point sets.
//!
//! All operators are brute force and break ties toward the lowest index, so
//! each one is a pure function of its arguments.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};

/// Guard added to squared distances in inverse-distance interpolation.
pub const INTERP_EPS: f64 = 1e-8;

/// Default neighbor count for interpolation-based upsampling.
pub const DEFAULT_K_INTERP: usize = 3;

/// Positions of `N` points in 3-space with an optional per-point feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Array2<f64>,
    features: Option<Array2<f64>>,
}

impl PointCloud {
    pub fn new(positions: Array2<f64>, features: Option<Array2<f64>>) -> Result<Self> {
        check_positions("positions", positions.view())?;
        if let Some(f) = &features {
            if f.nrows() != positions.nrows() {
                return Err(shape(format!(
                    "feature rows {} != point count {}",
                    f.nrows(),
                    positions.nrows()
                )));
            }
        }
        Ok(Self {
            positions,
            features,
        })
    }

    pub fn from_positions(positions: Array2<f64>) -> Result<Self> {
        Self::new(positions, None)
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.nrows() == 0
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    /// Feature width, zero when the cloud carries positions only.
    pub fn feature_dim(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.ncols())
    }

    /// Sub-cloud made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: gather_rows(self.positions.view(), indices),
            features: self
                .features
                .as_ref()
                .map(|f| gather_rows(f.view(), indices)),
        }
    }
}

/// For each query row, `k` reference indices sorted by ascending distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub indices: Array2<usize>,
    pub distances: Array2<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.indices.ncols()
    }

    pub fn n_query(&self) -> usize {
        self.indices.nrows()
    }
}

/// Row-wise sparse linear combination: output row `i` is
/// `sum_j weight[i, j] * source[index[i, j]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub index: Array2<usize>,
    pub weight: Array2<f64>,
}

impl Stencil {
    pub fn apply(&self, source: ArrayView2<f64>) -> Array2<f64> {
        let (n, k) = self.index.dim();
        let mut out = Array2::zeros((n, source.ncols()));
        for i in 0..n {
            let mut row = out.row_mut(i);
            for j in 0..k {
                row.scaled_add(self.weight[[i, j]], &source.row(self.index[[i, j]]));
            }
        }
        out
    }
}

fn check_positions(name: &str, p: ArrayView2<f64>) -> Result<()> {
    if p.ncols() != 3 {
        return Err(shape(format!("{name} must have 3 columns, got {}", p.ncols())));
    }
    if p.nrows() == 0 {
        return Err(invalid(format!("{name} is empty")));
    }
    Ok(())
}

#[inline]
fn sq_dist(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    let dx = a[[i, 0]] - b[[j, 0]];
    let dy = a[[i, 1]] - b[[j, 1]];
    let dz = a[[i, 2]] - b[[j, 2]];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn gather_rows(src: ArrayView2<f64>, indices: &[usize]) -> Array2<f64> {
    src.select(Axis(0), indices)
}

/// Euclidean distance between every row of `a` and every row of `b`.
pub fn pairwise_dist(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_positions("a", a)?;
    check_positions("b", b)?;
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        sq_dist(a, i, b, j).sqrt()
    }))
}

/// Index of the seeded random starting point used by [`fps`].
pub fn fps_start(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..n)
}

/// Farthest point sampling.
///
/// The first index is drawn uniformly from `seed`; each later pick maximizes
/// the minimum distance to the points selected so far.
pub fn fps(positions: ArrayView2<f64>, m: usize, seed: u64) -> Result<Vec<usize>> {
    check_positions("cloud", positions)?;
    let n = positions.nrows();
    if m == 0 || m > n {
        return Err(invalid(format!("fps sample count {m} outside 1..={n}")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = fps_start(n, seed);
    selected.push(current);
    while selected.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (j, md) in min_d.iter_mut().enumerate() {
            let d = sq_dist(positions, current, positions, j);
            if d < *md {
                *md = d;
            }
            // strict comparison keeps the lowest index on ties
            if *md > best_d {
                best_d = *md;
                best = j;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// `k` nearest reference points for every query point.
pub fn knn(query: ArrayView2<f64>, reference: ArrayView2<f64>, k: usize) -> Result<NeighborIndex> {
    check_positions("query", query)?;
    check_positions("reference", reference)?;
    let n_ref = reference.nrows();
    if k == 0 || k > n_ref {
        return Err(invalid(format!("knn k={k} outside 1..={n_ref}")));
    }
    let nq = query.nrows();
    let mut indices = Array2::zeros((nq, k));
    let mut distances = Array2::zeros((nq, k));
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n_ref);
    for i in 0..nq {
        order.clear();
        order.extend((0..n_ref).map(|j| (sq_dist(query, i, reference, j), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n_ref {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        for (c, &(d, j)) in order.iter().take(k).enumerate() {
            indices[[i, c]] = j;
            distances[[i, c]] = d.sqrt();
        }
    }
    Ok(NeighborIndex { indices, distances })
}

/// Inverse-squared-distance interpolation stencil from `pos_coarse` onto
/// `pos_fine`. `k_interp` is clamped to the number of coarse points.
pub fn interp_stencil(
    pos_coarse: ArrayView2<f64>,
    pos_fine: ArrayView2<f64>,
    k_interp: usize,
) -> Result<Stencil> {
    check_positions("coarse positions", pos_coarse)?;
    let k = k_interp.min(pos_coarse.nrows());
    let nn = knn(pos_fine, pos_coarse, k)?;
    let mut weight = nn.distances.mapv(|d| 1.0 / (d * d + INTERP_EPS));
    for mut row in weight.rows_mut() {
        let total: f64 = row.sum();
        row /= total;
    }
    Ok(Stencil {
        index: nn.indices,
        weight,
    })
}

/// Upsample coarse features onto fine positions by inverse-squared-distance
/// weighting over the `k_interp` nearest coarse points.
pub fn interp_upsample(
    feat_coarse: ArrayView2<f64>,
    pos_coarse: ArrayView2<f64>,
    pos_fine: ArrayView2<f64>,
    k_interp: usize,
) -> Result<Array2<f64>> {
    if feat_coarse.nrows() != pos_coarse.nrows() {
        return Err(shape(format!(
            "coarse features have {} rows, positions {}",
            feat_coarse.nrows(),
            pos_coarse.nrows()
        )));
    }
    if k_interp == 0 {
        return Err(invalid("k_interp must be positive"));
    }
    Ok(interp_stencil(pos_coarse, pos_fine, k_interp)?.apply(feat_coarse))
}

/// For each coarse position, the index of the nearest fine position.
pub fn nn_indices(pos_fine: ArrayView2<f64>, pos_coarse: ArrayView2<f64>) -> Result<Vec<usize>> {
    if pos_fine.nrows() == 0 {
        return Err(invalid("empty fine set"));
    }
    let nn = knn(pos_coarse, pos_fine, 1)?;
    Ok(nn.indices.column(0).to_vec())
}

/// Nearest-neighbor gather of fine features at coarse positions.
pub fn nn_downsample(
    feat_fine: ArrayView2<f64>,
    pos_fine: ArrayView2<f64>,
    pos_coarse: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if feat_fine.nrows() != pos_fine.nrows() {
        return Err(shape(format!(
            "fine features have {} rows, positions {}",
            feat_fine.nrows(),
            pos_fine.nrows()
        )));
    }
    let idx = nn_indices(pos_fine, pos_coarse)?;
    Ok(gather_rows(feat_fine, &idx))
}

/// Repeat a single global feature row `n` times.
pub fn repeat_global(feat: ArrayView2<f64>, n: usize) -> Result<Array2<f64>> {
    if feat.nrows() != 1 {
        return Err(shape(format!("global feature must be 1 row, got {}", feat.nrows())));
    }
    if n == 0 {
        return Err(invalid("repeat count must be positive"));
    }
    Ok(gather_rows(feat, &vec![0; n]))
}

/// Mean position, as a 1×3 matrix.
pub fn centroid(positions: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_positions("positions", positions)?;
    let mean: Array1<f64> = positions.mean_axis(Axis(0)).expect("nonempty");
    Ok(mean.insert_axis(Axis(0)))
}

/// Minimum pairwise Euclidean distance among the given rows.
pub fn min_pairwise_distance(positions: ArrayView2<f64>, indices: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            best = best.min(sq_dist(positions, i, positions, j));
        }
    }
    best.sqrt()
}
