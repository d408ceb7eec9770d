//! FPS position-inconsistency study and OT solver benchmark.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::harness::config::Pairing;
use crate::ot::{
    emd_assignment, emd_bruteforce, remd, sinkhorn, SinkhornOptions, WeightedFeatureSet, BRUTE_FORCE_LIMIT,
};
use crate::pointops::{fps, knn, PointCloud};
use crate::seed::derive;

/// Distances between the points two FPS runs select from one cloud.
///
/// With [`Pairing::Order`] the i-th teacher pick is paired with the i-th
/// student pick; with [`Pairing::Nearest`] each teacher pick is paired with
/// the closest student pick.
pub fn pair_distances(
    cloud: &PointCloud,
    m: usize,
    teacher_seed: u64,
    student_seed: u64,
    pairing: Pairing,
) -> Result<Vec<f64>> {
    let pos = cloud.positions().view();
    let t = fps(pos, m, teacher_seed)?;
    let s = fps(pos, m, student_seed)?;
    let dist = |i: usize, j: usize| {
        let d = &pos.row(i) - &pos.row(j);
        d.dot(&d).sqrt()
    };
    Ok(match pairing {
        Pairing::Order => t.iter().zip(&s).map(|(&i, &j)| dist(i, j)).collect(),
        Pairing::Nearest => {
            let tp = pos.select(ndarray::Axis(0), &t);
            let sp = pos.select(ndarray::Axis(0), &s);
            knn(tp.view(), sp.view(), 1)?.distances.column(0).to_vec()
        }
    })
}

/// Normalized distance histogram over [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub frequencies: Vec<f64>,
    pub pairs: usize,
    /// fraction of pairs with distance strictly above 1
    pub above_one: f64,
    pub clouds_used: usize,
    pub clouds_skipped: usize,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        2.0 / self.frequencies.len() as f64
    }
}

pub fn histogram(distances: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    if distances.is_empty() {
        return Err(invalid("no distances to bin"));
    }
    let mut counts = vec![0usize; bins];
    for &d in distances {
        let b = ((d / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = distances.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Pair distances over many clouds. Clouds with fewer than `m` points are
/// skipped and counted.
pub fn inconsistency_hist(
    clouds: &[PointCloud],
    m: usize,
    bins: usize,
    teacher_seed: u64,
    student_seed: u64,
    pairing: Pairing,
) -> Result<Histogram> {
    let mut all = Vec::new();
    let mut skipped = 0;
    for (c, cloud) in clouds.iter().enumerate() {
        if cloud.len() < m {
            skipped += 1;
            continue;
        }
        // per-cloud seeds so that different clouds start from unrelated points
        let ts = derive(&[teacher_seed, c as u64]);
        let ss = derive(&[student_seed, c as u64]);
        all.extend(pair_distances(cloud, m, ts, ss, pairing)?);
    }
    let frequencies = histogram(&all, bins)?;
    let above = all.iter().filter(|&&d| d > 1.0).count();
    Ok(Histogram {
        frequencies,
        pairs: all.len(),
        above_one: above as f64 / all.len() as f64,
        clouds_used: clouds.len() - skipped,
        clouds_skipped: skipped,
    })
}

/// `bin_lo,bin_hi,frequency,control_frequency`; the control is the same
/// study with both roles sharing the teacher seed.
pub fn write_hist_csv<W: Write>(w: W, hist: &Histogram, control: &Histogram) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_lo", "bin_hi", "frequency", "control_frequency"])?;
    let width = hist.bin_width();
    for (b, (f, c)) in hist.frequencies.iter().zip(&control.frequencies).enumerate() {
        out.write_record([
            (b as f64 * width).to_string(),
            ((b + 1) as f64 * width).to_string(),
            f.to_string(),
            c.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_hist_summary_csv<W: Write>(w: W, hist: &Histogram, control: &Histogram) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "pairs",
        "clouds_used",
        "clouds_skipped",
        "fraction_above_1",
        "control_fraction_at_0",
    ])?;
    out.write_record([
        hist.pairs.to_string(),
        hist.clouds_used.to_string(),
        hist.clouds_skipped.to_string(),
        hist.above_one.to_string(),
        control.frequencies[0].to_string(),
    ])?;
    out.flush()?;
    Ok(())
}

/// One solver result on one benchmark instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub instance_id: usize,
    pub n: usize,
    pub d: usize,
    pub method: String,
    pub cost: f64,
    /// `cost − exact EMD`
    pub gap: f64,
    pub iters: Option<usize>,
    pub converged: bool,
    pub wall_time_us: f64,
}

/// Uniform random feature sets in [0, 1)^d.
pub fn random_instance(n: usize, d: usize, seed: u64) -> Result<(WeightedFeatureSet, WeightedFeatureSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Array2::from_shape_simple_fn((n, d), || rng.random_range(0.0..1.0));
    let a = draw();
    let b = draw();
    Ok((WeightedFeatureSet::uniform(a)?, WeightedFeatureSet::uniform(b)?))
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t0 = Instant::now();
    let v = f()?;
    Ok((v, t0.elapsed().as_secs_f64() * 1e6))
}

/// Every solver on `repeats` random instances per size and dimension.
pub fn ot_bench(sizes: &[usize], dims: &[usize], repeats: usize, eps_grid: &[f64], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut id = 0;
    for &n in sizes {
        for &d in dims {
            for _ in 0..repeats {
                let (a, b) = random_instance(n, d, derive(&[seed, id as u64]))?;
                let ((exact, _), t_exact) = timed(|| emd_assignment(&a, &b))?;
                let mut push = |method: String, cost: f64, iters, converged, us| {
                    rows.push(BenchRow {
                        instance_id: id,
                        n,
                        d,
                        method,
                        cost,
                        gap: cost - exact,
                        iters,
                        converged,
                        wall_time_us: us,
                    })
                };
                if n <= BRUTE_FORCE_LIMIT {
                    let (bf, t) = timed(|| emd_bruteforce(&a, &b))?;
                    push("emd_bruteforce".into(), bf, None, true, t);
                }
                push("emd_assignment".into(), exact, None, true, t_exact);
                for &eps in eps_grid {
                    let opts = SinkhornOptions {
                        eps,
                        ..Default::default()
                    };
                    let (r, t) = timed(|| sinkhorn(&a, &b, &opts))?;
                    push(format!("sinkhorn_eps={eps}"), r.cost, Some(r.iters), r.converged, t);
                }
                let (r, t) = timed(|| remd(&a, &b))?;
                push("remd".into(), r, None, true, t);
                id += 1;
            }
        }
    }
    Ok(rows)
}

/// Bench rows as CSV. `wall_time_us` is left empty unless `timing` is set.
pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow], timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["instance_id", "n", "d", "method", "cost", "gap", "iters", "converged", "wall_time_us"])?;
    for r in rows {
        out.write_record([
            r.instance_id.to_string(),
            r.n.to_string(),
            r.d.to_string(),
            r.method.clone(),
            r.cost.to_string(),
            r.gap.to_string(),
            r.iters.map(|i| i.to_string()).unwrap_or_default(),
            r.converged.to_string(),
            if timing { format!("{:.1}", r.wall_time_us) } else { String::new() },
        ])?;
    }
    out.flush()?;
    Ok(())
}
