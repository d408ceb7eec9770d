//! Bidirectional knowledge reconfiguration.
//!
//! Student features from every resolution level are remixed before being
//! compared with the teacher: a top-down pass spreads coarse context into
//! fine levels, a bottom-up pass pushes the result back up, and a residual
//! branch keeps each level's own projected feature. Every fusion is a
//! per-point two-way sigmoid gate.
//!
//! Parameter layout (per level `l`, 1-based, all under `bkr.`):
//!
//! | name              | shape          | role                                   |
//! |-------------------|----------------|----------------------------------------|
//! | `td.l.lat`        | d_s,l → d_l    | lateral projection of F_s,l            |
//! | `td.l.top`        | d_l+1 → d_l    | projection of the upsampled TD_l+1     |
//! | `td.l.gate`       | 2·d_l → 2      | top-down gate                          |
//! | `bu.l.lat`        | d_l → d_l      | projection of TD_l (BU_1 for l = 1)    |
//! | `bu.l.low`        | d_l−1 → d_l    | projection of the downsampled BU_l−1   |
//! | `bu.l.gate`       | 2·d_l → 2      | bottom-up gate                         |
//! | `adapter.l`       | d_s,l → d_l    | residual / baseline projection of F_s,l|
//!
//! Each entry is a `.w` / `.b` pair.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::pointops::{interp_stencil, nn_indices, DEFAULT_K_INTERP};

/// Features of one resolution level, bound to a graph.
#[derive(Debug, Clone)]
pub struct LevelFeature {
    /// 1-based level index
    pub level: usize,
    pub positions: Array2<f64>,
    pub features: Var,
    /// single-row level holding a pooled global vector
    pub is_global: bool,
}

/// Intermediate and final reconfigured features, one entry per level.
#[derive(Debug, Clone)]
pub struct ReconfiguredStack {
    pub td: Vec<Var>,
    pub bu: Vec<Var>,
    pub out: Vec<Var>,
}

/// Which reconfiguration stages are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub top_down: bool,
    pub bottom_up: bool,
    pub residual: bool,
}

impl Stages {
    pub const NONE: Stages = Stages {
        top_down: false,
        bottom_up: false,
        residual: false,
    };
    pub const ALL: Stages = Stages {
        top_down: true,
        bottom_up: true,
        residual: true,
    };
}

/// Distillation ablation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// index-aligned L2 on projected features
    Fl2,
    /// relaxed EMD on projected features
    Remd,
    /// FMD on projected features
    Fmd,
    TdkrFmd,
    BukrFmd,
    TdkrBukrFmd,
    BkrFmd,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Fl2,
        Mode::Remd,
        Mode::Fmd,
        Mode::TdkrFmd,
        Mode::BukrFmd,
        Mode::TdkrBukrFmd,
        Mode::BkrFmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fl2 => "fl2",
            Mode::Remd => "remd",
            Mode::Fmd => "fmd",
            Mode::TdkrFmd => "tdkr_fmd",
            Mode::BukrFmd => "bukr_fmd",
            Mode::TdkrBukrFmd => "tdkr_bukr_fmd",
            Mode::BkrFmd => "bkr_fmd",
        }
    }

    pub fn stages(self) -> Stages {
        let (top_down, bottom_up, residual) = match self {
            Mode::Fl2 | Mode::Remd | Mode::Fmd => (false, false, false),
            Mode::TdkrFmd => (true, false, false),
            Mode::BukrFmd => (false, true, false),
            Mode::TdkrBukrFmd => (true, true, false),
            Mode::BkrFmd => (true, true, true),
        };
        Stages {
            top_down,
            bottom_up,
            residual,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown mode `{s}`")))
    }
}

fn pname(group: &str, level: usize, part: &str, wb: &str) -> String {
    format!("bkr.{group}.{level}.{part}.{wb}")
}

pub fn adapter_names(level: usize) -> (String, String) {
    (format!("bkr.adapter.{level}.w"), format!("bkr.adapter.{level}.b"))
}

fn insert_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    w: String,
    b: String,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    store.insert_normal(w, d_in, d_out, std, rng)?;
    store.insert_zeros(b, 1, d_out)
}

/// Create every reconfiguration parameter for the given per-level student
/// and teacher widths. Projections use N(0, 1/fan_in); gates use N(0, 0.01²)
/// with zero bias so both gates start near 0.5.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    student_dims: &[usize],
    teacher_dims: &[usize],
    rng: &mut R,
) -> Result<()> {
    if student_dims.len() != teacher_dims.len() || student_dims.is_empty() {
        return Err(Error::Config(format!(
            "{} student levels vs {} teacher dims",
            student_dims.len(),
            teacher_dims.len()
        )));
    }
    let levels = student_dims.len();
    let proj_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    for l in 1..=levels {
        let ds = student_dims[l - 1];
        let dt = teacher_dims[l - 1];
        let lin = |store: &mut ParamStore, group: &str, part: &str, d_in, d_out, std, rng: &mut R| {
            insert_linear(store, pname(group, l, part, "w"), pname(group, l, part, "b"), d_in, d_out, std, rng)
        };
        lin(store, "td", "lat", ds, dt, proj_std(ds), rng)?;
        if l < levels {
            let up = teacher_dims[l];
            lin(store, "td", "top", up, dt, proj_std(up), rng)?;
            lin(store, "td", "gate", 2 * dt, 2, 0.01, rng)?;
        }
        lin(store, "bu", "lat", dt, dt, proj_std(dt), rng)?;
        if l > 1 {
            let low = teacher_dims[l - 2];
            lin(store, "bu", "low", low, dt, proj_std(low), rng)?;
            lin(store, "bu", "gate", 2 * dt, 2, 0.01, rng)?;
        }
        let (w, b) = adapter_names(l);
        insert_linear(store, w, b, ds, dt, proj_std(ds), rng)?;
    }
    Ok(())
}

fn linear_named(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    g.linear(x, wv, bv)
}

fn project(g: &mut Graph, store: &ParamStore, x: Var, group: &str, level: usize, part: &str) -> Result<Var> {
    linear_named(
        g,
        store,
        x,
        &pname(group, level, part, "w"),
        &pname(group, level, part, "b"),
    )
}

/// Projection of a level's student feature to the teacher width.
pub fn adapt(g: &mut Graph, store: &ParamStore, level: usize, f_s: Var) -> Result<Var> {
    let (w, b) = adapter_names(level);
    linear_named(g, store, f_s, &w, &b)
}

/// Per-point gated sum `g¹·x + g²·y`, where `(g¹, g²) = σ(concat(x, y)·W + b)`
/// and each gate is broadcast across the feature columns.
pub fn gate_fuse(g: &mut Graph, x: Var, y: Var, gate_w: Var, gate_b: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(shape(format!("gate_fuse: {:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    if g.shape(gate_w).1 != 2 {
        return Err(shape(format!("gate weights must produce 2 outputs, got {:?}", g.shape(gate_w))));
    }
    let cat = g.concat_cols(x, y)?;
    let logits = g.linear(cat, gate_w, gate_b)?;
    let w = g.sigmoid(logits);
    let g1 = g.slice_cols(w, 0, 1)?;
    let g2 = g.slice_cols(w, 1, 2)?;
    let a = g.col_broadcast_mul(g1, x)?;
    let b = g.col_broadcast_mul(g2, y)?;
    g.add(a, b)
}

fn gate_named(g: &mut Graph, store: &ParamStore, group: &str, level: usize, x: Var, y: Var) -> Result<Var> {
    let w = g.param(store, &pname(group, level, "gate", "w"))?;
    let b = g.param(store, &pname(group, level, "gate", "b"))?;
    gate_fuse(g, x, y, w, b)
}

fn check_stack(g: &Graph, levels: &[LevelFeature], teacher_dims: &[usize]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Config("no student levels".into()));
    }
    if levels.len() != teacher_dims.len() {
        return Err(Error::Config(format!(
            "{} student levels vs {} teacher dims",
            levels.len(),
            teacher_dims.len()
        )));
    }
    for (i, lf) in levels.iter().enumerate() {
        if lf.level != i + 1 {
            return Err(Error::Config(format!("level {} found at position {}", lf.level, i + 1)));
        }
        if lf.positions.nrows() != g.shape(lf.features).0 {
            return Err(shape(format!(
                "level {}: {} positions vs {} feature rows",
                lf.level,
                lf.positions.nrows(),
                g.shape(lf.features).0
            )));
        }
    }
    Ok(())
}

fn upsample(g: &mut Graph, src: Var, src_level: &LevelFeature, dst_pos: ArrayView2<f64>) -> Result<Var> {
    if src_level.is_global {
        g.gather_rows(src, &vec![0; dst_pos.nrows()])
    } else {
        let st = interp_stencil(src_level.positions.view(), dst_pos, DEFAULT_K_INTERP)?;
        g.stencil(src, &st)
    }
}

fn downsample(g: &mut Graph, src: Var, src_pos: ArrayView2<f64>, dst_level: &LevelFeature) -> Result<Var> {
    if dst_level.is_global {
        g.reduce_max_rows(src)
    } else {
        let idx = nn_indices(src_pos, dst_level.positions.view())?;
        g.gather_rows(src, &idx)
    }
}

/// Top-down pass: `TD_L` projects the top student level; every lower level
/// gates its projected student feature against the upsampled `TD_{l+1}`.
pub fn tdkr(
    g: &mut Graph,
    store: &ParamStore,
    levels: &[LevelFeature],
    teacher_dims: &[usize],
) -> Result<Vec<Var>> {
    check_stack(g, levels, teacher_dims)?;
    let top = levels.len();
    let mut td = vec![levels[top - 1].features; top];
    td[top - 1] = project(g, store, levels[top - 1].features, "td", top, "lat")?;
    for l in (1..top).rev() {
        let cur = &levels[l - 1];
        let up = upsample(g, td[l], &levels[l], cur.positions.view())?;
        let up = project(g, store, up, "td", l, "top")?;
        let lat = project(g, store, cur.features, "td", l, "lat")?;
        td[l - 1] = gate_named(g, store, "td", l, lat, up)?;
    }
    Ok(td)
}

/// Bottom-up pass over a top-down stack.
pub fn bukr(
    g: &mut Graph,
    store: &ParamStore,
    td: &[Var],
    levels: &[LevelFeature],
) -> Result<Vec<Var>> {
    if td.len() != levels.len() || td.is_empty() {
        return Err(Error::Config(format!("{} td levels vs {} positions", td.len(), levels.len())));
    }
    let mut bu = Vec::with_capacity(td.len());
    bu.push(project(g, store, td[0], "bu", 1, "lat")?);
    for l in 2..=td.len() {
        let down = downsample(g, bu[l - 2], levels[l - 2].positions.view(), &levels[l - 1])?;
        let down = project(g, store, down, "bu", l, "low")?;
        let lat = project(g, store, td[l - 1], "bu", l, "lat")?;
        bu.push(gate_named(g, store, "bu", l, lat, down)?);
    }
    Ok(bu)
}

/// Full reconfiguration with optional stages.
///
/// Disabled top-down feeds the projected student features to the bottom-up
/// pass; disabled bottom-up passes the top-down features through; the
/// residual adds the projected student feature back.
pub fn reconfigure(
    g: &mut Graph,
    store: &ParamStore,
    levels: &[LevelFeature],
    teacher_dims: &[usize],
    stages: Stages,
) -> Result<ReconfiguredStack> {
    check_stack(g, levels, teacher_dims)?;
    let mut adapted: Vec<Option<Var>> = vec![None; levels.len()];
    let mut adapted_at = |g: &mut Graph, l: usize| -> Result<Var> {
        if let Some(v) = adapted[l] {
            return Ok(v);
        }
        let v = adapt(g, store, l + 1, levels[l].features)?;
        adapted[l] = Some(v);
        Ok(v)
    };
    let td = if stages.top_down {
        tdkr(g, store, levels, teacher_dims)?
    } else {
        (0..levels.len())
            .map(|l| adapted_at(g, l))
            .collect::<Result<Vec<_>>>()?
    };
    let bu = if stages.bottom_up {
        bukr(g, store, &td, levels)?
    } else {
        td.clone()
    };
    let out = if stages.residual {
        (0..levels.len())
            .map(|l| {
                let a = adapted_at(g, l)?;
                g.add(bu[l], a)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        bu.clone()
    };
    for (l, (&o, &d)) in out.iter().zip(teacher_dims).enumerate() {
        debug_assert_eq!(g.shape(o), (levels[l].positions.nrows(), d));
    }
    Ok(ReconfiguredStack { td, bu, out })
}
