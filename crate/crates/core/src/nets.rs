//! Toy hierarchical point encoders.
//!
//! Each level samples centroids with FPS, groups the nearest input points
//! around every centroid, runs one shared `linear + relu` over
//! `(neighbor feature ⊕ relative position)` and max-pools each group. A
//! single-point final level pools the whole previous level around its
//! centroid. A two-layer head maps the global feature to class logits.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bkr::LevelFeature;
use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::pointops::{centroid, fps, knn, PointCloud};
use crate::seed;

/// Shape and seeding of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// centroids per level; the last may be 1 (global level)
    pub points_per_level: Vec<usize>,
    /// unscaled (teacher) feature width per level
    pub dims_per_level: Vec<usize>,
    pub knn_group: usize,
    pub width_scale: f64,
    pub num_classes: usize,
    /// unscaled hidden width of the classifier head
    pub head_hidden: usize,
    pub init_seed: u64,
    pub fps_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            points_per_level: vec![64, 16, 1],
            dims_per_level: vec![32, 64, 128],
            knn_group: 8,
            width_scale: 1.0,
            num_classes: 4,
            head_hidden: 64,
            init_seed: 0,
            fps_seed: 0,
        }
    }
}

pub fn scaled_dim(d: usize, scale: f64) -> usize {
    ((d as f64 * scale).round() as usize).max(1)
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.points_per_level.len()
    }

    /// Actual per-level widths after scaling.
    pub fn dims(&self) -> Vec<usize> {
        self.dims_per_level
            .iter()
            .map(|&d| scaled_dim(d, self.width_scale))
            .collect()
    }

    pub fn hidden(&self) -> usize {
        scaled_dim(self.head_hidden, self.width_scale)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || self.dims_per_level.len() != l {
            return Err(Error::Config(format!(
                "{} point counts vs {} dims",
                l,
                self.dims_per_level.len()
            )));
        }
        if self.points_per_level.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("points per level must strictly decrease".into()));
        }
        if self.points_per_level.contains(&0) || self.dims_per_level.contains(&0) {
            return Err(Error::Config("zero-sized level".into()));
        }
        if self.knn_group == 0 {
            return Err(Error::Config("knn_group must be positive".into()));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::Config(format!("bad width scale {}", self.width_scale)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Scalar parameter count implied by the config.
    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        let mut d_in = 3;
        let mut total = 0;
        for &d in &dims {
            total += (d_in + 3) * d + d;
            d_in = d;
        }
        let h = self.hidden();
        total + d_in * h + h + h * self.num_classes + self.num_classes
    }
}

/// Per-level features and class logits of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub levels: Vec<LevelFeature>,
    pub logits: Var,
}

/// An encoder's configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
}

fn level_names(l: usize) -> (String, String) {
    (format!("enc.{l}.w"), format!("enc.{l}.b"))
}

impl Encoder {
    /// Fresh parameters: He-style N(0, 2/fan_in) weights, zero biases.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ParamStore::new();
        let mut d_in = 3;
        for (l, &d) in cfg.dims().iter().enumerate() {
            let (w, b) = level_names(l + 1);
            let fan_in = d_in + 3;
            params.insert_normal(w, fan_in, d, (2.0 / fan_in as f64).sqrt(), &mut rng)?;
            params.insert_zeros(b, 1, d)?;
            d_in = d;
        }
        let h = cfg.hidden();
        params.insert_normal("head.0.w", d_in, h, (2.0 / d_in as f64).sqrt(), &mut rng)?;
        params.insert_zeros("head.0.b", 1, h)?;
        params.insert_normal("head.1.w", h, cfg.num_classes, (1.0 / h as f64).sqrt(), &mut rng)?;
        params.insert_zeros("head.1.b", 1, cfg.num_classes)?;
        Ok(Self { cfg, params })
    }

    pub fn with_params(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let fresh = Self::new(cfg.clone())?;
        for name in fresh.params.names() {
            let want = fresh.params.value(name).unwrap().dim();
            match params.value(name) {
                Some(v) if v.dim() == want => {}
                Some(v) => {
                    return Err(Error::Shape(format!("`{name}` is {:?}, expected {want:?}", v.dim())))
                }
                None => return Err(Error::Config(format!("checkpoint lacks `{name}`"))),
            }
        }
        Ok(Self { cfg, params })
    }

    /// FPS seed for one level of one sample.
    pub fn level_seed(&self, sample_key: u64, level: usize) -> u64 {
        seed::derive(&[self.cfg.fps_seed, sample_key, level as u64])
    }

    /// Run the encoder on a cloud. With `frozen`, parameters enter the graph
    /// as constants and receive no gradient.
    pub fn forward(
        &self,
        g: &mut Graph,
        cloud: &PointCloud,
        sample_key: u64,
        frozen: bool,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        if cloud.len() < cfg.points_per_level[0] {
            return Err(invalid(format!(
                "cloud has {} points, first level needs {}",
                cloud.len(),
                cfg.points_per_level[0]
            )));
        }
        let load = |g: &mut Graph, name: &str| {
            if frozen {
                g.frozen_param(&self.params, name)
            } else {
                g.param(&self.params, name)
            }
        };
        let mut positions = cloud.positions().clone();
        let mut features = g.constant(positions.clone());
        let mut levels = Vec::with_capacity(cfg.levels());
        for (l, &n_out) in cfg.points_per_level.iter().enumerate() {
            let (wn, bn) = level_names(l + 1);
            let w = load(g, &wn)?;
            let b = load(g, &bn)?;
            let lf = sa_level(
                g,
                &positions,
                features,
                n_out,
                cfg.knn_group,
                (w, b),
                l + 1,
                self.level_seed(sample_key, l + 1),
            )?;
            positions = lf.positions.clone();
            features = lf.features;
            levels.push(lf);
        }
        let global = g.reduce_max_rows(features)?;
        let (w0, b0) = (load(g, "head.0.w")?, load(g, "head.0.b")?);
        let h = g.linear(global, w0, b0)?;
        let h = g.relu(h);
        let (w1, b1) = (load(g, "head.1.w")?, load(g, "head.1.b")?);
        let logits = g.linear(h, w1, b1)?;
        Ok(ForwardTrace { levels, logits })
    }
}

/// One set-abstraction level.
///
/// With `n_out == 1` the level is global: its single centroid is the mean
/// input position and its group is the whole input.
#[allow(clippy::too_many_arguments)]
pub fn sa_level(
    g: &mut Graph,
    positions: &Array2<f64>,
    features: Var,
    n_out: usize,
    knn_group: usize,
    weights: (Var, Var),
    level: usize,
    fps_seed: u64,
) -> Result<LevelFeature> {
    let n_in = positions.nrows();
    if n_out == 0 || n_out > n_in {
        return Err(Error::Config(format!("level {level}: {n_out} centroids from {n_in} points")));
    }
    let is_global = n_out == 1;
    let (centers, groups): (Array2<f64>, Vec<usize>) = if is_global {
        (centroid(positions.view())?, (0..n_in).collect())
    } else {
        let idx = fps(positions.view(), n_out, fps_seed)?;
        let centers = positions.select(Axis(0), &idx);
        let k = knn_group.min(n_in);
        let nn = knn(centers.view(), positions.view(), k)?;
        (centers, nn.indices.iter().copied().collect())
    };
    let group = groups.len() / n_out;
    let mut rel = positions.select(Axis(0), &groups);
    for (r, mut row) in rel.rows_mut().into_iter().enumerate() {
        row -= &centers.row(r / group);
    }
    let grouped = g.gather_rows(features, &groups)?;
    let rel = g.constant(rel);
    let input = g.concat_cols(grouped, rel)?;
    let h = g.linear(input, weights.0, weights.1)?;
    let h = g.relu(h);
    let pooled = g.segment_max(h, group)?;
    Ok(LevelFeature {
        level,
        positions: centers,
        features: pooled,
        is_global,
    })
}

/// Teacher (width 1) and student (width `student_scale`) encoders sharing
/// level structure but with independent init and FPS seeds.
pub fn teacher_student_pair(
    base: &EncoderConfig,
    student_scale: f64,
    teacher_seeds: (u64, u64),
    student_seeds: (u64, u64),
) -> Result<(Encoder, Encoder)> {
    let teacher = EncoderConfig {
        width_scale: 1.0,
        init_seed: teacher_seeds.0,
        fps_seed: teacher_seeds.1,
        ..base.clone()
    };
    let student = EncoderConfig {
        width_scale: student_scale,
        init_seed: student_seeds.0,
        fps_seed: student_seeds.1,
        ..base.clone()
    };
    Ok((Encoder::new(teacher)?, Encoder::new(student)?))
}
