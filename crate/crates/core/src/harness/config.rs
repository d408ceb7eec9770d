//! Run configuration and its flat `key = value` file format.
//!
//! One pair per line, `#` starts a comment, keys are namespaced
//! (`distill.lambda`, `fmd.k`, ...). Unknown keys, malformed values and
//! duplicates are rejected with the offending line number. Seeds not given
//! explicitly are derived from the top-level `seed`.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::bkr::Mode;
use crate::diffcore::Optimizer;
use crate::error::{Error, Result};
use crate::harness::data::DatasetSpec;
use crate::nets::EncoderConfig;
use crate::ot::{FmdOptions, TauMode};
use crate::seed::derive;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer and fixed budget of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainSettings {
    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: self.lr },
            OptimizerKind::Adam => Optimizer::adam(self.lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub teacher_init: u64,
    pub teacher_fps: u64,
    pub student_init: u64,
    pub student_fps: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            data: derive(&[base, 1]),
            teacher_init: derive(&[base, 2]),
            teacher_fps: derive(&[base, 3]),
            student_init: derive(&[base, 4]),
            student_fps: derive(&[base, 5]),
        }
    }

    /// Student seeds of one ablation run; data and teacher seeds are kept.
    pub fn with_run_seed(self, run_seed: u64) -> Self {
        Self {
            student_init: derive(&[run_seed, 4]),
            student_fps: derive(&[run_seed, 5]),
            ..self
        }
    }
}

/// Nearest-neighbour or selection-order pairing for the FPS study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    Order,
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistConfig {
    pub clouds: usize,
    pub points: usize,
    pub sample_m: usize,
    pub bins: usize,
    pub teacher_seed: u64,
    pub student_seed: u64,
    pub pairing: Pairing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub repeats: usize,
    pub eps: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub seeds: Seeds,
    pub dataset: DatasetSpec,
    /// level structure; width scale and seeds are filled in per role
    pub encoder: EncoderConfig,
    pub student_scale: f64,
    /// student FPS reuses the teacher FPS seed
    pub share_fps: bool,
    pub teacher: TrainSettings,
    pub distill: TrainSettings,
    pub mode: Mode,
    pub lambda: f64,
    pub fmd: FmdOptions,
    pub teacher_checkpoint: Option<PathBuf>,
    pub ablate_modes: Vec<Mode>,
    pub ablate_seeds: Vec<u64>,
    pub ablate_threads: usize,
    pub hist: HistConfig,
    pub bench: BenchConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let seeds = Seeds::from_base(0);
        Self {
            seeds,
            dataset: DatasetSpec {
                seed: seeds.data,
                ..DatasetSpec::default()
            },
            encoder: EncoderConfig::default(),
            student_scale: 0.125,
            share_fps: false,
            teacher: TrainSettings {
                optimizer: OptimizerKind::Adam,
                lr: 3e-3,
                epochs: 30,
                batch_size: 8,
            },
            distill: TrainSettings {
                optimizer: OptimizerKind::Adam,
                lr: 3e-3,
                epochs: 30,
                batch_size: 8,
            },
            mode: Mode::BkrFmd,
            lambda: 0.1,
            fmd: FmdOptions::default(),
            teacher_checkpoint: None,
            ablate_modes: Mode::ALL.to_vec(),
            ablate_seeds: (0..5).collect(),
            ablate_threads: 1,
            hist: HistConfig {
                clouds: 500,
                points: 1024,
                sample_m: 512,
                bins: 20,
                teacher_seed: 1,
                student_seed: 2,
                pairing: Pairing::Order,
            },
            bench: BenchConfig {
                sizes: vec![2, 3, 4, 5, 6, 7],
                dims: vec![1, 2, 8],
                repeats: 5,
                eps: vec![1e-1, 1e-2, 1e-3],
                seed: 0,
            },
        }
    }
}

impl DistillConfig {
    /// Encoder configs of the teacher and the student of this run.
    pub fn teacher_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            width_scale: 1.0,
            init_seed: self.seeds.teacher_init,
            fps_seed: self.seeds.teacher_fps,
            ..self.encoder.clone()
        }
    }

    pub fn student_encoder(&self) -> EncoderConfig {
        EncoderConfig {
            width_scale: self.student_scale,
            init_seed: self.seeds.student_init,
            fps_seed: if self.share_fps {
                self.seeds.teacher_fps
            } else {
                self.seeds.student_fps
            },
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("distill.lambda must be ≥ 0, got {}", self.lambda));
        }
        if self.fmd.k == 0 {
            return bad("fmd.k must be ≥ 1".into());
        }
        if let TauMode::Fixed(t) = self.fmd.tau {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("fmd.tau must be positive, got {t}"));
            }
        }
        for (name, t) in [("teacher", &self.teacher), ("distill", &self.distill)] {
            if t.epochs == 0 || t.batch_size == 0 {
                return bad(format!("{name}.epochs and {name}.batch_size must be ≥ 1"));
            }
            if !(t.lr > 0.0 && t.lr.is_finite()) {
                return bad(format!("{name}.lr must be positive"));
            }
        }
        if !(self.student_scale > 0.0 && self.student_scale.is_finite()) {
            return bad("encoder.student_scale must be positive".into());
        }
        if self.dataset.points_per_cloud < self.encoder.points_per_level[0] {
            return bad(format!(
                "dataset.points ({}) below encoder level-1 size ({})",
                self.dataset.points_per_cloud, self.encoder.points_per_level[0]
            ));
        }
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return bad("dataset splits must be non-empty".into());
        }
        if !(self.dataset.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.dataset.scale_jitter) {
            return bad("dataset.noise must be ≥ 0 and dataset.scale_jitter in [0, 1)".into());
        }
        if self.ablate_threads == 0 {
            return bad("ablate.threads must be ≥ 1".into());
        }
        if self.hist.bins == 0 || self.hist.sample_m == 0 {
            return bad("hist.bins and hist.sample_m must be ≥ 1".into());
        }
        if self.bench.sizes.iter().any(|&n| n == 0) || self.bench.dims.iter().any(|&d| d == 0) {
            return bad("bench sizes and dims must be ≥ 1".into());
        }
        if self.bench.eps.iter().any(|&e| !(e > 0.0)) {
            return bad("bench.eps entries must be positive".into());
        }
        Ok(())
    }

    /// Parse a config file. `seed_override` replaces the `seed` key.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut base = 0;
        if let Some((line, _, v)) = pairs.iter().find(|(_, k, _)| k == "seed") {
            base = value(*line, "seed", v)?;
        }
        let base = seed_override.unwrap_or(base);
        let mut cfg = DistillConfig {
            seeds: Seeds::from_base(base),
            ..Default::default()
        };
        let mut data_seed = None;
        for (line, key, v) in &pairs {
            cfg.apply(*line, key, v, &mut data_seed)?;
        }
        cfg.dataset.seed = data_seed.unwrap_or(cfg.seeds.data);
        cfg.seeds.data = cfg.dataset.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>, seed_override: Option<u64>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, seed_override)
    }

    fn apply(&mut self, line: usize, key: &str, v: &str, data_seed: &mut Option<u64>) -> Result<()> {
        let ln = line;
        match key {
            "seed" => {}
            "dataset.n_train" => self.dataset.n_train = value(ln, key, v)?,
            "dataset.n_test" => self.dataset.n_test = value(ln, key, v)?,
            "dataset.points" => self.dataset.points_per_cloud = value(ln, key, v)?,
            "dataset.noise" => self.dataset.noise_sigma = value(ln, key, v)?,
            "dataset.rotate" => self.dataset.rotate = value(ln, key, v)?,
            "dataset.scale_jitter" => self.dataset.scale_jitter = value(ln, key, v)?,
            "dataset.seed" => *data_seed = Some(value(ln, key, v)?),
            "encoder.points" => self.encoder.points_per_level = list(ln, key, v)?,
            "encoder.dims" => self.encoder.dims_per_level = list(ln, key, v)?,
            "encoder.knn_group" => self.encoder.knn_group = value(ln, key, v)?,
            "encoder.head_hidden" => self.encoder.head_hidden = value(ln, key, v)?,
            "encoder.student_scale" => self.student_scale = value(ln, key, v)?,
            "teacher.init_seed" => self.seeds.teacher_init = value(ln, key, v)?,
            "teacher.fps_seed" => self.seeds.teacher_fps = value(ln, key, v)?,
            "student.init_seed" => self.seeds.student_init = value(ln, key, v)?,
            "student.fps_seed" => self.seeds.student_fps = value(ln, key, v)?,
            "student.share_fps" => self.share_fps = value(ln, key, v)?,
            "distill.mode" => self.mode = value(ln, key, v)?,
            "distill.lambda" => self.lambda = value(ln, key, v)?,
            "distill.teacher_checkpoint" => self.teacher_checkpoint = Some(PathBuf::from(v)),
            "fmd.k" => self.fmd.k = value(ln, key, v)?,
            "fmd.tau" => {
                self.fmd.tau = if v == "adaptive" {
                    TauMode::Adaptive
                } else {
                    TauMode::Fixed(value(ln, key, v)?)
                }
            }
            "fmd.normalize_apc" => self.fmd.normalize_apc = value(ln, key, v)?,
            "ablate.modes" => self.ablate_modes = list(ln, key, v)?,
            "ablate.seeds" => self.ablate_seeds = list(ln, key, v)?,
            "ablate.threads" => self.ablate_threads = value(ln, key, v)?,
            "hist.clouds" => self.hist.clouds = value(ln, key, v)?,
            "hist.points" => self.hist.points = value(ln, key, v)?,
            "hist.sample_m" => self.hist.sample_m = value(ln, key, v)?,
            "hist.bins" => self.hist.bins = value(ln, key, v)?,
            "hist.teacher_seed" => self.hist.teacher_seed = value(ln, key, v)?,
            "hist.student_seed" => self.hist.student_seed = value(ln, key, v)?,
            "hist.pairing" => {
                self.hist.pairing = match v {
                    "order" => Pairing::Order,
                    "nearest" => Pairing::Nearest,
                    _ => return Err(line_err(ln, format!("`{key}`: expected order or nearest, got `{v}`"))),
                }
            }
            "bench.sizes" => self.bench.sizes = list(ln, key, v)?,
            "bench.dims" => self.bench.dims = list(ln, key, v)?,
            "bench.repeats" => self.bench.repeats = value(ln, key, v)?,
            "bench.eps" => self.bench.eps = list(ln, key, v)?,
            "bench.seed" => self.bench.seed = value(ln, key, v)?,
            _ => {
                let (phase, field) = key.split_once('.').unwrap_or((key, ""));
                let settings = match phase {
                    "teacher" => &mut self.teacher,
                    "distill" => &mut self.distill,
                    _ => return Err(line_err(ln, format!("unknown key `{key}`"))),
                };
                match field {
                    "optimizer" => {
                        settings.optimizer = match v {
                            "sgd" => OptimizerKind::Sgd,
                            "adam" => OptimizerKind::Adam,
                            _ => return Err(line_err(ln, format!("`{key}`: expected sgd or adam, got `{v}`"))),
                        }
                    }
                    "lr" => settings.lr = value(ln, key, v)?,
                    "epochs" => settings.epochs = value(ln, key, v)?,
                    "batch_size" => settings.batch_size = value(ln, key, v)?,
                    _ => return Err(line_err(ln, format!("unknown key `{key}`"))),
                }
            }
        }
        Ok(())
    }
}

fn line_err(line: usize, msg: String) -> Error {
    Error::ConfigLine { line, msg }
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| line_err(line, format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(line_err(line, format!("`{key}`: empty list")));
    }
    items.into_iter().map(|s| value(line, key, s)).collect()
}

/// Split a config file into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| line_err(line, format!("expected `key = value`, got `{body}`")))?;
        let (k, v) = (k.trim(), v.trim());
        let well_formed = !k.is_empty()
            && k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.');
        if !well_formed {
            return Err(line_err(line, format!("malformed key `{k}`")));
        }
        if !seen.insert(k.to_string()) {
            return Err(line_err(line, format!("duplicate key `{k}`")));
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}
