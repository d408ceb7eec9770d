//! Teacher pretraining and student distillation.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bkr::{self, LevelFeature, Mode};
use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::harness::config::{DistillConfig, TrainSettings};
use crate::harness::data::{Dataset, Sample};
use crate::harness::metrics::{argmax, metrics, Metrics};
use crate::nets::Encoder;
use crate::ot::{fl2_loss, fmd_loss, remd_loss, FmdOptions};
use crate::seed::derive;

/// Mean per-sample losses of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    /// Σ over levels of the level loss, before λ
    pub distill: f64,
    pub total: f64,
    /// largest |total − (ce + λ·distill)| over the epoch's samples
    pub decomposition_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub status: RunStatus,
    pub epochs: Vec<EpochStats>,
    /// test-set metrics; absent when the run failed
    pub metrics: Option<Metrics>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn final_epoch(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Losses of one sample: the scalar node to differentiate plus its parts.
struct SampleLoss {
    total: Var,
    ce: f64,
    distill: f64,
}

/// Predicted class of every sample, using frozen parameters.
pub fn predict(enc: &Encoder, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let t = enc.forward(&mut g, &s.cloud, s.id, true)?;
            Ok(argmax(g.value(t.logits).iter().copied()))
        })
        .collect()
}

pub fn evaluate(enc: &Encoder, samples: &[Sample]) -> Result<Metrics> {
    let preds = predict(enc, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    metrics(&preds, &labels, enc.cfg.num_classes)
}

/// Fixed-budget minibatch loop. The epoch order is shuffled with a seed
/// derived from the encoder's init seed. A non-finite loss or gradient stops
/// the run and is returned alongside the epochs completed so far.
fn fit<F>(
    enc: &mut Encoder,
    train: &[Sample],
    settings: &TrainSettings,
    lambda: f64,
    mut sample_loss: F,
) -> (Vec<EpochStats>, Option<Error>)
where
    F: FnMut(&mut Graph, &Encoder, usize) -> Result<SampleLoss>,
{
    let opt = settings.optimizer();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(&[enc.cfg.init_seed, 0x5f, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch: epoch + 1,
            ce: 0.0,
            distill: 0.0,
            total: 0.0,
            decomposition_error: 0.0,
        };
        for batch in order.chunks(settings.batch_size) {
            for &i in batch {
                let mut g = Graph::new();
                let step = sample_loss(&mut g, enc, i).and_then(|l| {
                    let total = g.scalar(l.total);
                    if !total.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss in epoch {} (sample {})",
                            epoch + 1,
                            train[i].id
                        )));
                    }
                    g.backward(l.total)?;
                    g.accumulate_grads(&mut enc.params)?;
                    Ok((l, total))
                });
                let (l, total) = match step {
                    Ok(v) => v,
                    Err(e) => return (epochs, Some(e)),
                };
                stats.ce += l.ce;
                stats.distill += l.distill;
                stats.total += total;
                let err = (total - (l.ce + lambda * l.distill)).abs();
                stats.decomposition_error = stats.decomposition_error.max(err);
            }
            enc.params.scale_grads(1.0 / batch.len() as f64);
            if let Err(e) = enc.params.step(&opt) {
                return (epochs, Some(e));
            }
        }
        let n = train.len() as f64;
        stats.ce /= n;
        stats.distill /= n;
        stats.total /= n;
        epochs.push(stats);
    }
    (epochs, None)
}

fn finish(name: &str, enc: &Encoder, data: &Dataset, epochs: Vec<EpochStats>, err: Option<Error>, t0: Instant) -> Result<RunReport> {
    let (status, metrics) = match err {
        Some(Error::Numeric(m)) => (RunStatus::Failed(m), None),
        Some(e) => return Err(e),
        None => (RunStatus::Ok, Some(evaluate(enc, &data.test)?)),
    };
    Ok(RunReport {
        name: name.to_string(),
        status,
        epochs,
        metrics,
        wall_time_s: t0.elapsed().as_secs_f64(),
    })
}

/// Cross-entropy training of an encoder on the train split.
pub fn train_classifier(enc: &mut Encoder, data: &Dataset, settings: &TrainSettings, name: &str) -> Result<RunReport> {
    if data.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let t0 = Instant::now();
    let (epochs, err) = fit(enc, &data.train, settings, 0.0, |g, enc, i| {
        let s = &data.train[i];
        let trace = enc.forward(g, &s.cloud, s.id, false)?;
        let total = g.softmax_cross_entropy(trace.logits, s.label)?;
        Ok(SampleLoss {
            ce: g.scalar(total),
            distill: 0.0,
            total,
        })
    });
    finish(name, enc, data, epochs, err, t0)
}

/// Train the full-width teacher from its config seeds.
pub fn pretrain_teacher(cfg: &DistillConfig, data: &Dataset) -> Result<(Encoder, RunReport)> {
    cfg.validate()?;
    let mut teacher = Encoder::new(cfg.teacher_encoder())?;
    let report = train_classifier(&mut teacher, data, &cfg.teacher, "teacher")?;
    Ok((teacher, report))
}

/// Teacher level positions and feature values for one sample.
#[derive(Debug, Clone)]
pub struct TeacherLevels {
    pub positions: Vec<Array2<f64>>,
    pub features: Vec<Array2<f64>>,
}

pub fn teacher_levels(teacher: &Encoder, sample: &Sample) -> Result<TeacherLevels> {
    let mut g = Graph::new();
    let trace = teacher.forward(&mut g, &sample.cloud, sample.id, true)?;
    Ok(TeacherLevels {
        positions: trace.levels.iter().map(|l| l.positions.clone()).collect(),
        features: trace.levels.iter().map(|l| g.value(l.features).clone()).collect(),
    })
}

/// Σ over levels of the mode's level loss.
pub fn level_losses(
    g: &mut Graph,
    store: &ParamStore,
    levels: &[LevelFeature],
    teacher: &TeacherLevels,
    mode: Mode,
    fmd: &FmdOptions,
) -> Result<Var> {
    let dims: Vec<usize> = teacher.features.iter().map(|f| f.ncols()).collect();
    if levels.len() != dims.len() {
        return Err(Error::Config(format!(
            "student has {} levels, teacher {}",
            levels.len(),
            dims.len()
        )));
    }
    let mut per_level = Vec::with_capacity(levels.len());
    match mode {
        Mode::Fl2 => {
            for (l, lf) in levels.iter().enumerate() {
                let (w, b) = bkr::adapter_names(l + 1);
                let adapter = (g.param(store, &w)?, g.param(store, &b)?);
                per_level.push(fl2_loss(g, lf.features, &teacher.features[l], adapter)?);
            }
        }
        Mode::Remd => {
            for (l, lf) in levels.iter().enumerate() {
                let a = bkr::adapt(g, store, l + 1, lf.features)?;
                per_level.push(remd_loss(g, a, &teacher.features[l])?);
            }
        }
        _ => {
            let stack = bkr::reconfigure(g, store, levels, &dims, mode.stages())?;
            for (l, lf) in levels.iter().enumerate() {
                let pos_t = teacher.positions[l].view();
                let opts = FmdOptions {
                    k: fmd.k.min(pos_t.nrows()),
                    ..*fmd
                };
                per_level.push(fmd_loss(g, stack.out[l], lf.positions.view(), &teacher.features[l], pos_t, &opts)?);
            }
        }
    }
    let mut sum = per_level[0];
    for &v in &per_level[1..] {
        sum = g.add(sum, v)?;
    }
    Ok(sum)
}

/// Student encoder with reconfiguration parameters added to its store.
pub fn init_student(cfg: &DistillConfig, teacher: &Encoder) -> Result<Encoder> {
    let mut student = Encoder::new(cfg.student_encoder())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(&[cfg.seeds.student_init, 0xb4]));
    bkr::init_params(&mut student.params, &student.cfg.dims(), &teacher.cfg.dims(), &mut rng)?;
    Ok(student)
}

fn check_teacher(cfg: &DistillConfig, teacher: &Encoder) -> Result<()> {
    let want = cfg.teacher_encoder();
    if teacher.cfg.dims() != want.dims() || teacher.cfg.points_per_level != want.points_per_level {
        return Err(Error::Config(format!(
            "teacher has levels {:?} × dims {:?}, config expects {:?} × {:?}",
            teacher.cfg.points_per_level,
            teacher.cfg.dims(),
            want.points_per_level,
            want.dims()
        )));
    }
    Ok(())
}

/// Loss of one distillation sample.
fn distill_sample(
    g: &mut Graph,
    student: &Encoder,
    sample: &Sample,
    teacher: &TeacherLevels,
    cfg: &DistillConfig,
) -> Result<SampleLoss> {
    let trace = student.forward(g, &sample.cloud, sample.id, false)?;
    let ce = g.softmax_cross_entropy(trace.logits, sample.label)?;
    let distill = level_losses(g, &student.params, &trace.levels, teacher, cfg.mode, &cfg.fmd)?;
    let weighted = g.scale(distill, cfg.lambda);
    let total = g.add(ce, weighted)?;
    Ok(SampleLoss {
        ce: g.scalar(ce),
        distill: g.scalar(distill),
        total,
    })
}

/// Build every graph a distillation step needs on one sample, without
/// updating anything. Surfaces shape and config errors.
pub fn check_shapes(cfg: &DistillConfig, teacher: &Encoder, sample: &Sample) -> Result<()> {
    cfg.validate()?;
    check_teacher(cfg, teacher)?;
    let student = init_student(cfg, teacher)?;
    let t = teacher_levels(teacher, sample)?;
    let mut g = Graph::new();
    distill_sample(&mut g, &student, sample, &t, cfg)?;
    Ok(())
}

/// Final student and its report.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Encoder,
    pub report: RunReport,
}

/// Train a student with `CE + λ·Σ_l level loss` against the frozen teacher.
pub fn distill(cfg: &DistillConfig, teacher: &Encoder, data: &Dataset) -> Result<DistillOutcome> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Config("empty training split".into()))?;
    check_shapes(cfg, teacher, first)?;
    let t0 = Instant::now();
    let cached: Vec<TeacherLevels> = data
        .train
        .iter()
        .map(|s| teacher_levels(teacher, s))
        .collect::<Result<_>>()?;
    let mut student = init_student(cfg, teacher)?;
    let (epochs, err) = fit(&mut student, &data.train, &cfg.distill, cfg.lambda, |g, enc, i| {
        distill_sample(g, enc, &data.train[i], &cached[i], cfg)
    });
    let report = finish(cfg.mode.name(), &student, data, epochs, err, t0)?;
    Ok(DistillOutcome { student, report })
}
