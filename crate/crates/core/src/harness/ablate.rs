//! Mode × seed distillation matrix.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::bkr::Mode;
use crate::error::Result;
use crate::harness::config::DistillConfig;
use crate::harness::data::Dataset;
use crate::harness::train::{distill, RunReport, RunStatus};
use crate::nets::Encoder;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub mode: Mode,
    pub seed: u64,
    /// `Err` holds the failure message
    pub report: std::result::Result<RunReport, String>,
}

impl AblationRun {
    pub fn ok_report(&self) -> Option<&RunReport> {
        self.report.as_ref().ok().filter(|r| r.is_ok())
    }

    pub fn oa(&self) -> Option<f64> {
        self.ok_report().and_then(|r| r.metrics.as_ref()).map(|m| m.oa)
    }
}

/// Run every mode × seed pair. Runs are independent and may execute on
/// `cfg.ablate_threads` threads; results come back in mode-major order.
pub fn ablate(cfg: &DistillConfig, teacher: &Encoder, data: &Dataset) -> Vec<AblationRun> {
    let jobs: Vec<(Mode, u64)> = cfg
        .ablate_modes
        .iter()
        .flat_map(|&m| cfg.ablate_seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Mutex<Vec<Option<AblationRun>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(mode, seed)) = jobs.get(i) else { break };
        let run_cfg = DistillConfig {
            mode,
            seeds: cfg.seeds.with_run_seed(seed),
            ..cfg.clone()
        };
        let report = distill(&run_cfg, teacher, data)
            .map(|o| o.report)
            .map_err(|e| e.to_string());
        results.lock().unwrap()[i] = Some(AblationRun { mode, seed, report });
    };
    let threads = cfg.ablate_threads.min(jobs.len()).max(1);
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-mode mean OA over successful runs, in the order modes first appear.
pub fn mode_means(runs: &[AblationRun]) -> Vec<(Mode, f64)> {
    let mut modes: Vec<Mode> = Vec::new();
    for r in runs {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|m| {
            let oas: Vec<f64> = runs.iter().filter(|r| r.mode == m).filter_map(|r| r.oa()).collect();
            (m, mean_std(&oas).0)
        })
        .collect()
}

pub const ABLATION_HEADER: [&str; 13] = [
    "row", "mode", "seed", "status", "oa", "oa_std", "macc", "macc_std", "ce", "distill", "total",
    "wall_time_s", "error",
];

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// One row per run plus one `summary` row per mode with mean and std over
/// successful runs. Wall times are written only when `timing` is set.
pub fn write_ablation_csv<W: Write>(w: W, runs: &[AblationRun], timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ABLATION_HEADER)?;
    let mut modes: Vec<Mode> = Vec::new();
    for r in runs {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
        let mut row = vec!["run".to_string(), r.mode.to_string(), r.seed.to_string()];
        match &r.report {
            Ok(rep) if rep.is_ok() => {
                let m = rep.metrics.as_ref().expect("successful runs carry metrics");
                let last = rep.final_epoch();
                row.extend([
                    "ok".into(),
                    fmt(m.oa),
                    String::new(),
                    fmt(m.macc),
                    String::new(),
                    last.map(|e| fmt(e.ce)).unwrap_or_default(),
                    last.map(|e| fmt(e.distill)).unwrap_or_default(),
                    last.map(|e| fmt(e.total)).unwrap_or_default(),
                    if timing { fmt(rep.wall_time_s) } else { String::new() },
                    String::new(),
                ]);
            }
            other => {
                let msg = match other {
                    Ok(RunReport {
                        status: RunStatus::Failed(m),
                        ..
                    }) => m.clone(),
                    Err(m) => m.clone(),
                    Ok(_) => unreachable!(),
                };
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 8));
                row.push(msg);
            }
        }
        out.write_record(&row)?;
    }
    for m in modes {
        let ok: Vec<&RunReport> = runs.iter().filter(|r| r.mode == m).filter_map(|r| r.ok_report()).collect();
        let total = runs.iter().filter(|r| r.mode == m).count();
        let pick = |f: &dyn Fn(&RunReport) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (oa, oa_sd) = pick(&|r| r.metrics.as_ref().unwrap().oa);
        let (macc, macc_sd) = pick(&|r| r.metrics.as_ref().unwrap().macc);
        let last = |f: fn(&crate::harness::train::EpochStats) -> f64| {
            move |r: &RunReport| r.final_epoch().map(f).unwrap_or(f64::NAN)
        };
        let (ce, _) = pick(&last(|e| e.ce));
        let (dl, _) = pick(&last(|e| e.distill));
        let (tot, _) = pick(&last(|e| e.total));
        let (wall, _) = pick(&|r| r.wall_time_s);
        out.write_record([
            "summary".to_string(),
            m.to_string(),
            String::new(),
            format!("{}/{} ok", ok.len(), total),
            fmt(oa),
            fmt(oa_sd),
            fmt(macc),
            fmt(macc_sd),
            fmt(ce),
            fmt(dl),
            fmt(tot),
            if timing { fmt(wall) } else { String::new() },
            String::new(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 1.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn failed_runs_become_rows() {
        let runs = vec![AblationRun {
            mode: Mode::Fl2,
            seed: 0,
            report: Err("boom".into()),
        }];
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &runs, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("run,fl2,0,failed,"));
        assert!(lines[1].ends_with(",boom"));
        assert!(lines[2].starts_with("summary,fl2,,0/1 ok,NaN"));
    }
}
