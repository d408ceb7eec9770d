//! CSV views of a [`RunReport`].

use std::io::Write;

use crate::error::Result;
use crate::harness::train::{RunReport, RunStatus};

/// `epoch,ce,distill,total` per epoch.
pub fn write_epochs_csv<W: Write>(w: W, report: &RunReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "ce", "distill", "total"])?;
    for e in &report.epochs {
        out.write_record([e.epoch.to_string(), e.ce.to_string(), e.distill.to_string(), e.total.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// One row with status and final metrics. Wall time is included only when
/// `timing` is set, so that reruns produce identical bytes by default.
pub fn write_summary_csv<W: Write>(w: W, report: &RunReport, timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["name", "status", "oa", "macc", "absent_classes", "wall_time_s", "error"])?;
    let (status, error) = match &report.status {
        RunStatus::Ok => ("ok", String::new()),
        RunStatus::Failed(m) => ("failed", m.clone()),
    };
    let m = report.metrics.as_ref();
    out.write_record([
        report.name.clone(),
        status.to_string(),
        m.map(|m| m.oa.to_string()).unwrap_or_default(),
        m.map(|m| m.macc.to_string()).unwrap_or_default(),
        m.map(|m| m.absent.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default(),
        if timing { report.wall_time_s.to_string() } else { String::new() },
        error,
    ])?;
    out.flush()?;
    Ok(())
}

/// Confusion matrix: one row per true class, one column per prediction.
pub fn write_confusion_csv<W: Write>(w: W, report: &RunReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if let Some(m) = &report.metrics {
        let k = m.confusion.ncols();
        let mut head = vec!["true_class".to_string()];
        head.extend((0..k).map(|c| format!("pred_{c}")));
        out.write_record(&head)?;
        for (c, row) in m.confusion.rows().into_iter().enumerate() {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}
