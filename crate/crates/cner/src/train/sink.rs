//! Run observers: a no-op sink for library use and a file sink that streams
//! run artifacts (report rows, fusion plans, pseudo-label audits, per-step
//! checkpoints) into an output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::fusion::FusionPlan;
use crate::metrics::StepReport;
use crate::model::{save_checkpoint, ModelCheckpoint};
use crate::pseudo::PseudoAudit;

pub trait RunSink {
    /// Called with the freshly expanded, pre-training model at each step.
    fn on_step_start(&mut self, _t: usize, _model: &ModelCheckpoint) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _t: usize, _epoch: usize, _loss: f64, _dev_score: f64) -> Result<()> {
        Ok(())
    }

    fn on_pseudo_audit(&mut self, _t: usize, _audit: &PseudoAudit) -> Result<()> {
        Ok(())
    }

    fn on_fusion_plan(&mut self, _t: usize, _plan: &FusionPlan) -> Result<()> {
        Ok(())
    }

    fn on_step_report(&mut self, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _t: usize, _model: &ModelCheckpoint) -> Result<()> {
        Ok(())
    }
}

/// Discards every event.
#[derive(Debug, Default)]
pub struct NullSink;

impl RunSink for NullSink {}

/// Streams run artifacts into a directory:
///
/// - `reports.csv`: `step,metric,value` rows, flushed per step
/// - `epochs.csv`: per-epoch training loss and dev micro-F1
/// - `fusion_plan.txt` / `pseudo_audit.txt`: one block per step
/// - `step<t>.ckpt`: the post-fusion checkpoint of each step
pub struct FileSink {
    dir: PathBuf,
    reports: BufWriter<File>,
    epochs: BufWriter<File>,
    fusion: Option<BufWriter<File>>,
    pseudo: Option<BufWriter<File>>,
    save_checkpoints: bool,
}

impl FileSink {
    pub fn create(dir: &Path, save_checkpoints: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut reports = BufWriter::new(File::create(dir.join("reports.csv"))?);
        writeln!(reports, "step,metric,value")?;
        let mut epochs = BufWriter::new(File::create(dir.join("epochs.csv"))?);
        writeln!(epochs, "step,epoch,loss,dev_mi_f1")?;
        Ok(FileSink {
            dir: dir.to_path_buf(),
            reports,
            epochs,
            fusion: None,
            pseudo: None,
            save_checkpoints,
        })
    }

    /// CSV rows for one report, in a fixed order.
    pub fn report_rows(report: &StepReport) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("mi_f1_all".to_string(), report.mi_f1_all),
            ("ma_f1_all".to_string(), report.ma_f1_all),
        ];
        if let Some(old) = report.ma_f1_old {
            rows.push(("ma_f1_old".to_string(), old));
        }
        rows.push(("ma_f1_new".to_string(), report.ma_f1_new));
        for (ty, f1) in &report.per_type_f1 {
            rows.push((format!("f1.{ty}"), *f1));
        }
        for (ty, counts) in &report.counts {
            rows.push((format!("tp.{ty}"), counts.tp as f64));
            rows.push((format!("fp.{ty}"), counts.fp as f64));
            rows.push((format!("fn.{ty}"), counts.fn_ as f64));
        }
        rows
    }
}

impl RunSink for FileSink {
    fn on_epoch(&mut self, t: usize, epoch: usize, loss: f64, dev_score: f64) -> Result<()> {
        writeln!(self.epochs, "{t},{epoch},{loss},{dev_score}")?;
        self.epochs.flush()?;
        Ok(())
    }

    fn on_pseudo_audit(&mut self, t: usize, audit: &PseudoAudit) -> Result<()> {
        if self.pseudo.is_none() {
            self.pseudo = Some(BufWriter::new(File::create(
                self.dir.join("pseudo_audit.txt"),
            )?));
        }
        let out = self.pseudo.as_mut().unwrap();
        writeln!(out, "[step {t}]")?;
        writeln!(out, "masked_count = {}", audit.masked_count)?;
        for (tag, tau) in &audit.thresholds {
            writeln!(out, "tau.{tag} = {tau}")?;
        }
        for (tag, n) in &audit.group_sizes {
            writeln!(out, "group_size.{tag} = {n}")?;
        }
        for (tag, n) in &audit.retained {
            writeln!(out, "retained.{tag} = {n}")?;
        }
        for (tag, n) in &audit.rejected {
            writeln!(out, "rejected.{tag} = {n}")?;
        }
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    fn on_fusion_plan(&mut self, t: usize, plan: &FusionPlan) -> Result<()> {
        if self.fusion.is_none() {
            self.fusion = Some(BufWriter::new(File::create(
                self.dir.join("fusion_plan.txt"),
            )?));
        }
        let out = self.fusion.as_mut().unwrap();
        writeln!(out, "[step {t}]")?;
        writeln!(out, "alpha = {}", plan.alpha)?;
        writeln!(out, "gamma = {}", plan.gamma)?;
        writeln!(out, "threshold = {}", plan.threshold_value)?;
        writeln!(out, "selected = {}", plan.selected_count)?;
        writeln!(out, "total = {}", plan.total_count)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    fn on_step_report(&mut self, report: &StepReport) -> Result<()> {
        for (metric, value) in Self::report_rows(report) {
            writeln!(self.reports, "{},{},{}", report.step, metric, value)?;
        }
        self.reports.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, t: usize, model: &ModelCheckpoint) -> Result<()> {
        if self.save_checkpoints {
            save_checkpoint(model, &self.dir.join(format!("step{t}.ckpt")))?;
        }
        Ok(())
    }
}
