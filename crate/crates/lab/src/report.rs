//! CSV tables.

use std::path::Path;

use deconfound_core::eval::{BiasProbeReport, EvalReport, ProbeRow};
use deconfound_core::ood::SplitResult;
use deconfound_core::train::{AblationRow, SweepRow, TrainHistory};
use serde::Serialize;

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>, path: &Path) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct StatsRow<'a> {
    category: &'a str,
    samples: usize,
    head: usize,
    tail: usize,
    kept_head: usize,
    kept_tail: usize,
    alpha: Option<u64>,
}

pub fn write_split_stats(split: &SplitResult, path: &Path) -> csv::Result<()> {
    write_rows(
        split.stats.categories.iter().map(|(c, s)| StatsRow {
            category: c,
            samples: s.samples,
            head: s.head,
            tail: s.tail,
            kept_head: s.kept_head,
            kept_tail: s.kept_tail,
            alpha: s.alpha,
        }),
        path,
    )
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    loss_base: f64,
    loss_neg: f64,
    total: f64,
    val_q_to_a: Option<f64>,
    val_qa_to_r: Option<f64>,
    val_q_to_ar: Option<f64>,
}

pub fn write_history(h: &TrainHistory, path: &Path) -> csv::Result<()> {
    write_rows(
        h.epochs.iter().map(|e| HistoryRow {
            epoch: e.epoch,
            loss_base: e.loss_base,
            loss_neg: e.loss_neg,
            total: e.total,
            val_q_to_a: e.val.as_ref().map(|r| r.q_to_a),
            val_qa_to_r: e.val.as_ref().map(|r| r.qa_to_r),
            val_q_to_ar: e.val.as_ref().map(|r| r.q_to_ar),
        }),
        path,
    )
}

fn metric_cells(r: &EvalReport) -> [String; 4] {
    [r.count.to_string(), r.q_to_a.to_string(), r.qa_to_r.to_string(), r.q_to_ar.to_string()]
}

/// One line per λ, ready for plotting.
pub fn write_sweep(rows: &[SweepRow], path: &Path) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "count", "q_to_a", "qa_to_r", "q_to_ar"])?;
    for r in rows {
        let [n, a, r_, ar] = metric_cells(&r.report);
        w.write_record([r.lambda.to_string(), n, a, r_, ar])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation(rows: &[AblationRow], path: &Path) -> csv::Result<()> {
    let mark = |b: bool| if b { "✓" } else { "✗" };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["causal", "neg_loss", "count", "q_to_a", "qa_to_r", "q_to_ar"])?;
    for r in rows {
        let [n, a, r_, ar] = metric_cells(&r.report);
        w.write_record([mark(r.use_causal).to_string(), mark(r.use_neg_loss).to_string(), n, a, r_, ar])?;
    }
    w.flush()?;
    Ok(())
}

/// Probe table; absent subsets and the reasoning column of the frequency
/// probes are written as `--`.
pub fn write_probes(r: &BiasProbeReport, path: &Path) -> csv::Result<()> {
    let cell = |x: Option<f64>| x.map_or("--".to_string(), |v| v.to_string());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subset", "count", "q_to_a", "qa_to_r"])?;
    let rows: [(&str, &Option<ProbeRow>); 4] =
        [("cooc", &r.cooc), ("non_cooc", &r.non_cooc), ("head", &r.head), ("tail", &r.tail)];
    for (name, row) in rows {
        match row {
            Some(p) => w.write_record([name.to_string(), p.count.to_string(), p.q_to_a.to_string(), cell(p.qa_to_r)])?,
            None => w.write_record([name, "0", "--", "--"])?,
        }
    }
    w.flush()?;
    Ok(())
}
