use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{finetune, FinetuneConfig, FinetuneError, RunReport, TaskSpec};
use crate::corpus::Vocabulary;
use crate::model::EncoderParams;
use crate::numcore::Scalar;
use crate::par::Exec;
use crate::report;

/// Leading columns of `sweep.csv`; metric and `delta_pct_*` columns follow,
/// then `seeds`.
pub const SWEEP_COLUMNS: [&str; 6] =
    ["model", "K", "params_trainable", "params_reduction_pct", "epoch_seconds", "convergence_seconds"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Base run first, then one row per K in request order.
    pub rows: Vec<RunReport>,
    pub failures: Vec<SweepFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub model: String,
    pub error: String,
    /// A frozen parameter changed: an invariant violation, not a run error.
    pub frozen_drift: bool,
}

impl SweepTable {
    pub fn has_frozen_drift(&self) -> bool {
        self.failures.iter().any(|f| f.frozen_drift)
    }
}

/// Runs full fine-tuning and then Telly-K for each `k`, sequentially (timing
/// is measured, so runs never share the machine). A failing run is recorded
/// and the sweep continues. Change ratios are relative to the base run.
pub fn sweep<T: Scalar>(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    base: &EncoderParams<T>,
    ks: &[usize],
    cfg: &FinetuneConfig,
    exec: Exec,
) -> SweepTable {
    let mut table = SweepTable { rows: Vec::new(), failures: Vec::new() };
    for k in std::iter::once(None).chain(ks.iter().map(|&k| Some(k))) {
        match finetune(spec, vocab, base, k, cfg, exec) {
            Ok(out) => table.rows.push(out.report),
            Err(e) => {
                log::error!("sweep run {} failed: {e}", RunReport::label(k));
                table.failures.push(SweepFailure {
                    model: RunReport::label(k),
                    error: e.to_string(),
                    frozen_drift: matches!(e, FinetuneError::FrozenDrift { .. }),
                });
            }
        }
    }
    let base_metrics = table.rows.iter().find(|r| r.k.is_none()).map(|r| r.metrics.clone());
    if let Some(bm) = base_metrics {
        for r in &mut table.rows {
            r.delta_pct = r
                .metrics
                .iter()
                .filter_map(|(name, v)| {
                    let b = bm.get(name)?;
                    (*b != 0.0).then(|| (name.clone(), 100.0 * (v - b) / b))
                })
                .collect();
        }
    }
    table
}

/// Header and cells of `sweep.csv`, one row per run.
pub fn sweep_csv_rows(table: &SweepTable) -> (Vec<String>, Vec<Vec<String>>) {
    let metric_names: Vec<String> = table.rows.first().map(|r| r.metrics.keys().cloned().collect()).unwrap_or_default();
    let mut header: Vec<String> = SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(metric_names.iter().cloned());
    header.extend(metric_names.iter().map(|m| format!("delta_pct_{m}")));
    header.push("seeds".into());
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.model.clone(),
                r.k.map_or_else(|| "base".into(), |k| k.to_string()),
                r.params_trainable.to_string(),
                format!("{:.4}", r.params_reduction_pct),
                format!("{:.6}", r.epoch_seconds),
                format!("{:.6}", r.convergence_seconds),
            ];
            row.extend(metric_names.iter().map(|m| format!("{:.6}", r.metrics.get(m).copied().unwrap_or(f64::NAN))));
            row.extend(metric_names.iter().map(|m| r.delta_pct.get(m).map_or(String::new(), |d| format!("{d:.4}"))));
            row.push(r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"));
            row
        })
        .collect();
    (header, rows)
}

/// Writes the table as CSV with one row per run.
pub fn write_sweep_csv(table: &SweepTable, path: &Path) -> Result<(), FinetuneError> {
    let (header, rows) = sweep_csv_rows(table);
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    Ok(report::write_csv(path, &header, &rows)?)
}
