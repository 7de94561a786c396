//! Desk-scale ablation over MoE on/off and the cross-sensor rate.

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{format_table_with, MetricReport};
use crate::sensors::Dataset;
use crate::training::Trainer;
use crate::transfer::{make_task, FinetuneModel, TransferConfig};

/// Metric columns, in table order.
pub const COLUMNS: [&str; 8] = ["map", "mae", "sam", "ssim", "psnr", "miou", "mim_self", "mim_cross"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub moe: bool,
    pub p_cross: f64,
}

/// Parse `moe=0,1;cross=0,0.5,1.0` into cells, MoE varying slowest. A
/// missing axis takes its value from `base`.
pub fn parse_grid(grid: &str, base: &RunConfig) -> Result<Vec<GridCell>> {
    let bad = |why: String| Error::Config(format!("ablation grid `{}`: {}", grid, why));
    let mut moe: Option<Vec<bool>> = None;
    let mut cross: Option<Vec<f64>> = None;
    let parts: Vec<&str> = grid.split(';').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return Err(bad("empty".into()));
    }
    for part in parts {
        let (key, values) = part.split_once('=').ok_or_else(|| bad(format!("`{}` is not axis=values", part)))?;
        let values: Vec<&str> = values.split(',').map(str::trim).collect();
        if values.iter().any(|v| v.is_empty()) {
            return Err(bad(format!("empty value in `{}`", part)));
        }
        match key.trim() {
            "moe" if moe.is_none() => {
                moe = Some(
                    values
                        .iter()
                        .map(|v| match *v {
                            "0" | "off" | "false" => Ok(false),
                            "1" | "on" | "true" => Ok(true),
                            _ => Err(bad(format!("moe value `{}`", v))),
                        })
                        .collect::<Result<_>>()?,
                )
            }
            "cross" if cross.is_none() => {
                cross = Some(
                    values
                        .iter()
                        .map(|v| match v.parse::<f64>() {
                            Ok(p) if (0.0..=1.0).contains(&p) => Ok(p),
                            _ => Err(bad(format!("cross value `{}` not in [0, 1]", v))),
                        })
                        .collect::<Result<_>>()?,
                )
            }
            k => return Err(bad(format!("unknown or repeated axis `{}`", k))),
        }
    }
    let moe = moe.unwrap_or_else(|| vec![base.model.encoder.moe_enabled()]);
    let cross = cross.unwrap_or_else(|| vec![base.train.p_cross]);
    Ok(moe
        .iter()
        .flat_map(|&m| cross.iter().map(move |&p| GridCell { moe: m, p_cross: p }))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: GridCell,
    pub report: MetricReport,
}

impl AblationRow {
    pub fn labels(&self) -> Vec<String> {
        let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
        vec![
            yn(self.cell.moe),
            yn(self.cell.p_cross > 0.0),
            format!("{}%", (self.cell.p_cross * 100.0).round()),
        ]
    }
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let rows: Vec<(Vec<String>, MetricReport)> = rows.iter().map(|r| (r.labels(), r.report.clone())).collect();
    format_table_with(&["MoE", "cross-sensor", "percentage"], &rows, &COLUMNS)
}

pub fn ablation_json(rows: &[AblationRow]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| json!({ "moe": r.cell.moe, "p_cross": r.cell.p_cross, "report": r.report.to_json() }))
            .collect(),
    )
}

/// Pretrain one cell for `ablation.steps` steps, then measure held-out
/// reconstruction and fine-tune each downstream head on the first transfer
/// sensor.
pub fn run_cell(base: &RunConfig, dataset: &Dataset, cell: GridCell) -> Result<AblationRow> {
    let mut cfg = base.with_moe(cell.moe);
    cfg.train.p_cross = cell.p_cross;
    let mut trainer = Trainer::new(dataset.clone(), cfg.model.clone(), cfg.train.clone())?;
    for _ in 0..cfg.ablation.steps {
        trainer.step()?;
    }
    let mut report = MetricReport::default();
    let batch = trainer.batch(0);
    let (self_l1, _) = trainer.evaluate(&trainer.plan_with(batch.clone(), cfg.ablation.eval_seed, 0.0)?)?;
    report.values.insert("mim_self".into(), self_l1);
    if dataset.paired_count() > 0 {
        let (cross_l1, _) = trainer.evaluate(&trainer.plan_with(batch, cfg.ablation.eval_seed, 1.0)?)?;
        report.values.insert("mim_cross".into(), cross_l1);
    }

    let reg = dataset.registry();
    let first = cfg
        .transfer
        .sensors
        .first()
        .and_then(|n| reg.by_name(n))
        .ok_or_else(|| Error::Config("transfer.sensors must name a known sensor".into()))?
        .clone();
    let mut heads = vec![("multilabel", 4), ("dense_classification", 4)];
    if let Some(p) = first.paired_with {
        heads.insert(1, ("dense_regression", reg.get(p).unwrap().channels));
    }
    for (head, outputs) in heads {
        let tc = TransferConfig {
            head: head.into(),
            outputs,
            sensors: vec![first.name.clone()],
            steps: cfg.ablation.finetune_steps,
            ..cfg.transfer.clone()
        };
        let task = make_task(dataset, &tc)?;
        let mut ft = FinetuneModel::new(cfg.model.clone(), tc, vec![first.clone()], trainer.state.params.clone())?;
        ft.finetune(&task)?;
        let r = ft.evaluate(&task, &task.test)?;
        report.values.extend(r.values);
    }
    Ok(AblationRow { cell, report })
}

pub fn run_ablation(
    base: &RunConfig,
    dataset: &Dataset,
    cells: &[GridCell],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for &cell in cells {
        let row = run_cell(base, dataset, cell)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let base = RunConfig::default();
        let cells = parse_grid("moe=0,1;cross=0,0.5,1.0", &base).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1], GridCell { moe: false, p_cross: 0.5 });
        assert_eq!(cells[3], GridCell { moe: true, p_cross: 0.0 });
        assert_eq!(parse_grid("cross=1", &base).unwrap().len(), 1);
        for bad in ["", " ; ", "moe", "moe=2", "cross=1.5", "moe=0;moe=1", "depth=1", "cross=0,,1"] {
            assert!(matches!(parse_grid(bad, &base), Err(Error::Config(_))), "{}", bad);
        }
    }
}
