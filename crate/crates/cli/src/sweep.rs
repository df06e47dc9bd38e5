//! One-axis parameter sweeps.
//!
//! A sweep clones the base experiment once per value of a single swept
//! parameter, shares the pretrained source across all points (no swept
//! axis touches the data or the source model), and keeps going past
//! failed points so one diverging configuration cannot hide the rest of
//! the curve.

use std::path::Path;

use anyhow::{bail, Context, Result};
use vcotta::varnet::VariationalNet;

use crate::experiment::{build_source, prepare_task, run_experiment};
use crate::spec::ExperimentSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisValue {
    EpsilonMargin(f64),
    NAugment(usize),
    /// `Some` pins the source-vs-teacher mixture; `None` is the adaptive
    /// entropy-derived weight.
    MixtureWeight(Option<f64>),
    BatchSize(usize),
    LearningRate(f64),
    /// Reseeds stream construction and switches the schedule to a random
    /// kind order.
    OrderSeed(u64),
}

impl AxisValue {
    pub fn axis_name(&self) -> &'static str {
        match self {
            AxisValue::EpsilonMargin(_) => "epsilon_margin",
            AxisValue::NAugment(_) => "n_augment",
            AxisValue::MixtureWeight(_) => "mixture_weight",
            AxisValue::BatchSize(_) => "batch_size",
            AxisValue::LearningRate(_) => "learning_rate",
            AxisValue::OrderSeed(_) => "order_seed",
        }
    }

    pub fn label(&self) -> String {
        match self {
            AxisValue::EpsilonMargin(v) => format!("eps_{v}"),
            AxisValue::NAugment(v) => format!("aug_{v}"),
            AxisValue::MixtureWeight(Some(v)) => format!("alpha_{v}"),
            AxisValue::MixtureWeight(None) => "alpha_adaptive".to_string(),
            AxisValue::BatchSize(v) => format!("batch_{v}"),
            AxisValue::LearningRate(v) => format!("lr_{v}"),
            AxisValue::OrderSeed(v) => format!("order_{v}"),
        }
    }

    fn apply(&self, spec: &mut ExperimentSpec) {
        match *self {
            AxisValue::EpsilonMargin(v) => spec.adapt.epsilon_margin = v,
            AxisValue::NAugment(v) => spec.adapt.n_augment = v,
            AxisValue::MixtureWeight(v) => spec.adapt.alpha_fixed = v,
            AxisValue::BatchSize(v) => spec.schedule.batch_size = v,
            AxisValue::LearningRate(v) => spec.adapt.learning_rate = v,
            AxisValue::OrderSeed(v) => {
                spec.schedule.kind = "random_order".to_string();
                spec.schedule.order_seed = Some(v);
            }
        }
    }
}

/// Parses `axis=v1,v2,...`. Mixture weights accept numbers or `adaptive`.
pub fn parse_axis(text: &str) -> Result<Vec<AxisValue>> {
    let (name, values) = text
        .split_once('=')
        .with_context(|| format!("axis '{text}' is not of the form name=v1,v2,..."))?;
    let name = name.trim();
    let raw: Vec<&str> = values.split(',').map(str::trim).collect();
    if raw.is_empty() || raw.iter().any(|v| v.is_empty()) {
        bail!("axis '{text}' has empty values");
    }
    let parse_f64 = |v: &str| -> Result<f64> {
        v.parse::<f64>()
            .with_context(|| format!("'{v}' is not a number"))
    };
    let parse_usize = |v: &str| -> Result<usize> {
        v.parse::<usize>()
            .with_context(|| format!("'{v}' is not a positive integer"))
    };
    raw.iter()
        .map(|v| match name {
            "epsilon_margin" => Ok(AxisValue::EpsilonMargin(parse_f64(v)?)),
            "n_augment" => Ok(AxisValue::NAugment(parse_usize(v)?)),
            "mixture_weight" => Ok(AxisValue::MixtureWeight(if *v == "adaptive" {
                None
            } else {
                Some(parse_f64(v)?)
            })),
            "batch_size" => Ok(AxisValue::BatchSize(parse_usize(v)?)),
            "learning_rate" => Ok(AxisValue::LearningRate(parse_f64(v)?)),
            "order_seed" => Ok(AxisValue::OrderSeed(
                v.parse::<u64>()
                    .with_context(|| format!("'{v}' is not a seed"))?,
            )),
            other => bail!(
                "unknown sweep axis '{other}'; valid: epsilon_margin, n_augment, \
                 mixture_weight, batch_size, learning_rate, order_seed"
            ),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: String,
    pub label: String,
    /// "ok" or "failed: <reason>"; failures leave the metrics empty.
    pub status: String,
    pub mixed_error: Option<f64>,
    pub mixed_nll: Option<f64>,
    pub mixed_brier: Option<f64>,
    pub mean_alpha: Option<f64>,
    pub out_dir: String,
}

/// Runs the sweep and writes `sweep.csv` plus `sweep_summary.json` under
/// `out_root`.
pub fn run_sweep(
    base: &ExperimentSpec,
    axis_text: &str,
    out_root: &Path,
) -> Result<Vec<SweepRow>> {
    let values = parse_axis(axis_text)?;
    std::fs::create_dir_all(out_root)
        .with_context(|| format!("cannot create {}", out_root.display()))?;

    // Every axis leaves dataset, model, pretraining and warm-up untouched,
    // so the source posterior is built once and shared.
    let task = prepare_task(base)?;
    let source: VariationalNet = build_source(base, &task)?.net;

    let mut rows = Vec::with_capacity(values.len());
    for value in &values {
        let label = value.label();
        let mut spec = base.clone();
        value.apply(&mut spec);
        spec.name = format!("{}_{}", base.name, label);
        let point_dir = out_root.join(&label);

        let row = match run_experiment(&spec, Some(source.clone_frozen()), Some(&point_dir)) {
            Ok(artifacts) => {
                let o = &artifacts.record.overall;
                SweepRow {
                    axis: value.axis_name().to_string(),
                    label,
                    status: "ok".to_string(),
                    mixed_error: Some(o.mixed.error),
                    mixed_nll: Some(o.mixed.nll),
                    mixed_brier: Some(o.mixed.brier),
                    mean_alpha: Some(o.mean_alpha),
                    out_dir: point_dir.display().to_string(),
                }
            }
            Err(e) => SweepRow {
                axis: value.axis_name().to_string(),
                label,
                status: format!("failed: {e:#}").replace(',', ";"),
                mixed_error: None,
                mixed_nll: None,
                mixed_brier: None,
                mean_alpha: None,
                out_dir: point_dir.display().to_string(),
            },
        };
        rows.push(row);
    }

    write_outputs(out_root, &rows)?;
    Ok(rows)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_outputs(out_root: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut csv = String::from(
        "axis,label,status,mixed_error,mixed_nll,mixed_brier,mean_alpha,out_dir\n",
    );
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.label,
            r.status,
            opt_cell(r.mixed_error),
            opt_cell(r.mixed_nll),
            opt_cell(r.mixed_brier),
            opt_cell(r.mean_alpha),
            r.out_dir,
        ));
    }
    std::fs::write(out_root.join("sweep.csv"), csv)?;

    let ok_errors: Vec<f64> = rows.iter().filter_map(|r| r.mixed_error).collect();
    let aggregate = if ok_errors.is_empty() {
        serde_json::Value::Null
    } else {
        let n = ok_errors.len() as f64;
        let mean = ok_errors.iter().sum::<f64>() / n;
        let var = ok_errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        let best = rows
            .iter()
            .filter(|r| r.mixed_error.is_some())
            .min_by(|a, b| a.mixed_error.partial_cmp(&b.mixed_error).unwrap())
            .map(|r| r.label.clone());
        serde_json::json!({
            "points_ok": ok_errors.len(),
            "mean_mixed_error": mean,
            "std_mixed_error": var.sqrt(),
            "best_label": best,
        })
    };
    let summary = serde_json::json!({
        "axis": rows.first().map(|r| r.axis.clone()),
        "rows": rows.iter().map(|r| serde_json::json!({
            "label": r.label,
            "status": r.status,
            "mixed_error": r.mixed_error,
            "mixed_nll": r.mixed_nll,
            "mixed_brier": r.mixed_brier,
            "mean_alpha": r.mean_alpha,
            "out_dir": r.out_dir,
        })).collect::<Vec<_>>(),
        "aggregate": aggregate,
    });
    std::fs::write(
        out_root.join("sweep_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}
