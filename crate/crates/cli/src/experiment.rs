//! End-to-end experiment orchestration.
//!
//! A run flows through five phases, each driven by its own generator
//! derived from the experiment seed: task synthesis, source pretraining,
//! variational warm-up, stream construction, and adaptation. Separate
//! streams mean a change to, say, the adaptation settings leaves the data
//! and the source model bit-identical, which is what makes method
//! comparisons and sweeps meaningful.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vcotta::engine::{run_stream, AdaptConfig, EngineState, MAX_CONSECUTIVE_SKIPS};
use vcotta::metrics::{BatchRecord, RunRecord, Scores};
use vcotta::objectives::{entropy_loss_and_grads, LossBreakdown};
use vcotta::stream::{build_schedule, AugmentPolicy, BlobMeta, DomainStream, LabeledDataset};
use vcotta::varnet::VariationalNet;
use vcotta::warmup::{
    pretrain_source, variational_warmup, DeterministicNet, PretrainOutcome, WarmupOutcome,
};
use vcotta::{CoreError, RngState};

use crate::checkpoint::{save_variational, SidecarMeta};
use crate::spec::{ExperimentSpec, Method};

const SALT_DATA: u64 = 1;
const SALT_PRETRAIN: u64 = 2;
const SALT_WARMUP: u64 = 3;
const SALT_STREAM: u64 = 4;
const SALT_ADAPT: u64 = 5;

fn phase_rng(seed: u64, salt: u64) -> RngState {
    RngState::new(RngState::derive_seed(seed, salt))
}

pub struct PreparedTask {
    pub meta: BlobMeta,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Synthesizes the blob task for a spec; depends only on the dataset
/// section and the seed.
pub fn prepare_task(spec: &ExperimentSpec) -> Result<PreparedTask> {
    let d = &spec.dataset;
    let mut rng = phase_rng(spec.seed, SALT_DATA);
    let meta = BlobMeta::generate(d.classes, d.dim, d.spread, &mut rng)?;
    let train = meta.sample(d.train_per_class, &mut rng)?;
    let test = meta.sample(d.test_per_class, &mut rng)?;
    Ok(PreparedTask { meta, train, test })
}

/// Pretraining alone, for the staged checkpoint workflow.
pub fn pretrain_only(spec: &ExperimentSpec, task: &PreparedTask) -> Result<PretrainOutcome> {
    Ok(pretrain_source(
        &spec.arch(),
        &task.train,
        &spec.pretrain.to_config(),
        &mut phase_rng(spec.seed, SALT_PRETRAIN),
    )?)
}

/// Warm-up alone, from an existing deterministic net.
pub fn warmup_only(
    spec: &ExperimentSpec,
    det: &DeterministicNet,
    task: &PreparedTask,
) -> Result<WarmupOutcome> {
    Ok(variational_warmup(
        det,
        &task.train,
        &spec.warmup.to_config(),
        &mut phase_rng(spec.seed, SALT_WARMUP),
    )?)
}

pub struct SourceOutcome {
    pub det: DeterministicNet,
    pub net: VariationalNet,
    pub pretrain_converged: bool,
    pub det_train_error: f64,
    pub warm_train_error: f64,
    pub degraded: bool,
}

/// Pretrains the deterministic source and warm-starts the posterior.
pub fn build_source(spec: &ExperimentSpec, task: &PreparedTask) -> Result<SourceOutcome> {
    let arch = spec.arch();
    let pre = pretrain_source(
        &arch,
        &task.train,
        &spec.pretrain.to_config(),
        &mut phase_rng(spec.seed, SALT_PRETRAIN),
    )?;
    let warm = variational_warmup(
        &pre.net,
        &task.train,
        &spec.warmup.to_config(),
        &mut phase_rng(spec.seed, SALT_WARMUP),
    )?;
    Ok(SourceOutcome {
        det: pre.net,
        net: warm.net,
        pretrain_converged: pre.converged,
        det_train_error: warm.det_train_error,
        warm_train_error: warm.warm_train_error,
        degraded: warm.degraded,
    })
}

/// Builds the corruption stream over the task's test split. The stream
/// seed is `schedule.order_seed` when set, so sweeps can reshuffle the
/// stream while everything else stays fixed.
pub fn build_stream(spec: &ExperimentSpec, task: &PreparedTask) -> Result<DomainStream> {
    let (kind, params) = spec.schedule.to_plan()?;
    let stream_seed = spec.schedule.order_seed.unwrap_or(spec.seed);
    Ok(build_schedule(
        kind,
        &task.test,
        &params,
        &mut phase_rng(stream_seed, SALT_STREAM),
    )?)
}

pub struct MethodOutcome {
    pub record: RunRecord,
    pub student: Option<VariationalNet>,
    pub teacher: Option<VariationalNet>,
}

/// Runs one method over a prebuilt stream.
pub fn execute_method(
    method: Method,
    source: &VariationalNet,
    stream: &DomainStream,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<MethodOutcome> {
    match method {
        Method::Vcotta => {
            let mut state = EngineState::new(source.clone_frozen());
            let record = run_stream(&mut state, stream, cfg, &mut phase_rng(seed, SALT_ADAPT))?;
            Ok(MethodOutcome {
                record,
                student: Some(state.student),
                teacher: Some(state.teacher),
            })
        }
        Method::SourceOnly => Ok(MethodOutcome {
            record: run_source_only(source, stream)?,
            student: None,
            teacher: None,
        }),
        Method::EntropyMin => {
            let (record, student) =
                run_entropy_min(source, stream, cfg, &mut phase_rng(seed, SALT_ADAPT))?;
            Ok(MethodOutcome {
                record,
                student: Some(student),
                teacher: None,
            })
        }
    }
}

/// Prediction-only baseline: the frozen source serves every batch. All
/// three score heads coincide and `alpha` is pinned at 1.
fn run_source_only(source: &VariationalNet, stream: &DomainStream) -> Result<RunRecord> {
    let mut records = Vec::new();
    for (segment_index, segment) in stream.segments.iter().enumerate() {
        for (batch_index, (batch, labels)) in
            segment.batches.iter().zip(&segment.labels).enumerate()
        {
            let probs = source.forward_mean(batch)?.softmax_rows();
            let scores = Scores::compute(&probs, labels)?;
            records.push(BatchRecord {
                segment_index,
                kind: segment.op.kind.name(),
                severity: segment.op.severity,
                batch_index,
                sample_count: labels.len(),
                alpha: 1.0,
                loss: None,
                skipped: false,
                mixed: scores,
                source: scores,
                teacher: scores,
            });
        }
    }
    Ok(RunRecord::from_batches(records)?)
}

/// Entropy-minimization baseline: a single student posterior descends its
/// own predictive entropy with the same optimizer settings, no teacher and
/// no anchors. The source head is kept for reference scoring; `alpha` is
/// pinned at 0.
fn run_entropy_min(
    source: &VariationalNet,
    stream: &DomainStream,
    cfg: &AdaptConfig,
    rng: &mut RngState,
) -> Result<(RunRecord, VariationalNet)> {
    let mut student = source.clone_frozen();
    let mut records = Vec::new();
    let mut consecutive_skips = 0usize;
    let mut step = 0usize;
    for (segment_index, segment) in stream.segments.iter().enumerate() {
        for (batch_index, (batch, labels)) in
            segment.batches.iter().zip(&segment.labels).enumerate()
        {
            let student_probs = student.forward_mean(batch)?.softmax_rows();
            let source_probs = source.forward_mean(batch)?.softmax_rows();
            let student_scores = Scores::compute(&student_probs, labels)?;

            let (entropy, grads) = entropy_loss_and_grads(&student, batch, cfg.n_mc, rng)?;
            let applied = entropy.is_finite() && grads.is_finite();
            if applied {
                student.apply_sgd(&grads, cfg.learning_rate, None);
                consecutive_skips = 0;
            } else {
                consecutive_skips += 1;
                if consecutive_skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(CoreError::NonFiniteRun {
                        step,
                        consecutive: consecutive_skips,
                    }
                    .into());
                }
            }
            step += 1;

            records.push(BatchRecord {
                segment_index,
                kind: segment.op.kind.name(),
                severity: segment.op.severity,
                batch_index,
                sample_count: labels.len(),
                alpha: 0.0,
                loss: Some(LossBreakdown {
                    total: entropy,
                    ce_term: entropy,
                    kl_source_term: 0.0,
                    kl_teacher_term: 0.0,
                    alpha_used: 0.0,
                }),
                skipped: !applied,
                mixed: student_scores,
                source: Scores::compute(&source_probs, labels)?,
                teacher: student_scores,
            });
        }
    }
    Ok((RunRecord::from_batches(records)?, student))
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub record: RunRecord,
    pub source: VariationalNet,
    pub source_summary: Option<SourceOutcome>,
}

/// Runs a full experiment and writes its artifacts.
///
/// `source_override` skips pretraining and warm-up, adapting from the
/// given posterior instead (it must match the configured dataset and
/// architecture). Artifacts: the canonical config echo, three CSVs
/// (per-batch, per-segment, overall), checkpoints of the source and of any
/// adapted nets, and a JSON summary.
pub fn run_experiment(
    spec: &ExperimentSpec,
    source_override: Option<VariationalNet>,
    cli_out: Option<&Path>,
) -> Result<RunArtifacts> {
    let task = prepare_task(spec)?;
    let (source, source_summary) = match source_override {
        Some(net) => {
            if net.input_dim() != spec.dataset.dim || net.class_count != spec.dataset.classes {
                bail!(
                    "source checkpoint is a {}-input {}-class net, but the config asks for {} inputs and {} classes",
                    net.input_dim(),
                    net.class_count,
                    spec.dataset.dim,
                    spec.dataset.classes
                );
            }
            (net, None)
        }
        None => {
            let built = build_source(spec, &task)?;
            (built.net.clone_frozen(), Some(built))
        }
    };

    let stream = build_stream(spec, &task)?;
    let cfg = spec.adapt.to_config(AugmentPolicy::for_blobs(&task.meta))?;
    let outcome = execute_method(spec.method, &source, &stream, &cfg, spec.seed)?;

    let out_dir = spec.resolved_out_dir(cli_out);
    write_artifacts(spec, &out_dir, &source, &outcome, source_summary.as_ref())?;
    Ok(RunArtifacts {
        out_dir,
        record: outcome.record,
        source,
        source_summary,
    })
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn scores_cells(s: &Scores) -> Vec<String> {
    vec![fmt(s.error), fmt(s.nll), fmt(s.brier)]
}

fn write_artifacts(
    spec: &ExperimentSpec,
    out_dir: &Path,
    source: &VariationalNet,
    outcome: &MethodOutcome,
    source_summary: Option<&SourceOutcome>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let hash = spec.config_hash()?;
    std::fs::write(out_dir.join("config.toml"), spec.canonical_toml()?)?;

    let record = &outcome.record;
    let per_batch: Vec<Vec<String>> = record
        .batches
        .iter()
        .enumerate()
        .map(|(step, b)| {
            let mut row = vec![
                step.to_string(),
                b.segment_index.to_string(),
                b.kind.to_string(),
                b.severity.to_string(),
                b.batch_index.to_string(),
                b.sample_count.to_string(),
                fmt(b.alpha),
                b.skipped.to_string(),
            ];
            match &b.loss {
                Some(l) => row.extend([
                    fmt(l.total),
                    fmt(l.ce_term),
                    fmt(l.kl_source_term),
                    fmt(l.kl_teacher_term),
                ]),
                None => row.extend(["", "", "", ""].map(String::from)),
            }
            row.extend(scores_cells(&b.mixed));
            row.extend(scores_cells(&b.source));
            row.extend(scores_cells(&b.teacher));
            row
        })
        .collect();
    write_csv(
        &out_dir.join("per_batch.csv"),
        &[
            "step", "segment_index", "kind", "severity", "batch_index", "sample_count", "alpha",
            "skipped", "loss_total", "loss_ce", "loss_kl_source", "loss_kl_teacher",
            "mixed_error", "mixed_nll", "mixed_brier", "source_error", "source_nll",
            "source_brier", "teacher_error", "teacher_nll", "teacher_brier",
        ],
        &per_batch,
    )?;

    let per_segment: Vec<Vec<String>> = record
        .segments
        .iter()
        .map(|s| {
            let mut row = vec![
                s.segment_index.to_string(),
                s.kind.to_string(),
                s.severity.to_string(),
                s.batch_count.to_string(),
                s.sample_count.to_string(),
                fmt(s.mean_alpha),
            ];
            row.extend(scores_cells(&s.mixed));
            row.extend(scores_cells(&s.source));
            row.extend(scores_cells(&s.teacher));
            row
        })
        .collect();
    write_csv(
        &out_dir.join("per_segment.csv"),
        &[
            "segment_index", "kind", "severity", "batch_count", "sample_count", "mean_alpha",
            "mixed_error", "mixed_nll", "mixed_brier", "source_error", "source_nll",
            "source_brier", "teacher_error", "teacher_nll", "teacher_brier",
        ],
        &per_segment,
    )?;

    let o = &record.overall;
    let mut overall_row = vec![
        o.batch_count.to_string(),
        o.sample_count.to_string(),
        o.skipped_batches.to_string(),
        fmt(o.mean_alpha),
    ];
    overall_row.extend(scores_cells(&o.mixed));
    overall_row.extend(scores_cells(&o.source));
    overall_row.extend(scores_cells(&o.teacher));
    write_csv(
        &out_dir.join("overall.csv"),
        &[
            "batch_count", "sample_count", "skipped_batches", "mean_alpha", "mixed_error",
            "mixed_nll", "mixed_brier", "source_error", "source_nll", "source_brier",
            "teacher_error", "teacher_nll", "teacher_brier",
        ],
        &[overall_row],
    )?;

    let meta = |created_by: &str| SidecarMeta {
        seed: spec.seed,
        config_sha256: hash.clone(),
        created_by: created_by.to_string(),
        kind: "variational".to_string(),
        train_error: source_summary.map(|s| s.warm_train_error),
    };
    save_variational(&out_dir.join("source.ckpt"), source, &meta("run"))?;
    if let Some(student) = &outcome.student {
        save_variational(&out_dir.join("student.ckpt"), student, &meta("adapt"))?;
    }
    if let Some(teacher) = &outcome.teacher {
        save_variational(&out_dir.join("teacher.ckpt"), teacher, &meta("adapt"))?;
    }

    let source_block = source_summary.map(|s| {
        serde_json::json!({
            "pretrain_converged": s.pretrain_converged,
            "det_train_error": s.det_train_error,
            "warm_train_error": s.warm_train_error,
            "degraded": s.degraded,
        })
    });
    let summary = serde_json::json!({
        "name": spec.name,
        "method": spec.method.name(),
        "seed": spec.seed,
        "config_sha256": hash,
        "source": source_block,
        "overall": {
            "batch_count": o.batch_count,
            "sample_count": o.sample_count,
            "skipped_batches": o.skipped_batches,
            "mean_alpha": o.mean_alpha,
            "mixed":   { "error": o.mixed.error,   "nll": o.mixed.nll,   "brier": o.mixed.brier },
            "source":  { "error": o.source.error,  "nll": o.source.nll,  "brier": o.source.brier },
            "teacher": { "error": o.teacher.error, "nll": o.teacher.nll, "brier": o.teacher.brier },
        },
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}
