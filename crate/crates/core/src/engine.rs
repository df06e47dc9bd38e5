//! The adaptation engine.
//!
//! State is a mean-teacher triple over one architecture: a trainable
//! student, an exponential-moving-average teacher, and the frozen source
//! posterior the run started from. Each incoming batch is augmented once;
//! the same variants then drive three things:
//!
//! 1. the mixing weight `alpha`, a per-augmentation softmax over the batch
//!    mean predictive entropies of source and teacher, averaged across
//!    variants (high teacher entropy pulls the run back toward the source),
//! 2. the teacher targets, a confidence-filtered average over variants,
//! 3. nothing else: the student update consumes the raw batch.
//!
//! Predictions are recorded before the update so every score reflects the
//! model that actually met the batch. The served distribution mixes the
//! source and teacher mean-forward softmaxes with the same `alpha`.

use crate::error::{CoreError, Result};
use crate::metrics::{BatchRecord, RunRecord, Scores};
use crate::objectives::{student_loss_and_grads, LossBreakdown};
use crate::rng::RngState;
use crate::stream::{augment, AugmentPolicy, DomainStream};
use crate::tensor::Tensor2;
use crate::varnet::{sigmoid, VariationalNet};

/// Consecutive skipped (non-finite) updates tolerated before a run aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 5;

/// Per-row confidence used by the augmentation filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceFn {
    /// Probability of the argmax class.
    MaxProb,
    /// Negative Shannon entropy; orders rows the same way as certainty.
    NegEntropy,
}

impl ConfidenceFn {
    pub fn name(&self) -> &'static str {
        match self {
            ConfidenceFn::MaxProb => "max_prob",
            ConfidenceFn::NegEntropy => "neg_entropy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "max_prob" => Ok(ConfidenceFn::MaxProb),
            "neg_entropy" => Ok(ConfidenceFn::NegEntropy),
            other => Err(CoreError::Domain {
                op: "ConfidenceFn::from_name",
                msg: format!("unknown confidence function '{other}'"),
            }),
        }
    }

    fn of_row(&self, probs: &[f64]) -> f64 {
        match self {
            ConfidenceFn::MaxProb => probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ConfidenceFn::NegEntropy => probs
                .iter()
                .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                .sum(),
        }
    }
}

/// Which head's entropy sits in the numerator of the mixing weight. With
/// `TeacherEntropy` (the default) a drifting, uncertain teacher pushes
/// `alpha` toward 1 and the run leans back on the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaNumerator {
    TeacherEntropy,
    SourceEntropy,
}

impl AlphaNumerator {
    pub fn name(&self) -> &'static str {
        match self {
            AlphaNumerator::TeacherEntropy => "teacher_entropy",
            AlphaNumerator::SourceEntropy => "source_entropy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "teacher_entropy" => Ok(AlphaNumerator::TeacherEntropy),
            "source_entropy" => Ok(AlphaNumerator::SourceEntropy),
            other => Err(CoreError::Domain {
                op: "AlphaNumerator::from_name",
                msg: format!("unknown alpha numerator '{other}'"),
            }),
        }
    }
}

/// Everything the per-batch update needs to know.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    /// Weight on the (symmetric) cross-entropy term.
    pub lambda_ce: f64,
    /// Temperature of the entropy softmax behind `alpha`.
    pub tau: f64,
    /// Confidence margin an augmented view must clear to enter the teacher
    /// target; exactly -1.0 disables the filter.
    pub epsilon_margin: f64,
    /// Teacher EMA decay; 1.0 freezes the teacher, 0.0 copies the student.
    pub beta_ema: f64,
    pub learning_rate: f64,
    pub n_augment: usize,
    /// Monte Carlo draws per student update.
    pub n_mc: usize,
    /// Common scale on both KL anchor terms.
    pub kl_scale: f64,
    /// Add the reverse (teacher-side) cross-entropy term.
    pub use_sce: bool,
    pub confidence: ConfidenceFn,
    pub alpha_numerator: AlphaNumerator,
    /// Overrides the entropy-derived mixing weight when set.
    pub alpha_fixed: Option<f64>,
    pub augment: AugmentPolicy,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            tau: 1.0,
            epsilon_margin: 1e-2,
            beta_ema: 0.999,
            learning_rate: 1e-4,
            n_augment: 32,
            n_mc: 1,
            kl_scale: 0.02,
            use_sce: true,
            confidence: ConfidenceFn::MaxProb,
            alpha_numerator: AlphaNumerator::TeacherEntropy,
            alpha_fixed: None,
            augment: AugmentPolicy::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| CoreError::Domain {
            op: "AdaptConfig::validate",
            msg,
        };
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(bad(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.beta_ema) {
            return Err(bad(format!("beta_ema {} outside [0, 1]", self.beta_ema)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(bad(format!("learning_rate {} invalid", self.learning_rate)));
        }
        if !(self.lambda_ce.is_finite() && self.lambda_ce >= 0.0) {
            return Err(bad(format!("lambda_ce {} invalid", self.lambda_ce)));
        }
        if !(self.kl_scale.is_finite() && self.kl_scale >= 0.0) {
            return Err(bad(format!("kl_scale {} invalid", self.kl_scale)));
        }
        if self.n_augment == 0 {
            return Err(bad("n_augment must be at least 1".to_string()));
        }
        if self.n_mc == 0 {
            return Err(bad("n_mc must be at least 1".to_string()));
        }
        if !(self.epsilon_margin == -1.0
            || (self.epsilon_margin.is_finite() && self.epsilon_margin >= 0.0))
        {
            return Err(bad(format!(
                "epsilon_margin must be nonnegative or the sentinel -1, got {}",
                self.epsilon_margin
            )));
        }
        if let Some(a) = self.alpha_fixed {
            if !(0.0..=1.0).contains(&a) {
                return Err(bad(format!("alpha_fixed {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The mean-teacher triple plus run counters.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub student: VariationalNet,
    pub teacher: VariationalNet,
    pub source: VariationalNet,
    pub step_count: usize,
    pub alpha_trace: Vec<f64>,
}

impl EngineState {
    /// Starts a run with student and teacher both at the source posterior.
    pub fn new(source: VariationalNet) -> Self {
        Self {
            student: source.clone_frozen(),
            teacher: source.clone_frozen(),
            source,
            step_count: 0,
            alpha_trace: Vec::new(),
        }
    }
}

fn mean_entropy_of_probs(probs: &Tensor2) -> Result<f64> {
    let h = probs.entropy_rows()?;
    Ok(h.iter().sum::<f64>() / h.len() as f64)
}

fn mean_predictive_entropy(net: &VariationalNet, x: &Tensor2) -> Result<f64> {
    mean_entropy_of_probs(&net.forward_mean(x)?.softmax_rows())
}

/// The source-vs-teacher mixing weight from a shared set of augmented
/// views: per view, a two-way entropy softmax at temperature `tau`,
/// averaged over views. Identical nets give exactly 0.5.
pub fn compute_alpha(
    source: &VariationalNet,
    teacher: &VariationalNet,
    augs: &[Tensor2],
    cfg: &AdaptConfig,
) -> Result<f64> {
    if augs.is_empty() {
        return Err(CoreError::Domain {
            op: "compute_alpha",
            msg: "no augmented views supplied".to_string(),
        });
    }
    let mut acc = 0.0;
    for view in augs {
        let h_source = mean_predictive_entropy(source, view)?;
        let h_teacher = mean_predictive_entropy(teacher, view)?;
        let gap = match cfg.alpha_numerator {
            AlphaNumerator::TeacherEntropy => h_teacher - h_source,
            AlphaNumerator::SourceEntropy => h_source - h_teacher,
        };
        acc += sigmoid(gap / cfg.tau);
    }
    Ok(acc / augs.len() as f64)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max
}

fn row_confidences(probs: &Tensor2, confidence: ConfidenceFn) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| confidence.of_row(probs.row(r)))
        .collect()
}

/// Core of the augmentation filter, over precomputed per-view teacher
/// outputs. Per row: average (in log space, then renormalize) the views
/// whose confidence beats the raw prediction's by more than `epsilon`;
/// fall back to the raw row when none do. `epsilon == -1.0` admits all.
fn combine_filtered(
    raw_log_probs: &Tensor2,
    raw_conf: &[f64],
    view_log_probs: &[Tensor2],
    view_conf: &[Vec<f64>],
    epsilon: f64,
) -> Tensor2 {
    let classes = raw_log_probs.cols();
    let mut out = Tensor2::zeros(raw_log_probs.rows(), classes);
    let mut scratch = Vec::with_capacity(view_log_probs.len());
    for r in 0..raw_log_probs.rows() {
        let accepted: Vec<usize> = (0..view_log_probs.len())
            .filter(|&v| epsilon == -1.0 || view_conf[v][r] > raw_conf[r] + epsilon)
            .collect();
        if accepted.is_empty() {
            let src = raw_log_probs.row(r).to_vec();
            out.row_mut(r).copy_from_slice(&src);
            continue;
        }
        // Mean of the accepted probability rows, computed in log space,
        // then renormalized to kill round-off drift.
        let n = (accepted.len() as f64).ln();
        let mut row: Vec<f64> = (0..classes)
            .map(|c| {
                scratch.clear();
                scratch.extend(accepted.iter().map(|&v| view_log_probs[v].get(r, c)));
                log_sum_exp(&scratch) - n
            })
            .collect();
        let norm = log_sum_exp(&row);
        for v in &mut row {
            *v -= norm;
        }
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

/// Teacher targets for one batch: log probabilities averaged over the
/// augmented views that look more confident than the raw batch by at least
/// `epsilon`, renormalized in log space. Rows where no view clears the
/// margin fall back to the teacher's raw prediction; `epsilon == -1.0`
/// admits every view.
pub fn filter_teacher_log_probs(
    teacher: &VariationalNet,
    batch: &Tensor2,
    augs: &[Tensor2],
    epsilon: f64,
    confidence: ConfidenceFn,
) -> Result<Tensor2> {
    if augs.is_empty() {
        return Err(CoreError::Domain {
            op: "filter_teacher_log_probs",
            msg: "no augmented views supplied".to_string(),
        });
    }
    let raw_logits = teacher.forward_mean(batch)?;
    let raw_log_probs = raw_logits.log_softmax_rows();
    let raw_conf = row_confidences(&raw_logits.softmax_rows(), confidence);

    let mut view_log_probs = Vec::with_capacity(augs.len());
    let mut view_conf = Vec::with_capacity(augs.len());
    for view in augs {
        let logits = teacher.forward_mean(view)?;
        view_conf.push(row_confidences(&logits.softmax_rows(), confidence));
        view_log_probs.push(logits.log_softmax_rows());
    }
    Ok(combine_filtered(
        &raw_log_probs,
        &raw_conf,
        &view_log_probs,
        &view_conf,
        epsilon,
    ))
}

/// What gets served for one batch, recorded before any update.
#[derive(Debug, Clone)]
pub struct BatchPrediction {
    /// `alpha * source + (1 - alpha) * teacher`, row-stochastic.
    pub mixed_probs: Tensor2,
    pub source_probs: Tensor2,
    pub teacher_probs: Tensor2,
    pub alpha: f64,
    /// Row argmax of `mixed_probs`.
    pub predicted: Vec<usize>,
}

fn predict_with_views(
    state: &EngineState,
    batch: &Tensor2,
    augs: &[Tensor2],
    cfg: &AdaptConfig,
) -> Result<BatchPrediction> {
    let alpha = match cfg.alpha_fixed {
        Some(a) => a,
        None => compute_alpha(&state.source, &state.teacher, augs, cfg)?,
    };
    let source_probs = state.source.forward_mean(batch)?.softmax_rows();
    let teacher_probs = state.teacher.forward_mean(batch)?.softmax_rows();
    let mixed_probs = source_probs
        .scale(alpha)
        .add(&teacher_probs.scale(1.0 - alpha))?;
    let predicted = mixed_probs.argmax_rows();
    Ok(BatchPrediction {
        mixed_probs,
        source_probs,
        teacher_probs,
        alpha,
        predicted,
    })
}

/// Serves a prediction without touching the state.
pub fn predict(
    state: &EngineState,
    batch: &Tensor2,
    cfg: &AdaptConfig,
    rng: &mut RngState,
) -> Result<BatchPrediction> {
    let augs = augment(batch, cfg.n_augment, &cfg.augment, rng)?;
    predict_with_views(state, batch, &augs, cfg)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub prediction: BatchPrediction,
    pub loss: LossBreakdown,
    /// False when a non-finite objective turned the update into a no-op.
    pub applied: bool,
}

/// One full engine step: predict, build teacher targets, update the
/// student by SGD, track the teacher by EMA.
///
/// Equivalent to [`predict`] plus [`filter_teacher_log_probs`] over one
/// shared set of augmented views, with each view's teacher pass computed
/// once. A non-finite loss or gradient skips the parameter updates but
/// still counts the step, so a run's records stay aligned with its
/// batches.
pub fn adapt_step(
    state: &mut EngineState,
    batch: &Tensor2,
    cfg: &AdaptConfig,
    rng: &mut RngState,
) -> Result<StepOutcome> {
    let augs = augment(batch, cfg.n_augment, &cfg.augment, rng)?;

    let source_probs = state.source.forward_mean(batch)?.softmax_rows();
    let teacher_logits = state.teacher.forward_mean(batch)?;
    let teacher_probs = teacher_logits.softmax_rows();
    let raw_log_probs = teacher_logits.log_softmax_rows();
    let raw_conf = row_confidences(&teacher_probs, cfg.confidence);

    let mut alpha_acc = 0.0;
    let mut view_log_probs = Vec::with_capacity(augs.len());
    let mut view_conf = Vec::with_capacity(augs.len());
    for view in &augs {
        let logits = state.teacher.forward_mean(view)?;
        let probs = logits.softmax_rows();
        if cfg.alpha_fixed.is_none() {
            let h_teacher = mean_entropy_of_probs(&probs)?;
            let h_source = mean_predictive_entropy(&state.source, view)?;
            let gap = match cfg.alpha_numerator {
                AlphaNumerator::TeacherEntropy => h_teacher - h_source,
                AlphaNumerator::SourceEntropy => h_source - h_teacher,
            };
            alpha_acc += sigmoid(gap / cfg.tau);
        }
        view_conf.push(row_confidences(&probs, cfg.confidence));
        view_log_probs.push(logits.log_softmax_rows());
    }
    let alpha = match cfg.alpha_fixed {
        Some(a) => a,
        None => alpha_acc / augs.len() as f64,
    };

    let mixed_probs = source_probs
        .scale(alpha)
        .add(&teacher_probs.scale(1.0 - alpha))?;
    let predicted = mixed_probs.argmax_rows();
    let prediction = BatchPrediction {
        mixed_probs,
        source_probs,
        teacher_probs,
        alpha,
        predicted,
    };

    let targets = combine_filtered(
        &raw_log_probs,
        &raw_conf,
        &view_log_probs,
        &view_conf,
        cfg.epsilon_margin,
    );
    let (loss, grads) = student_loss_and_grads(
        &state.student,
        batch,
        &targets,
        &state.source,
        &state.teacher,
        prediction.alpha,
        cfg,
        rng,
    )?;
    let applied = loss.total.is_finite() && grads.is_finite();
    if applied {
        state.student.apply_sgd(&grads, cfg.learning_rate, None);
        state.teacher.ema_from(&state.student, cfg.beta_ema)?;
    }
    state.step_count += 1;
    state.alpha_trace.push(prediction.alpha);
    Ok(StepOutcome {
        prediction,
        loss,
        applied,
    })
}

/// Adapts through a whole stream, scoring every head on every batch
/// against the stream's hidden labels. More than [`MAX_CONSECUTIVE_SKIPS`]
/// skipped updates in a row abort the run.
pub fn run_stream(
    state: &mut EngineState,
    stream: &DomainStream,
    cfg: &AdaptConfig,
    rng: &mut RngState,
) -> Result<RunRecord> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut consecutive_skips = 0usize;
    for (segment_index, segment) in stream.segments.iter().enumerate() {
        for (batch_index, (batch, labels)) in
            segment.batches.iter().zip(&segment.labels).enumerate()
        {
            let outcome = adapt_step(state, batch, cfg, rng)?;
            if outcome.applied {
                consecutive_skips = 0;
            } else {
                consecutive_skips += 1;
                if consecutive_skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(CoreError::NonFiniteRun {
                        step: state.step_count,
                        consecutive: consecutive_skips,
                    });
                }
            }
            records.push(BatchRecord {
                segment_index,
                kind: segment.op.kind.name(),
                severity: segment.op.severity,
                batch_index,
                sample_count: labels.len(),
                alpha: outcome.prediction.alpha,
                loss: Some(outcome.loss),
                skipped: !outcome.applied,
                mixed: Scores::compute(&outcome.prediction.mixed_probs, labels)?,
                source: Scores::compute(&outcome.prediction.source_probs, labels)?,
                teacher: Scores::compute(&outcome.prediction.teacher_probs, labels)?,
            });
        }
    }
    RunRecord::from_batches(records)
}
