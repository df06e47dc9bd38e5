//! Loss terms and their analytic gradients.
//!
//! All losses are batch means. Cross-entropy targets come from a teacher
//! distribution given in log space; the teacher is always treated as a
//! constant, so gradients flow only through the student logits. The full
//! student objective combines a (symmetric) cross-entropy to the teacher
//! with KL anchors to the frozen source posterior and the current teacher
//! posterior, mixed by a weight `alpha` computed elsewhere:
//!
//!   total = ce + alpha * kl_source + (1 - alpha) * kl_teacher
//!
//! where `ce` already includes its scalar weight and the KL terms their
//! common scale factor. That identity is load-bearing; tests pin it.

use crate::engine::AdaptConfig;
use crate::error::{CoreError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor2;
use crate::varnet::{GradientSet, VariationalNet};

/// Probabilities below this are clamped before entering a logarithm in the
/// reverse cross-entropy term.
pub const PROB_FLOOR: f64 = 1e-12;

/// Additive decomposition of one student update's objective.
///
/// `total == ce_term + alpha_used * kl_source_term + (1 - alpha_used) *
/// kl_teacher_term` up to round-off; the KL terms carry their configured
/// scale factor, the CE term its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_term: f64,
    pub kl_source_term: f64,
    pub kl_teacher_term: f64,
    pub alpha_used: f64,
}

fn check_same_shape(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Teacher targets must be normalized log-probabilities: each row's
/// log-sum-exp must vanish to within 1e-9.
pub fn validate_teacher_log_probs(t: &Tensor2) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        if lse.abs() > 1e-9 {
            return Err(CoreError::Domain {
                op: "teacher_log_probs",
                msg: format!("row {r} log-sum-exp is {lse}, not normalized"),
            });
        }
    }
    Ok(())
}

/// Cross-entropy from a constant teacher distribution to the student's
/// softmax: mean over rows of -sum_c exp(t_c) * log q_c.
pub fn ce_to_teacher(student_logits: &Tensor2, teacher_log_probs: &Tensor2) -> Result<f64> {
    Ok(ce_value_and_grad(student_logits, teacher_log_probs)?.0)
}

/// Value and d/d logits of [`ce_to_teacher`].
pub fn ce_value_and_grad(
    student_logits: &Tensor2,
    teacher_log_probs: &Tensor2,
) -> Result<(f64, Tensor2)> {
    check_same_shape("ce_to_teacher", student_logits, teacher_log_probs)?;
    validate_teacher_log_probs(teacher_log_probs)?;
    let n = student_logits.rows() as f64;
    let log_q = student_logits.log_softmax_rows();
    let q = student_logits.softmax_rows();
    let mut value = 0.0;
    let mut grad = Tensor2::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        for c in 0..q.cols() {
            let p_bar = teacher_log_probs.get(r, c).exp();
            value -= p_bar * log_q.get(r, c);
            // d/dz of -sum_c p_bar_c log softmax(z)_c = q - p_bar (teacher
            // rows sum to one).
            grad.set(r, c, (q.get(r, c) - p_bar) / n);
        }
    }
    Ok((value / n, grad))
}

/// Symmetric cross-entropy: the forward term plus the reverse term
/// -sum_c q_c * log p_bar_c, with teacher log-probabilities clamped at
/// ln(PROB_FLOOR) so a hard zero in the teacher cannot blow up the loss.
pub fn sce_to_teacher(student_logits: &Tensor2, teacher_log_probs: &Tensor2) -> Result<f64> {
    Ok(sce_value_and_grad(student_logits, teacher_log_probs)?.0)
}

/// Value and d/d logits of [`sce_to_teacher`].
pub fn sce_value_and_grad(
    student_logits: &Tensor2,
    teacher_log_probs: &Tensor2,
) -> Result<(f64, Tensor2)> {
    let (fwd, mut grad) = ce_value_and_grad(student_logits, teacher_log_probs)?;
    let clamp_floor = PROB_FLOOR.ln();
    let n = student_logits.rows() as f64;
    let q = student_logits.softmax_rows();
    let mut rev = 0.0;
    for r in 0..q.rows() {
        let t_row: Vec<f64> = teacher_log_probs
            .row(r)
            .iter()
            .map(|&t| t.max(clamp_floor))
            .collect();
        let dot: f64 = q.row(r).iter().zip(&t_row).map(|(&qc, &tc)| qc * tc).sum();
        rev -= dot;
        for c in 0..q.cols() {
            // d/dz_k of -sum_c q_c t_c = q_k (dot - t_k).
            let extra = q.get(r, c) * (dot - t_row[c]) / n;
            grad.set(r, c, grad.get(r, c) + extra);
        }
    }
    Ok((fwd + rev / n, grad))
}

/// Supervised negative log-likelihood: mean over rows of
/// -log softmax(logits)[label].
pub fn nll_supervised(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    Ok(nll_value_and_grad(logits, labels)?.0)
}

/// Value and d/d logits of [`nll_supervised`].
pub fn nll_value_and_grad(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if labels.len() != logits.rows() {
        return Err(CoreError::Domain {
            op: "nll_supervised",
            msg: format!("{} labels for {} rows", labels.len(), logits.rows()),
        });
    }
    if let Some((r, &l)) = labels
        .iter()
        .enumerate()
        .find(|&(_, &l)| l >= logits.cols())
    {
        return Err(CoreError::Domain {
            op: "nll_supervised",
            msg: format!("label {l} at row {r} exceeds class count {}", logits.cols()),
        });
    }
    let n = logits.rows() as f64;
    let log_q = logits.log_softmax_rows();
    let q = logits.softmax_rows();
    let mut value = 0.0;
    let mut grad = q.scale(1.0 / n);
    for (r, &l) in labels.iter().enumerate() {
        value -= log_q.get(r, l);
        grad.set(r, l, grad.get(r, l) - 1.0 / n);
    }
    Ok((value / n, grad))
}

/// Mean predictive entropy of the student's softmax; the objective the
/// entropy-minimization baseline descends.
pub fn mean_entropy_of_logits(logits: &Tensor2) -> f64 {
    entropy_value_and_grad(logits).0
}

/// Value and d/d logits of the mean predictive entropy. For one row,
/// dH/dz_k = -q_k (log q_k + H).
pub fn entropy_value_and_grad(logits: &Tensor2) -> (f64, Tensor2) {
    let n = logits.rows() as f64;
    let q = logits.softmax_rows();
    let log_q = logits.log_softmax_rows();
    let mut value = 0.0;
    let mut grad = Tensor2::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        let h: f64 = q
            .row(r)
            .iter()
            .zip(log_q.row(r))
            .map(|(&p, &lp)| -p * lp)
            .sum();
        value += h;
        for c in 0..q.cols() {
            grad.set(r, c, -q.get(r, c) * (log_q.get(r, c) + h) / n);
        }
    }
    (value / n, grad)
}

/// The full student objective and its gradients for one batch.
///
/// The student's logits are drawn through the sampled forward pass with the
/// noise held fixed, so the cross-entropy gradient is the pathwise
/// derivative at that draw (averaged over `cfg.n_mc` draws). KL anchors to
/// `source` and `teacher` enter in closed form, scaled by `cfg.kl_scale`
/// and mixed by `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn student_loss_and_grads(
    student: &VariationalNet,
    batch: &Tensor2,
    teacher_log_probs: &Tensor2,
    source: &VariationalNet,
    teacher: &VariationalNet,
    alpha: f64,
    cfg: &AdaptConfig,
    rng: &mut RngState,
) -> Result<(LossBreakdown, GradientSet)> {
    if !student.same_arch(source) || !student.same_arch(teacher) {
        return Err(CoreError::Domain {
            op: "student_loss_and_grads",
            msg: "student, source and teacher architectures differ".to_string(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::Domain {
            op: "student_loss_and_grads",
            msg: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    if cfg.n_mc == 0 {
        return Err(CoreError::Domain {
            op: "student_loss_and_grads",
            msg: "n_mc must be at least 1".to_string(),
        });
    }

    let mut ce_acc = 0.0;
    let mut grads = GradientSet::zeros_like(student);
    for _ in 0..cfg.n_mc {
        let noise = student.sample_noise(batch.rows(), rng);
        let trace = student.forward_with_noise(batch, &noise)?;
        let (ce, dlogits) = if cfg.use_sce {
            sce_value_and_grad(&trace.logits, teacher_log_probs)?
        } else {
            ce_value_and_grad(&trace.logits, teacher_log_probs)?
        };
        ce_acc += ce;
        let draw_grads = student.backprop(&trace, &noise, &dlogits)?;
        grads.add_scaled(&draw_grads, cfg.lambda_ce / cfg.n_mc as f64);
    }
    let ce_term = cfg.lambda_ce * ce_acc / cfg.n_mc as f64;

    let kl_source_term = cfg.kl_scale * student.kl_between(source)?;
    let kl_teacher_term = cfg.kl_scale * student.kl_between(teacher)?;
    let g_source = student.kl_gradients(source)?;
    let g_teacher = student.kl_gradients(teacher)?;
    grads.add_scaled(&g_source, alpha * cfg.kl_scale);
    grads.add_scaled(&g_teacher, (1.0 - alpha) * cfg.kl_scale);

    let breakdown = LossBreakdown {
        total: ce_term + alpha * kl_source_term + (1.0 - alpha) * kl_teacher_term,
        ce_term,
        kl_source_term,
        kl_teacher_term,
        alpha_used: alpha,
    };
    Ok((breakdown, grads))
}

/// Mean predictive entropy of sampled forward passes and its pathwise
/// gradients; the update rule of the entropy-minimization baseline.
pub fn entropy_loss_and_grads(
    net: &VariationalNet,
    batch: &Tensor2,
    n_mc: usize,
    rng: &mut RngState,
) -> Result<(f64, GradientSet)> {
    if n_mc == 0 {
        return Err(CoreError::Domain {
            op: "entropy_loss_and_grads",
            msg: "n_mc must be at least 1".to_string(),
        });
    }
    let mut value = 0.0;
    let mut grads = GradientSet::zeros_like(net);
    for _ in 0..n_mc {
        let noise = net.sample_noise(batch.rows(), rng);
        let trace = net.forward_with_noise(batch, &noise)?;
        let (h, dlogits) = entropy_value_and_grad(&trace.logits);
        value += h;
        let g = net.backprop(&trace, &noise, &dlogits)?;
        grads.add_scaled(&g, 1.0 / n_mc as f64);
    }
    Ok((value / n_mc as f64, grads))
}
