//! Scoring and run bookkeeping.
//!
//! All three scores consume a row-stochastic probability tensor and the true
//! labels. Error rate is 0/1 on the argmax, negative log likelihood clamps
//! probabilities at 1e-12 before the log, and the Brier score is the full
//! squared distance to the one-hot target (range 0..=2).

use crate::error::{CoreError, Result};
use crate::objectives::{LossBreakdown, PROB_FLOOR};
use crate::stream::CorruptionOp;
use crate::tensor::Tensor2;

fn check_labels(probs: &Tensor2, labels: &[usize], op: &'static str) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(CoreError::ShapeMismatch {
            op,
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(CoreError::Domain {
            op,
            msg: format!("label {bad} exceeds {} classes", probs.cols()),
        });
    }
    if labels.is_empty() {
        return Err(CoreError::Domain {
            op,
            msg: "empty batch".to_string(),
        });
    }
    Ok(())
}

/// Fraction of rows whose argmax disagrees with the label.
pub fn error_rate(probs: &Tensor2, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels, "error_rate")?;
    let preds = probs.argmax_rows();
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Mean negative log probability of the true class.
pub fn nll(probs: &Tensor2, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels, "nll")?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs.get(r, l).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean squared distance between the probability row and the one-hot label.
pub fn brier(probs: &Tensor2, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels, "brier")?;
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        for (c, &p) in probs.row(r).iter().enumerate() {
            let target = if c == l { 1.0 } else { 0.0 };
            total += (p - target) * (p - target);
        }
    }
    Ok(total / labels.len() as f64)
}

/// The three scores of one prediction head on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub error: f64,
    pub nll: f64,
    pub brier: f64,
}

impl Scores {
    pub fn compute(probs: &Tensor2, labels: &[usize]) -> Result<Self> {
        Ok(Self {
            error: error_rate(probs, labels)?,
            nll: nll(probs, labels)?,
            brier: brier(probs, labels)?,
        })
    }

    fn zero() -> Self {
        Self {
            error: 0.0,
            nll: 0.0,
            brier: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &Scores, w: f64) {
        self.error += w * other.error;
        self.nll += w * other.nll;
        self.brier += w * other.brier;
    }
}

/// Everything recorded about one adaptation step.
#[derive(Debug, Clone)]
pub struct BatchRecord {
    pub segment_index: usize,
    pub kind: &'static str,
    pub severity: u8,
    pub batch_index: usize,
    pub sample_count: usize,
    pub alpha: f64,
    /// Absent when the method runs prediction-only.
    pub loss: Option<LossBreakdown>,
    /// True when a non-finite objective made the step a no-op.
    pub skipped: bool,
    pub mixed: Scores,
    pub source: Scores,
    pub teacher: Scores,
}

impl BatchRecord {
    pub fn describe_op(op: CorruptionOp) -> (&'static str, u8) {
        (op.kind.name(), op.severity)
    }
}

/// Batch-averaged scores over one stream segment.
#[derive(Debug, Clone)]
pub struct SegmentSummary {
    pub segment_index: usize,
    pub kind: &'static str,
    pub severity: u8,
    pub batch_count: usize,
    pub sample_count: usize,
    pub mean_alpha: f64,
    pub mixed: Scores,
    pub source: Scores,
    pub teacher: Scores,
}

/// Batch-averaged scores over the whole run.
#[derive(Debug, Clone)]
pub struct OverallSummary {
    pub batch_count: usize,
    pub sample_count: usize,
    pub skipped_batches: usize,
    pub mean_alpha: f64,
    pub mixed: Scores,
    pub source: Scores,
    pub teacher: Scores,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub batches: Vec<BatchRecord>,
    pub segments: Vec<SegmentSummary>,
    pub overall: OverallSummary,
}

impl RunRecord {
    /// Aggregates per-batch records into per-segment and overall summaries.
    /// Every aggregate is the unweighted mean over its batches, so the
    /// overall mean equals the segment means weighted by batch count.
    pub fn from_batches(batches: Vec<BatchRecord>) -> Result<Self> {
        if batches.is_empty() {
            return Err(CoreError::Domain {
                op: "RunRecord::from_batches",
                msg: "no batches recorded".to_string(),
            });
        }
        let mut segments: Vec<SegmentSummary> = Vec::new();
        for b in &batches {
            let need_new = segments
                .last()
                .map(|s| s.segment_index != b.segment_index)
                .unwrap_or(true);
            if need_new {
                segments.push(SegmentSummary {
                    segment_index: b.segment_index,
                    kind: b.kind,
                    severity: b.severity,
                    batch_count: 0,
                    sample_count: 0,
                    mean_alpha: 0.0,
                    mixed: Scores::zero(),
                    source: Scores::zero(),
                    teacher: Scores::zero(),
                });
            }
            let seg = segments.last_mut().unwrap();
            seg.batch_count += 1;
            seg.sample_count += b.sample_count;
            seg.mean_alpha += b.alpha;
            seg.mixed.add_scaled(&b.mixed, 1.0);
            seg.source.add_scaled(&b.source, 1.0);
            seg.teacher.add_scaled(&b.teacher, 1.0);
        }
        for seg in &mut segments {
            let n = seg.batch_count as f64;
            seg.mean_alpha /= n;
            seg.mixed = Scores {
                error: seg.mixed.error / n,
                nll: seg.mixed.nll / n,
                brier: seg.mixed.brier / n,
            };
            seg.source = Scores {
                error: seg.source.error / n,
                nll: seg.source.nll / n,
                brier: seg.source.brier / n,
            };
            seg.teacher = Scores {
                error: seg.teacher.error / n,
                nll: seg.teacher.nll / n,
                brier: seg.teacher.brier / n,
            };
        }

        let n = batches.len() as f64;
        let mut overall = OverallSummary {
            batch_count: batches.len(),
            sample_count: batches.iter().map(|b| b.sample_count).sum(),
            skipped_batches: batches.iter().filter(|b| b.skipped).count(),
            mean_alpha: batches.iter().map(|b| b.alpha).sum::<f64>() / n,
            mixed: Scores::zero(),
            source: Scores::zero(),
            teacher: Scores::zero(),
        };
        for b in &batches {
            overall.mixed.add_scaled(&b.mixed, 1.0 / n);
            overall.source.add_scaled(&b.source, 1.0 / n);
            overall.teacher.add_scaled(&b.teacher, 1.0 / n);
        }
        Ok(Self {
            batches,
            segments,
            overall,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn error_rate_counts_argmax_mismatches() {
        let p = probs(&[&[0.9, 0.1], &[0.4, 0.6], &[0.5, 0.5]]);
        // Ties resolve to the lowest index, so row 2 predicts class 0.
        let e = error_rate(&p, &[0, 0, 1]).unwrap();
        assert!((e - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_nll_is_log_class_count() {
        let p = probs(&[&[0.1; 10], &[0.1; 10]]);
        let v = nll(&p, &[3, 7]).unwrap();
        assert!((v - (10.0f64).ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn nll_clamps_zero_probability() {
        let p = probs(&[&[1.0, 0.0]]);
        let v = nll(&p, &[1]).unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn brier_known_values() {
        // Uniform binary prediction: (0.5-1)^2 + (0.5-0)^2 = 0.5.
        let uniform = probs(&[&[0.5, 0.5]]);
        assert!((brier(&uniform, &[0]).unwrap() - 0.5).abs() < 1e-15);
        // Confidently wrong: (1-0)^2 + (0-1)^2 = 2, the maximum.
        let wrong = probs(&[&[1.0, 0.0]]);
        assert!((brier(&wrong, &[1]).unwrap() - 2.0).abs() < 1e-15);
        // Perfect prediction scores zero.
        let right = probs(&[&[1.0, 0.0]]);
        assert!(brier(&right, &[0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn nll_and_brier_are_proper_on_a_grid() {
        // With labels drawn 50/30/20, both scores over a coarse simplex grid
        // should be minimized at the empirical distribution itself.
        let labels: Vec<usize> = std::iter::empty()
            .chain(std::iter::repeat(0).take(5))
            .chain(std::iter::repeat(1).take(3))
            .chain(std::iter::repeat(2).take(2))
            .collect();
        let mut best_nll = (f64::INFINITY, (0, 0));
        let mut best_brier = (f64::INFINITY, (0, 0));
        for a in 1..=8 {
            for b in 1..=(9 - a) {
                let (pa, pb) = (a as f64 / 10.0, b as f64 / 10.0);
                let pc = 1.0 - pa - pb;
                let row = vec![pa, pb, pc];
                let rows: Vec<&[f64]> = (0..labels.len()).map(|_| row.as_slice()).collect();
                let p = probs(&rows);
                let n = nll(&p, &labels).unwrap();
                let br = brier(&p, &labels).unwrap();
                if n < best_nll.0 {
                    best_nll = (n, (a, b));
                }
                if br < best_brier.0 {
                    best_brier = (br, (a, b));
                }
            }
        }
        assert_eq!(best_nll.1, (5, 3));
        assert_eq!(best_brier.1, (5, 3));
    }

    #[test]
    fn label_validation_errors() {
        let p = probs(&[&[0.5, 0.5]]);
        assert!(error_rate(&p, &[0, 1]).is_err());
        assert!(nll(&p, &[2]).is_err());
        assert!(brier(&p, &[]).is_err());
    }

    fn record(segment: usize, batch: usize, err: f64, alpha: f64) -> BatchRecord {
        let s = Scores {
            error: err,
            nll: err + 0.5,
            brier: err * 2.0,
        };
        BatchRecord {
            segment_index: segment,
            kind: "gauss_noise",
            severity: 5,
            batch_index: batch,
            sample_count: 10,
            alpha,
            loss: None,
            skipped: false,
            mixed: s,
            source: s,
            teacher: s,
        }
    }

    #[test]
    fn aggregation_means_are_consistent() {
        let batches = vec![
            record(0, 0, 0.1, 0.2),
            record(0, 1, 0.3, 0.4),
            record(1, 0, 0.5, 0.6),
        ];
        let run = RunRecord::from_batches(batches).unwrap();
        assert_eq!(run.segments.len(), 2);
        assert!((run.segments[0].mixed.error - 0.2).abs() < 1e-12);
        assert!((run.segments[0].mean_alpha - 0.3).abs() < 1e-12);
        assert!((run.segments[1].mixed.error - 0.5).abs() < 1e-12);
        // Overall equals the batch mean, i.e. segment means weighted by
        // batch count.
        let weighted = (0.2 * 2.0 + 0.5) / 3.0;
        assert!((run.overall.mixed.error - weighted).abs() < 1e-12);
        assert_eq!(run.overall.sample_count, 30);
        assert_eq!(run.overall.skipped_batches, 0);
    }

    #[test]
    fn empty_run_is_rejected() {
        assert!(RunRecord::from_batches(vec![]).is_err());
    }
}
