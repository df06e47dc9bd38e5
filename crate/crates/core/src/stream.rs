//! Synthetic data, corruption operators, domain streams and augmentation.
//!
//! The source task is a Gaussian-blob classification problem: class means on
//! random directions at a fixed radius, isotropic within-class spread. Test
//! streams corrupt that data with one of fifteen vector-space analogues of
//! image corruptions, each with a documented severity law on levels 1..=5,
//! and present it as batches of unlabeled features. Labels ride along in a
//! separate field purely for scoring: the adaptation-facing surface of a
//! stream is feature tensors only.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor2;

/// Distance of every class mean from the origin. Together with the caller's
/// spread this fixes the Bayes error of the blob task.
const MEAN_RADIUS: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor2, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.features.rows() {
            return Err(CoreError::Domain {
                op: "LabeledDataset",
                msg: format!(
                    "{} labels for {} rows",
                    self.labels.len(),
                    self.features.rows()
                ),
            });
        }
        if let Some((r, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|&(_, &l)| l >= self.class_count)
        {
            return Err(CoreError::Domain {
                op: "LabeledDataset",
                msg: format!("label {l} at row {r} exceeds class count {}", self.class_count),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// The generating model of a blob task: class means and within-class spread.
/// Kept around so augmentation policies and oracle classifiers can be tied
/// to the geometry that produced the data.
#[derive(Debug, Clone)]
pub struct BlobMeta {
    pub means: Tensor2,
    pub spread: f64,
}

impl BlobMeta {
    /// Draws class means as random unit directions scaled to a fixed
    /// radius. With more classes than dimensions allow to be near-
    /// orthogonal, separation shrinks; `min_separation` reports the truth.
    pub fn generate(classes: usize, dim: usize, spread: f64, rng: &mut RngState) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(CoreError::Domain {
                op: "BlobMeta::generate",
                msg: format!("need at least 2 classes and 1 dimension, got {classes}/{dim}"),
            });
        }
        if !(spread > 0.0) {
            return Err(CoreError::Domain {
                op: "BlobMeta::generate",
                msg: format!("spread must be positive, got {spread}"),
            });
        }
        let means = Tensor2::from_fn(classes, dim, |_, _| rng.next_gaussian());
        let mut means = means;
        for c in 0..classes {
            let norm: f64 = means.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in means.row_mut(c) {
                *v *= MEAN_RADIUS / norm.max(1e-9);
            }
        }
        Ok(Self { means, spread })
    }

    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Smallest pairwise distance between class means.
    pub fn min_separation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for a in 0..self.classes() {
            for b in (a + 1)..self.classes() {
                let d: f64 = self
                    .means
                    .row(a)
                    .iter()
                    .zip(self.means.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        min
    }

    /// Samples `n_per_class` points per class and shuffles the row order.
    pub fn sample(&self, n_per_class: usize, rng: &mut RngState) -> Result<LabeledDataset> {
        let n = n_per_class * self.classes();
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
        for class in 0..self.classes() {
            for _ in 0..n_per_class {
                let row: Vec<f64> = self
                    .means
                    .row(class)
                    .iter()
                    .map(|&m| m + self.spread * rng.next_gaussian())
                    .collect();
                rows.push((row, class));
            }
        }
        rng.shuffle(&mut rows);
        let mut flat = Vec::with_capacity(n * self.dim());
        let mut labels = Vec::with_capacity(n);
        for (row, label) in rows {
            flat.extend(row);
            labels.push(label);
        }
        LabeledDataset::new(
            Tensor2::new(n, self.dim(), flat)?,
            labels,
            self.classes(),
        )
    }

    /// Nearest-class-mean classification; the geometry-derived oracle used
    /// to sanity-check label-preserving transforms.
    pub fn nearest_mean_predict(&self, x: &Tensor2) -> Vec<usize> {
        (0..x.rows())
            .map(|r| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..self.classes() {
                    let d: f64 = x
                        .row(r)
                        .iter()
                        .zip(self.means.row(c))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Gaussian blob dataset in one call; see [`BlobMeta`] for the two-step
/// form that keeps the generating geometry.
pub fn make_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    BlobMeta::generate(classes, dim, spread, rng)?.sample(n_per_class, rng)
}

/// The fifteen corruption families, in canonical stream order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    /// Additive iid Gaussian noise, sigma = 0.12 s.
    GaussNoise,
    /// Signal-dependent noise, sigma_j = 0.10 s sqrt(|x_j| + 0.25).
    ShotNoise,
    /// Each coordinate replaced by +-2.5 with probability 0.018 s.
    Impulse,
    /// Blend toward a centered 5-tap box filter, weight 0.16 s.
    SmoothDefocus,
    /// ceil(0.07 s d) random 60/40 blends of coordinate pairs within
    /// radius 1 (2 for severity >= 3).
    SmoothGlass,
    /// Blend (weight 0.12 s) toward a forward running mean of width s + 1.
    DirectionalBlur,
    /// Index-space zoom toward the center by factor 1 + 0.02 s.
    ZoomScale,
    /// Sparse positive spikes: probability 0.035 s, height U(1.25, 2.5).
    AdditiveSnow,
    /// One contiguous window of ceil(d (0.08 + 0.04 s)) coordinates blended
    /// (weight 0.3 + 0.06 s) toward a per-call frost value U(1.5, 2.5).
    FrostMask,
    /// Global blend toward the constant 1.25, weight 0.09 s.
    FogWash,
    /// Constant shift of +0.18 s on every coordinate.
    BrightnessShift,
    /// Features scaled about their per-row mean by 1 - 0.15 s.
    ContrastScale,
    /// Smooth sinusoidal index-space displacement of amplitude 0.12 s
    /// (random phase per row).
    ElasticWarp,
    /// Values clamped to [-4, 4] and rounded to 2^(7 - s) levels.
    QuantizePixelate,
    /// Orthonormal DCT with only the lowest max(1, round(d (1 - 0.09 s)))
    /// coefficients retained.
    LossyJpegAnalog,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::GaussNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Impulse,
        CorruptionKind::SmoothDefocus,
        CorruptionKind::SmoothGlass,
        CorruptionKind::DirectionalBlur,
        CorruptionKind::ZoomScale,
        CorruptionKind::AdditiveSnow,
        CorruptionKind::FrostMask,
        CorruptionKind::FogWash,
        CorruptionKind::BrightnessShift,
        CorruptionKind::ContrastScale,
        CorruptionKind::ElasticWarp,
        CorruptionKind::QuantizePixelate,
        CorruptionKind::LossyJpegAnalog,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussNoise => "gauss_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::Impulse => "impulse",
            CorruptionKind::SmoothDefocus => "smooth_defocus",
            CorruptionKind::SmoothGlass => "smooth_glass",
            CorruptionKind::DirectionalBlur => "directional_blur",
            CorruptionKind::ZoomScale => "zoom_scale",
            CorruptionKind::AdditiveSnow => "additive_snow",
            CorruptionKind::FrostMask => "frost_mask",
            CorruptionKind::FogWash => "fog_wash",
            CorruptionKind::BrightnessShift => "brightness_shift",
            CorruptionKind::ContrastScale => "contrast_scale",
            CorruptionKind::ElasticWarp => "elastic_warp",
            CorruptionKind::QuantizePixelate => "quantize_pixelate",
            CorruptionKind::LossyJpegAnalog => "lossy_jpeg_analog",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| CoreError::Domain {
                op: "CorruptionKind::from_name",
                msg: format!(
                    "unknown corruption '{name}'; valid tags: {}",
                    Self::ALL.map(|k| k.name()).join(", ")
                ),
            })
    }
}

/// A corruption family at a validated severity level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionOp {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionOp {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(CoreError::Domain {
                op: "CorruptionOp::new",
                msg: format!("severity {severity} outside 1..=5"),
            });
        }
        Ok(Self { kind, severity })
    }
}

fn sample_linear(row: &[f64], pos: f64) -> f64 {
    let last = (row.len() - 1) as f64;
    let p = pos.clamp(0.0, last);
    let i = p.floor() as usize;
    let frac = p - i as f64;
    if i + 1 < row.len() {
        row[i] * (1.0 - frac) + row[i + 1] * frac
    } else {
        row[i]
    }
}

fn box_filter(row: &[f64], half: usize) -> Vec<f64> {
    let d = row.len() as isize;
    (0..row.len())
        .map(|j| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for o in -(half as isize)..=(half as isize) {
                let k = (j as isize + o).clamp(0, d - 1) as usize;
                acc += row[k];
                n += 1.0;
            }
            acc / n
        })
        .collect()
}

fn forward_mean(row: &[f64], window: usize) -> Vec<f64> {
    let d = row.len();
    (0..d)
        .map(|j| {
            let end = (j + window).min(d);
            let slice = &row[j..end];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Orthonormal DCT-II of one row; `inverse` applies the transpose.
fn dct(row: &[f64], inverse: bool) -> Vec<f64> {
    let d = row.len();
    let df = d as f64;
    let scale = |k: usize| if k == 0 { (1.0 / df).sqrt() } else { (2.0 / df).sqrt() };
    (0..d)
        .map(|out_idx| {
            let mut acc = 0.0;
            for (in_idx, &v) in row.iter().enumerate() {
                let (k, j) = if inverse { (in_idx, out_idx) } else { (out_idx, in_idx) };
                acc += v
                    * scale(k)
                    * (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / df).cos();
            }
            acc
        })
        .collect()
}

/// Applies `op` to every row of `x`. Deterministic given the features, the
/// severity, and the generator state; each operator's severity law is
/// documented on its [`CorruptionKind`] variant.
pub fn apply_corruption(x: &Tensor2, op: CorruptionOp, rng: &mut RngState) -> Tensor2 {
    let s = op.severity as f64;
    let d = x.cols();
    let mut out = x.clone();
    match op.kind {
        CorruptionKind::GaussNoise => {
            let sigma = 0.12 * s;
            for v in out.as_mut_slice() {
                *v += sigma * rng.next_gaussian();
            }
        }
        CorruptionKind::ShotNoise => {
            for v in out.as_mut_slice() {
                *v += 0.10 * s * (v.abs() + 0.25).sqrt() * rng.next_gaussian();
            }
        }
        CorruptionKind::Impulse => {
            let p = 0.018 * s;
            for v in out.as_mut_slice() {
                if rng.next_f64() < p {
                    *v = if rng.next_f64() < 0.5 { -2.5 } else { 2.5 };
                }
            }
        }
        CorruptionKind::SmoothDefocus => {
            let b = 0.16 * s;
            for r in 0..out.rows() {
                let filtered = box_filter(out.row(r), 2);
                for (v, f) in out.row_mut(r).iter_mut().zip(filtered) {
                    *v = (1.0 - b) * *v + b * f;
                }
            }
        }
        CorruptionKind::SmoothGlass => {
            let mixes = (0.07 * s * d as f64).ceil() as usize;
            let radius = if op.severity >= 3 { 2 } else { 1 };
            let g = 0.4;
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                for _ in 0..mixes {
                    let j = rng.next_below(d);
                    let offset = 1 + rng.next_below(radius);
                    let k = if rng.next_f64() < 0.5 {
                        j.saturating_sub(offset)
                    } else {
                        (j + offset).min(d - 1)
                    };
                    let (a, b) = (row[j], row[k]);
                    row[j] = (1.0 - g) * a + g * b;
                    row[k] = (1.0 - g) * b + g * a;
                }
            }
        }
        CorruptionKind::DirectionalBlur => {
            let b = 0.12 * s;
            let window = op.severity as usize + 1;
            for r in 0..out.rows() {
                let blurred = forward_mean(out.row(r), window);
                for (v, f) in out.row_mut(r).iter_mut().zip(blurred) {
                    *v = (1.0 - b) * *v + b * f;
                }
            }
        }
        CorruptionKind::ZoomScale => {
            let z = 1.0 + 0.02 * s;
            let center = (d as f64 - 1.0) / 2.0;
            for r in 0..out.rows() {
                let src = out.row(r).to_vec();
                for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                    *v = sample_linear(&src, center + (j as f64 - center) / z);
                }
            }
        }
        CorruptionKind::AdditiveSnow => {
            let p = 0.035 * s;
            for v in out.as_mut_slice() {
                if rng.next_f64() < p {
                    *v += rng.uniform(1.25, 2.5);
                }
            }
        }
        CorruptionKind::FrostMask => {
            let window = ((0.08 + 0.04 * s) * d as f64).ceil() as usize;
            let w = 0.3 + 0.06 * s;
            // One frost value per call keeps the shift trackable; the
            // window position still varies per row.
            let frost = rng.uniform(1.5, 2.5);
            for r in 0..out.rows() {
                let start = rng.next_below(d.saturating_sub(window).max(1));
                let row = out.row_mut(r);
                for v in row.iter_mut().skip(start).take(window) {
                    *v = (1.0 - w) * *v + w * frost;
                }
            }
        }
        CorruptionKind::FogWash => {
            let f = 0.09 * s;
            for v in out.as_mut_slice() {
                *v = (1.0 - f) * *v + f * 1.25;
            }
        }
        CorruptionKind::BrightnessShift => {
            let shift = 0.18 * s;
            for v in out.as_mut_slice() {
                *v += shift;
            }
        }
        CorruptionKind::ContrastScale => {
            let c = 1.0 - 0.15 * s;
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
                for v in row.iter_mut() {
                    *v = mean + c * (*v - mean);
                }
            }
        }
        CorruptionKind::ElasticWarp => {
            let amp = 0.12 * s;
            let freq = 2.0;
            for r in 0..out.rows() {
                let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                let src = out.row(r).to_vec();
                for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                    let shift =
                        amp * (2.0 * std::f64::consts::PI * freq * j as f64 / d as f64 + phase).sin();
                    *v = sample_linear(&src, j as f64 + shift);
                }
            }
        }
        CorruptionKind::QuantizePixelate => {
            let levels = (1u32 << (7 - op.severity as u32)) as f64;
            let r_bound = 4.0;
            for v in out.as_mut_slice() {
                let clamped = v.clamp(-r_bound, r_bound);
                let t = (clamped + r_bound) / (2.0 * r_bound) * (levels - 1.0);
                *v = t.round() / (levels - 1.0) * 2.0 * r_bound - r_bound;
            }
        }
        CorruptionKind::LossyJpegAnalog => {
            let keep = ((d as f64) * (1.0 - 0.09 * s)).round().max(1.0) as usize;
            for r in 0..out.rows() {
                let mut coeffs = dct(out.row(r), false);
                for c in coeffs.iter_mut().skip(keep) {
                    *c = 0.0;
                }
                let rec = dct(&coeffs, true);
                out.row_mut(r).copy_from_slice(&rec);
            }
        }
    }
    out
}

/// Stochastic label-preserving variants of a batch.
///
/// Each variant composes, per row: a random coordinate-pair rotation, a
/// global scaling, Gaussian jitter, and coordinate dropout. Magnitudes are
/// meant to stay well below half the class-mean separation of the data the
/// policy was built for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub jitter_sigma: f64,
    pub dropout_prob: f64,
    /// Maximum rotation angle (radians) applied to one random coordinate
    /// pair.
    pub max_rotation: f64,
    /// Half-width of the uniform relative scaling, x *= 1 + U(-a, a).
    pub scale_jitter: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.08,
            dropout_prob: 0.03,
            max_rotation: 0.25,
            scale_jitter: 0.05,
        }
    }
}

impl AugmentPolicy {
    /// The identity policy: every magnitude zero, variants are exact copies.
    pub fn zero() -> Self {
        Self {
            jitter_sigma: 0.0,
            dropout_prob: 0.0,
            max_rotation: 0.0,
            scale_jitter: 0.0,
        }
    }

    /// Scales the default policy down if the task geometry is tight: the
    /// expected jitter displacement is kept under a tenth of the minimum
    /// class-mean separation.
    pub fn for_blobs(meta: &BlobMeta) -> Self {
        let base = Self::default();
        let sep = meta.min_separation();
        let budget = 0.1 * sep;
        let expected_jitter = base.jitter_sigma * (meta.dim() as f64).sqrt();
        if expected_jitter <= budget {
            base
        } else {
            let shrink = budget / expected_jitter;
            Self {
                jitter_sigma: base.jitter_sigma * shrink,
                dropout_prob: base.dropout_prob,
                max_rotation: base.max_rotation * shrink,
                scale_jitter: base.scale_jitter * shrink,
            }
        }
    }
}

/// `count` augmented copies of `x` under `policy`.
pub fn augment(
    x: &Tensor2,
    count: usize,
    policy: &AugmentPolicy,
    rng: &mut RngState,
) -> Result<Vec<Tensor2>> {
    if count == 0 {
        return Err(CoreError::Domain {
            op: "augment",
            msg: "augmentation count must be at least 1".to_string(),
        });
    }
    let d = x.cols();
    let mut variants = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = x.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            if d >= 2 {
                let i = rng.next_below(d);
                let mut j = rng.next_below(d - 1);
                if j >= i {
                    j += 1;
                }
                let angle = rng.uniform(-policy.max_rotation, policy.max_rotation);
                let (sin, cos) = angle.sin_cos();
                let (a, b) = (row[i], row[j]);
                row[i] = a * cos - b * sin;
                row[j] = a * sin + b * cos;
            }
            let scale = 1.0 + rng.uniform(-policy.scale_jitter, policy.scale_jitter);
            for val in row.iter_mut() {
                *val = *val * scale + policy.jitter_sigma * rng.next_gaussian();
            }
            for val in row.iter_mut() {
                if rng.next_f64() < policy.dropout_prob {
                    *val = 0.0;
                }
            }
        }
        variants.push(v);
    }
    Ok(variants)
}

/// One corrupted pass over the base data: unlabeled batches for adaptation
/// plus the matching hidden labels for scoring. Adaptation code receives
/// only the `batches` tensors.
#[derive(Debug, Clone)]
pub struct StreamSegment {
    pub op: CorruptionOp,
    pub batches: Vec<Tensor2>,
    /// Scoring-only ground truth, parallel to `batches`.
    pub labels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct DomainStream {
    pub segments: Vec<StreamSegment>,
}

impl DomainStream {
    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Every corruption kind once, at a fixed severity, canonical order.
    Standard,
    /// Per kind, severities 1,2,3,4,5,4,3,2,1 as nine consecutive segments.
    Gradual,
    /// The standard schedule repeated `loops` times.
    Loops,
    /// The standard schedule with kind order randomly permuted.
    RandomOrder,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Standard => "standard",
            ScheduleKind::Gradual => "gradual",
            ScheduleKind::Loops => "loops",
            ScheduleKind::RandomOrder => "random_order",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(ScheduleKind::Standard),
            "gradual" => Ok(ScheduleKind::Gradual),
            "loops" => Ok(ScheduleKind::Loops),
            "random_order" => Ok(ScheduleKind::RandomOrder),
            other => Err(CoreError::Domain {
                op: "ScheduleKind::from_name",
                msg: format!("unknown schedule '{other}'"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScheduleParams {
    pub severity: u8,
    /// Repetitions for the loops schedule; ignored elsewhere.
    pub loops: usize,
    pub batch_size: usize,
    /// Corruption kinds to draw segments from; defaults to all fifteen.
    pub kinds: Vec<CorruptionKind>,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            severity: 5,
            loops: 10,
            batch_size: 200,
            kinds: CorruptionKind::ALL.to_vec(),
        }
    }
}

/// Builds a corrupted batch stream over `base`.
///
/// Segment contents depend only on the base data, the plan, and the state
/// of `rng` at entry: each segment corrupts and shuffles with a generator
/// derived from (stream seed, segment index), so two builds from equal
/// seeds are identical batch for batch.
pub fn build_schedule(
    kind: ScheduleKind,
    base: &LabeledDataset,
    params: &ScheduleParams,
    rng: &mut RngState,
) -> Result<DomainStream> {
    base.validate()?;
    if base.is_empty() {
        return Err(CoreError::Domain {
            op: "build_schedule",
            msg: "base dataset is empty".to_string(),
        });
    }
    if params.batch_size == 0 {
        return Err(CoreError::Domain {
            op: "build_schedule",
            msg: "batch_size must be at least 1".to_string(),
        });
    }
    if params.kinds.is_empty() {
        return Err(CoreError::Domain {
            op: "build_schedule",
            msg: "schedule needs at least one corruption kind".to_string(),
        });
    }
    let stream_seed = rng.next_u64();
    let plan: Vec<CorruptionOp> = match kind {
        ScheduleKind::Standard => params
            .kinds
            .iter()
            .map(|&k| CorruptionOp::new(k, params.severity))
            .collect::<Result<_>>()?,
        ScheduleKind::Gradual => {
            let ramp = [1u8, 2, 3, 4, 5, 4, 3, 2, 1];
            params
                .kinds
                .iter()
                .flat_map(|&k| ramp.iter().map(move |&s| CorruptionOp::new(k, s)))
                .collect::<Result<_>>()?
        }
        ScheduleKind::Loops => {
            let once: Vec<CorruptionOp> = params
                .kinds
                .iter()
                .map(|&k| CorruptionOp::new(k, params.severity))
                .collect::<Result<_>>()?;
            (0..params.loops.max(1)).flat_map(|_| once.iter().copied()).collect()
        }
        ScheduleKind::RandomOrder => {
            let mut order_rng = RngState::new(RngState::derive_seed(stream_seed, 0x0bde));
            let perm = order_rng.permutation(params.kinds.len());
            perm.into_iter()
                .map(|i| CorruptionOp::new(params.kinds[i], params.severity))
                .collect::<Result<_>>()?
        }
    };

    let segments = plan
        .iter()
        .enumerate()
        .map(|(idx, &op)| {
            let mut seg_rng = RngState::new(RngState::derive_seed(stream_seed, idx as u64 + 1));
            let corrupted = apply_corruption(&base.features, op, &mut seg_rng);
            let order = seg_rng.permutation(base.len());
            let mut batches = Vec::new();
            let mut labels = Vec::new();
            for chunk in order.chunks(params.batch_size) {
                batches.push(corrupted.select_rows(chunk)?);
                labels.push(chunk.iter().map(|&i| base.labels[i]).collect());
            }
            Ok(StreamSegment { op, batches, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainStream { segments })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Treat the last column as an integer class label.
    pub has_labels: bool,
    /// Skip the first line.
    pub has_header: bool,
    /// Validate labels against this class count instead of inferring
    /// max + 1 from the data.
    pub declared_classes: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum CsvData {
    Labeled(LabeledDataset),
    Unlabeled(Tensor2),
}

/// Loads a comma-separated numeric file, one sample per row. Errors carry
/// 1-based line numbers.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<CsvData> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::Parse {
        line: 0,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut width: Option<usize> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut rows = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if opts.has_header && idx == 0 {
            continue;
        }
        let line = raw.trim();
        if line.is_empty() {
            return Err(CoreError::Parse {
                line: line_no,
                msg: "empty line".to_string(),
            });
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(CoreError::Parse {
                    line: line_no,
                    msg: format!("expected {w} fields, found {}", fields.len()),
                })
            }
            _ => {}
        }
        let feature_count = if opts.has_labels {
            fields.len().saturating_sub(1)
        } else {
            fields.len()
        };
        if feature_count == 0 {
            return Err(CoreError::Parse {
                line: line_no,
                msg: "row has no feature columns".to_string(),
            });
        }
        for f in &fields[..feature_count] {
            let v: f64 = f.parse().map_err(|_| CoreError::Parse {
                line: line_no,
                msg: format!("'{f}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CoreError::Parse {
                    line: line_no,
                    msg: format!("non-finite value '{f}'"),
                });
            }
            values.push(v);
        }
        if opts.has_labels {
            let f = fields[feature_count];
            let label: usize = f.parse().map_err(|_| CoreError::Parse {
                line: line_no,
                msg: format!("'{f}' is not a class label"),
            })?;
            if let Some(declared) = opts.declared_classes {
                if label >= declared {
                    return Err(CoreError::Parse {
                        line: line_no,
                        msg: format!("label {label} exceeds declared class count {declared}"),
                    });
                }
            }
            labels.push(label);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CoreError::Parse {
            line: 0,
            msg: "no data rows".to_string(),
        });
    }
    let cols = values.len() / rows;
    let features = Tensor2::new(rows, cols, values)?;
    if opts.has_labels {
        let class_count = opts
            .declared_classes
            .unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1);
        Ok(CsvData::Labeled(LabeledDataset::new(
            features,
            labels,
            class_count,
        )?))
    } else {
        Ok(CsvData::Unlabeled(features))
    }
}
