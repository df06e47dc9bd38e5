//! Source-domain training: a deterministic classifier first, then a
//! variational posterior warm-started from it.
//!
//! The warm-up keeps the deterministic weights as posterior means, starts
//! the scales small, and runs a few epochs of stochastic variational
//! inference against a prior centered on those same weights. Short is the
//! point: the posterior should sit near the deterministic solution with
//! calibrated, not collapsed, scales. Long warm-ups drift away from that
//! anchor, so the epoch default stays small.

use crate::error::{CoreError, Result};
use crate::objectives::nll_value_and_grad;
use crate::rng::RngState;
use crate::stream::LabeledDataset;
use crate::tensor::Tensor2;
use crate::varnet::{
    inv_softplus, Activation, Arch, GaussianParamTensor, VariationalLayer, VariationalNet,
    DEFAULT_INIT_SIGMA,
};

/// A plain point-estimate feed-forward classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicNet {
    pub layers: Vec<DetLayer>,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetLayer {
    pub w: Tensor2,
    pub b: Tensor2,
    pub activation: Activation,
}

struct DetTrace {
    inputs: Vec<Tensor2>,
    pre_act: Vec<Tensor2>,
    logits: Tensor2,
}

struct DetGrads {
    layers: Vec<(Tensor2, Tensor2)>,
}

impl DeterministicNet {
    pub fn random_init(arch: &Arch, rng: &mut RngState) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o, act)| DetLayer {
                w: Tensor2::from_fn(i, o, |_, _| rng.next_gaussian() * (2.0 / i as f64).sqrt()),
                b: Tensor2::zeros(1, o),
                activation: act,
            })
            .collect();
        Self {
            layers,
            class_count: arch.class_count,
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: self.layers[0].w.shape().0,
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.w.shape().1)
                .collect(),
            class_count: self.class_count,
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for l in &self.layers {
            let z = h.matmul(&l.w)?.add_row_vector(&l.b)?;
            h = match l.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    fn forward_trace(&self, x: &Tensor2) -> Result<DetTrace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_act = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let z = h.matmul(&l.w)?.add_row_vector(&l.b)?;
            let a = match l.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(h);
            pre_act.push(z);
            h = a;
        }
        Ok(DetTrace {
            inputs,
            pre_act,
            logits: h,
        })
    }

    fn backprop(&self, trace: &DetTrace, dlogits: &Tensor2) -> Result<DetGrads> {
        let mut layers = vec![(Tensor2::zeros(0, 0), Tensor2::zeros(0, 0)); self.layers.len()];
        let mut da = dlogits.clone();
        for l in (0..self.layers.len()).rev() {
            let z = &trace.pre_act[l];
            let dz = match self.layers[l].activation {
                Activation::Relu => Tensor2::from_fn(da.rows(), da.cols(), |r, c| {
                    if z.get(r, c) > 0.0 {
                        da.get(r, c)
                    } else {
                        0.0
                    }
                }),
                Activation::Identity => da.clone(),
            };
            let x = &trace.inputs[l];
            layers[l] = (x.transpose().matmul(&dz)?, dz.col_sums());
            if l > 0 {
                da = dz.matmul(&self.layers[l].w.transpose())?;
            }
        }
        Ok(DetGrads { layers })
    }

    fn apply_sgd(&mut self, grads: &DetGrads, lr: f64) {
        for (l, (dw, db)) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, g) in l.w.as_mut_slice().iter_mut().zip(dw.as_slice()) {
                *p -= lr * g;
            }
            for (p, g) in l.b.as_mut_slice().iter_mut().zip(db.as_slice()) {
                *p -= lr * g;
            }
        }
    }

    /// Fraction of samples whose argmax disagrees with the label.
    pub fn error_on(&self, data: &LabeledDataset) -> Result<f64> {
        let preds = self.forward(&data.features)?.argmax_rows();
        let wrong = preds
            .iter()
            .zip(&data.labels)
            .filter(|(p, l)| p != l)
            .count();
        Ok(wrong as f64 / data.labels.len().max(1) as f64)
    }
}

/// A posterior whose means are the deterministic weights and whose sigma is
/// constant everywhere.
pub fn variational_from_det(det: &DeterministicNet, sigma: f64) -> VariationalNet {
    let layers = det
        .layers
        .iter()
        .map(|l| {
            let (i, o) = l.w.shape();
            VariationalLayer {
                weights: GaussianParamTensor {
                    mu: l.w.clone(),
                    rho: Tensor2::filled(i, o, inv_softplus(sigma)),
                },
                biases: GaussianParamTensor {
                    mu: l.b.clone(),
                    rho: Tensor2::filled(1, o, inv_softplus(sigma)),
                },
                activation: l.activation,
            }
        })
        .collect();
    VariationalNet {
        layers,
        class_count: det.class_count,
    }
}

/// Mean-forward classification error of a variational net.
pub fn mean_forward_error(net: &VariationalNet, data: &LabeledDataset) -> Result<f64> {
    let preds = net.forward_mean(&data.features)?.argmax_rows();
    let wrong = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / data.labels.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    /// Epoch cap; training stops early once `target_error` is reached.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training error at which pretraining declares convergence.
    pub target_error: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.1,
            batch_size: 64,
            target_error: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub net: DeterministicNet,
    /// False when the epoch cap ran out before `target_error`; the returned
    /// net is then the best epoch seen, not the last.
    pub converged: bool,
    pub train_error: f64,
    pub epochs_run: usize,
}

/// Supervised SGD on the negative log-likelihood until the target training
/// error or the epoch cap. With zero epochs the freshly initialized net is
/// returned untouched.
pub fn pretrain_source(
    arch: &Arch,
    data: &LabeledDataset,
    cfg: &PretrainConfig,
    rng: &mut RngState,
) -> Result<PretrainOutcome> {
    data.validate()?;
    let mut net = DeterministicNet::random_init(arch, rng);
    let mut best = net.clone();
    let mut best_err = net.error_on(data)?;
    let mut epochs_run = 0;
    let mut converged = best_err <= cfg.target_error;
    for _ in 0..cfg.epochs {
        if converged {
            break;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = data.features.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let trace = net.forward_trace(&x)?;
            let (_, dlogits) = nll_value_and_grad(&trace.logits, &y)?;
            let grads = net.backprop(&trace, &dlogits)?;
            net.apply_sgd(&grads, cfg.learning_rate);
        }
        epochs_run += 1;
        let err = net.error_on(data)?;
        if err < best_err {
            best_err = err;
            best = net.clone();
        }
        if err <= cfg.target_error {
            converged = true;
        }
    }
    let (net, train_error) = if converged {
        let err = net.error_on(data)?;
        (net, err)
    } else {
        (best, best_err)
    };
    Ok(PretrainOutcome {
        net,
        converged,
        train_error,
        epochs_run,
    })
}

#[derive(Debug, Clone)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Sigma of the prior centered on the deterministic weights (or on zero
    /// for from-scratch variational training).
    pub prior_sigma0: f64,
    pub batch_size: usize,
    /// Scale applied to the KL term of every minibatch objective.
    pub kl_scale: f64,
    /// Per-coordinate cap on a single SGD step; keeps any one update inside
    /// a trust region around the current iterate.
    pub trust_radius: f64,
    /// Fraction of the labeled source data used for warm-up, in (0, 1].
    /// Below 1.0 a random subset is drawn once before training.
    pub data_fraction: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.02,
            prior_sigma0: 0.1,
            batch_size: 64,
            kl_scale: 1e-3,
            trust_radius: 0.05,
            data_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub net: VariationalNet,
    /// True when the warmed-up mean-forward accuracy fell more than two
    /// points below the deterministic net it started from.
    pub degraded: bool,
    pub det_train_error: f64,
    pub warm_train_error: f64,
    /// Fixed-noise objective (sampled NLL + scaled KL) after each epoch.
    pub epoch_objectives: Vec<f64>,
}

/// Shared minibatch SVI loop: sampled-forward NLL plus `kl_scale` times
/// KL(q || prior), plain SGD with a per-coordinate trust radius.
fn run_svi_epochs(
    q: &mut VariationalNet,
    data: &LabeledDataset,
    prior: &VariationalNet,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    kl_scale: f64,
    trust_radius: f64,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let eval_seed = RngState::derive_seed(rng.seed(), 0xe7a1);
    let mut objectives = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size.max(1)) {
            let x = data.features.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let noise = q.sample_noise(x.rows(), rng);
            let trace = q.forward_with_noise(&x, &noise)?;
            let (_, dlogits) = nll_value_and_grad(&trace.logits, &y)?;
            let mut grads = q.backprop(&trace, &noise, &dlogits)?;
            grads.add_scaled(&q.kl_gradients(prior)?, kl_scale);
            let before = q.flatten_params();
            q.apply_sgd(&grads, lr, Some(trust_radius));
            debug_assert!(
                q.flatten_params()
                    .iter()
                    .zip(&before)
                    .all(|(a, b)| (a - b).abs() <= trust_radius + 1e-15),
                "step escaped the trust radius"
            );
        }
        objectives.push(eval_objective(q, data, prior, kl_scale, eval_seed)?);
    }
    Ok(objectives)
}

/// Objective estimate with frozen evaluation noise, so epoch-to-epoch
/// comparisons see the optimization trend rather than fresh sampling noise.
fn eval_objective(
    q: &VariationalNet,
    data: &LabeledDataset,
    prior: &VariationalNet,
    kl_scale: f64,
    eval_seed: u64,
) -> Result<f64> {
    let mut eval_rng = RngState::new(eval_seed);
    let draws = 4;
    let mut nll_acc = 0.0;
    for _ in 0..draws {
        let logits = q.forward_sample(&data.features, &mut eval_rng)?;
        nll_acc += nll_supervised_all(&logits, &data.labels)?;
    }
    Ok(nll_acc / draws as f64 + kl_scale * q.kl_between(prior)?)
}

fn nll_supervised_all(logits: &Tensor2, labels: &[usize]) -> Result<f64> {
    crate::objectives::nll_supervised(logits, labels)
}

/// Draws a random subset of `fraction * len` rows (at least one). Returns
/// `None` at fraction 1.0 without touching the rng, so full-data runs are
/// unchanged by this feature existing.
fn subsample(
    data: &LabeledDataset,
    fraction: f64,
    rng: &mut RngState,
) -> Result<Option<LabeledDataset>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Domain {
            op: "warmup subsample",
            msg: format!("data fraction must be in (0, 1], got {fraction}"),
        });
    }
    if fraction == 1.0 {
        return Ok(None);
    }
    let keep = ((data.len() as f64 * fraction).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    order.truncate(keep);
    order.sort_unstable();
    let features = data.features.select_rows(&order)?;
    let labels = order.iter().map(|&i| data.labels[i]).collect();
    Ok(Some(LabeledDataset::new(
        features,
        labels,
        data.class_count,
    )?))
}

/// Variational warm-up from a trained deterministic net.
///
/// Means start at the deterministic weights, sigma starts small, and the
/// prior is a Gaussian of scale `prior_sigma0` centered on those same
/// weights. Zero epochs returns that initialization exactly.
pub fn variational_warmup(
    det: &DeterministicNet,
    data: &LabeledDataset,
    cfg: &WarmupConfig,
    rng: &mut RngState,
) -> Result<WarmupOutcome> {
    data.validate()?;
    let subset = subsample(data, cfg.data_fraction, rng)?;
    let train_data = subset.as_ref().unwrap_or(data);
    let prior = variational_from_det(det, cfg.prior_sigma0);
    let mut q = variational_from_det(det, DEFAULT_INIT_SIGMA);
    let epoch_objectives = run_svi_epochs(
        &mut q,
        train_data,
        &prior,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.kl_scale,
        cfg.trust_radius,
        rng,
    )?;
    // Parity is judged on the full source set even when training saw a
    // subset.
    let det_train_error = det.error_on(data)?;
    let warm_train_error = mean_forward_error(&q, data)?;
    Ok(WarmupOutcome {
        degraded: warm_train_error > det_train_error + 0.02,
        net: q,
        det_train_error,
        warm_train_error,
        epoch_objectives,
    })
}

/// Trains a variational net from random initialization against a zero-mean
/// prior of scale `prior_sigma0`; the from-scratch counterpart the warm-up
/// is meant to match.
pub fn train_bnn_direct(
    arch: &Arch,
    data: &LabeledDataset,
    cfg: &WarmupConfig,
    rng: &mut RngState,
) -> Result<VariationalNet> {
    data.validate()?;
    let prior = VariationalNet::constant(arch, 0.0, cfg.prior_sigma0);
    let mut q = VariationalNet::random_init(arch, DEFAULT_INIT_SIGMA, rng);
    run_svi_epochs(
        &mut q,
        data,
        &prior,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.kl_scale,
        cfg.trust_radius,
        rng,
    )?;
    Ok(q)
}
