//! Mean-field Gaussian feed-forward networks.
//!
//! Every weight and bias carries an independent Gaussian posterior
//! N(mu, sigma^2) with sigma = softplus(rho), so sigma stays strictly
//! positive under unconstrained updates. Sampling uses the local
//! reparameterization trick: instead of drawing weight matrices, each layer
//! draws its pre-activations from the induced Gaussian
//!
//!   mean = x mu_W + mu_b,   var = (x .* x) sigma_W^2 + sigma_b^2,
//!
//! which gives lower-variance gradients and makes the sampled forward pass
//! differentiable in (mu, rho) for a fixed noise draw. The backward pass
//! here is hand-rolled reverse mode for exactly this architecture.

use crate::error::{CoreError, Result};
use crate::rng::RngState;
use crate::tensor::Tensor2;

/// Sigma used when a fresh posterior is initialized; small enough that the
/// sampled forward pass starts out near-deterministic.
pub const DEFAULT_INIT_SIGMA: f64 = 1e-3;

/// Numerically stable softplus, ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus: the rho whose softplus equals `sigma` (> 0).
pub fn inv_softplus(sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    if sigma > 30.0 {
        // e^sigma - 1 ~ e^sigma; expand in log space to dodge overflow.
        sigma + (-(-sigma).exp()).ln_1p()
    } else {
        sigma.exp_m1().ln()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Closed-form KL between scalar Gaussians, KL(N(mq, sq^2) || N(mp, sp^2)).
pub fn kl_gauss_scalar(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let d = mu_q - mu_p;
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + d * d) / (2.0 * sigma_p * sigma_p) - 0.5
}

/// KL between diagonal Gaussians given as coordinate vectors.
pub fn kl_diag_gauss(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> f64 {
    debug_assert!(mu_q.len() == sigma_q.len() && mu_p.len() == sigma_p.len());
    debug_assert!(mu_q.len() == mu_p.len());
    let mut acc = 0.0;
    for i in 0..mu_q.len() {
        acc += kl_gauss_scalar(mu_q[i], sigma_q[i], mu_p[i], sigma_p[i]);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// A matrix of independent Gaussian parameters: means in `mu`, pre-softplus
/// scales in `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParamTensor {
    pub mu: Tensor2,
    pub rho: Tensor2,
}

impl GaussianParamTensor {
    pub fn new(mu: Tensor2, rho: Tensor2) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "GaussianParamTensor::new",
                left: mu.shape(),
                right: rho.shape(),
            });
        }
        Ok(Self { mu, rho })
    }

    pub fn constant(rows: usize, cols: usize, mu: f64, sigma: f64) -> Self {
        Self {
            mu: Tensor2::filled(rows, cols, mu),
            rho: Tensor2::filled(rows, cols, inv_softplus(sigma)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }

    pub fn sigma(&self) -> Tensor2 {
        self.rho.map(softplus)
    }
}

/// Network shape: input width, hidden widths (ReLU), and the class count of
/// the final identity layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub class_count: usize,
}

impl Arch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, class_count: usize) -> Self {
        Self {
            input_dim,
            hidden,
            class_count,
        }
    }

    /// (fan_in, fan_out, activation) per layer, hidden layers ReLU and the
    /// output layer identity.
    pub fn layer_dims(&self) -> Vec<(usize, usize, Activation)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h, Activation::Relu));
            prev = h;
        }
        dims.push((prev, self.class_count, Activation::Identity));
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub weights: GaussianParamTensor,
    pub biases: GaussianParamTensor,
    pub activation: Activation,
}

impl VariationalLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.shape().0
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape().1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    pub layers: Vec<VariationalLayer>,
    pub class_count: usize,
}

/// Per-layer noise for one sampled forward pass; one standard-normal value
/// per (row, unit) pre-activation.
#[derive(Debug, Clone)]
pub struct Noise {
    pub per_layer: Vec<Tensor2>,
}

/// Intermediate state of a sampled forward pass, retained for the backward
/// pass: the input to each layer, the pre-activation standard deviations,
/// and the sampled pre-activations.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Tensor2>,
    pre_std: Vec<Tensor2>,
    pre_act: Vec<Tensor2>,
    pub logits: Tensor2,
}

/// Gradients with the same shape as a network's parameters.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w_mu: Tensor2,
    pub w_rho: Tensor2,
    pub b_mu: Tensor2,
    pub b_rho: Tensor2,
}

impl GradientSet {
    pub fn zeros_like(net: &VariationalNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let (wi, wo) = l.weights.shape();
                LayerGrads {
                    w_mu: Tensor2::zeros(wi, wo),
                    w_rho: Tensor2::zeros(wi, wo),
                    b_mu: Tensor2::zeros(1, wo),
                    b_rho: Tensor2::zeros(1, wo),
                }
            })
            .collect();
        Self { layers }
    }

    /// `self += c * other`. Shapes must already agree.
    pub fn add_scaled(&mut self, other: &GradientSet, c: f64) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (dst, src) in [
                (&mut a.w_mu, &b.w_mu),
                (&mut a.w_rho, &b.w_rho),
                (&mut a.b_mu, &b.b_mu),
                (&mut a.b_rho, &b.b_rho),
            ] {
                for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                    *d += c * s;
                }
            }
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for l in &mut self.layers {
            for t in [&mut l.w_mu, &mut l.w_rho, &mut l.b_mu, &mut l.b_rho] {
                for v in t.as_mut_slice() {
                    *v *= c;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w_mu.is_finite() && l.w_rho.is_finite() && l.b_mu.is_finite() && l.b_rho.is_finite()
        })
    }

    /// Flat view in the same order as [`VariationalNet::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w_mu.iter());
            out.extend(l.w_rho.iter());
            out.extend(l.b_mu.iter());
            out.extend(l.b_rho.iter());
        }
        out
    }
}

impl VariationalNet {
    pub fn from_parts(layers: Vec<VariationalLayer>, class_count: usize) -> Result<Self> {
        let net = Self {
            layers,
            class_count,
        };
        net.validate()?;
        Ok(net)
    }

    /// Posterior with constant mean and sigma everywhere; mostly for tests.
    pub fn constant(arch: &Arch, mu: f64, sigma: f64) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o, act)| VariationalLayer {
                weights: GaussianParamTensor::constant(i, o, mu, sigma),
                biases: GaussianParamTensor::constant(1, o, mu, sigma),
                activation: act,
            })
            .collect();
        Self {
            layers,
            class_count: arch.class_count,
        }
    }

    /// He-style random means with a fixed initial sigma; the starting point
    /// for training a variational net from scratch.
    pub fn random_init(arch: &Arch, init_sigma: f64, rng: &mut RngState) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o, act)| {
                let scale = (2.0 / i as f64).sqrt();
                let mu = Tensor2::from_fn(i, o, |_, _| rng.next_gaussian() * scale);
                let rho = Tensor2::filled(i, o, inv_softplus(init_sigma));
                VariationalLayer {
                    weights: GaussianParamTensor { mu, rho },
                    biases: GaussianParamTensor::constant(1, o, 0.0, init_sigma),
                    activation: act,
                }
            })
            .collect();
        Self {
            layers,
            class_count: arch.class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::Domain {
                op: "VariationalNet",
                msg: "network has no layers".to_string(),
            });
        }
        for (idx, l) in self.layers.iter().enumerate() {
            if l.biases.shape() != (1, l.out_dim()) {
                return Err(CoreError::ShapeMismatch {
                    op: "VariationalNet bias",
                    left: l.biases.shape(),
                    right: (1, l.out_dim()),
                });
            }
            if idx + 1 < self.layers.len() {
                let next_in = self.layers[idx + 1].in_dim();
                if l.out_dim() != next_in {
                    return Err(CoreError::Domain {
                        op: "VariationalNet",
                        msg: format!(
                            "layer {idx} out {} does not feed layer {} in {}",
                            l.out_dim(),
                            idx + 1,
                            next_in
                        ),
                    });
                }
            }
        }
        let last = self.layers.last().unwrap();
        if last.activation != Activation::Identity {
            return Err(CoreError::Domain {
                op: "VariationalNet",
                msg: "output layer must be identity".to_string(),
            });
        }
        if last.out_dim() != self.class_count {
            return Err(CoreError::Domain {
                op: "VariationalNet",
                msg: format!(
                    "output width {} != class_count {}",
                    last.out_dim(),
                    self.class_count
                ),
            });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.out_dim())
                .collect(),
            class_count: self.class_count,
        }
    }

    pub fn same_arch(&self, other: &VariationalNet) -> bool {
        self.class_count == other.class_count
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.activation == b.activation
            })
    }

    /// Deterministic forward pass through the posterior means.
    pub fn forward_mean(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut h = x.clone();
        for l in &self.layers {
            let z = h.matmul(&l.weights.mu)?.add_row_vector(&l.biases.mu)?;
            h = match l.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    /// Draws one standard-normal value per pre-activation of a batch with
    /// `rows` rows.
    pub fn sample_noise(&self, rows: usize, rng: &mut RngState) -> Noise {
        let per_layer = self
            .layers
            .iter()
            .map(|l| Tensor2::from_fn(rows, l.out_dim(), |_, _| rng.next_gaussian()))
            .collect();
        Noise { per_layer }
    }

    /// Sampled forward pass under fixed noise, keeping the trace needed for
    /// the backward pass. Holding `noise` fixed makes the logits a smooth
    /// deterministic function of (mu, rho), which is what both the pathwise
    /// gradient and the finite-difference oracle differentiate.
    pub fn forward_with_noise(&self, x: &Tensor2, noise: &Noise) -> Result<ForwardTrace> {
        if noise.per_layer.len() != self.layers.len() {
            return Err(CoreError::Domain {
                op: "forward_with_noise",
                msg: "noise layer count mismatch".to_string(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_std = Vec::with_capacity(self.layers.len());
        let mut pre_act = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, eps) in self.layers.iter().zip(&noise.per_layer) {
            if eps.shape() != (h.rows(), l.out_dim()) {
                return Err(CoreError::ShapeMismatch {
                    op: "forward_with_noise",
                    left: eps.shape(),
                    right: (h.rows(), l.out_dim()),
                });
            }
            let mean = h.matmul(&l.weights.mu)?.add_row_vector(&l.biases.mu)?;
            let sig_w2 = l.weights.sigma().map(|s| s * s);
            let sig_b2 = l.biases.sigma().map(|s| s * s);
            let var = h
                .map(|v| v * v)
                .matmul(&sig_w2)?
                .add_row_vector(&sig_b2)?;
            let std = var.map(f64::sqrt);
            let z = Tensor2::from_fn(mean.rows(), mean.cols(), |r, c| {
                mean.get(r, c) + std.get(r, c) * eps.get(r, c)
            });
            let a = match l.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(h);
            pre_std.push(std);
            pre_act.push(z);
            h = a;
        }
        Ok(ForwardTrace {
            inputs,
            pre_std,
            pre_act,
            logits: h,
        })
    }

    /// One stochastic forward pass; fresh noise, logits only.
    pub fn forward_sample(&self, x: &Tensor2, rng: &mut RngState) -> Result<Tensor2> {
        let noise = self.sample_noise(x.rows(), rng);
        Ok(self.forward_with_noise(x, &noise)?.logits)
    }

    /// Reverse-mode gradients of a scalar loss through a traced sampled
    /// forward pass, given d loss / d logits. Returns gradients for every
    /// (mu, rho) in the network.
    pub fn backprop(
        &self,
        trace: &ForwardTrace,
        noise: &Noise,
        dlogits: &Tensor2,
    ) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        let mut da = dlogits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let z = &trace.pre_act[l];
            let dz = match layer.activation {
                Activation::Relu => {
                    Tensor2::from_fn(da.rows(), da.cols(), |r, c| {
                        if z.get(r, c) > 0.0 {
                            da.get(r, c)
                        } else {
                            0.0
                        }
                    })
                }
                Activation::Identity => da.clone(),
            };
            let x = &trace.inputs[l];
            let s = &trace.pre_std[l];
            let eps = &noise.per_layer[l];
            // u = dz .* eps ./ s carries the gradient of the std path; s > 0
            // always because sigma = softplus(rho) > 0.
            let u = Tensor2::from_fn(dz.rows(), dz.cols(), |r, c| {
                dz.get(r, c) * eps.get(r, c) / s.get(r, c)
            });
            let xt = x.transpose();
            let x2t = x.map(|v| v * v).transpose();

            let g = &mut grads.layers[l];
            g.w_mu = xt.matmul(&dz)?;
            g.b_mu = dz.col_sums();
            // d std / d sigma chains as sigma * (x^2)^T u; softplus then maps
            // sigma-gradients to rho-gradients via the logistic factor.
            let sig_w = layer.weights.sigma();
            let w_sig_grad = x2t.matmul(&u)?.hadamard(&sig_w)?;
            g.w_rho = Tensor2::from_fn(w_sig_grad.rows(), w_sig_grad.cols(), |r, c| {
                w_sig_grad.get(r, c) * sigmoid(layer.weights.rho.get(r, c))
            });
            let sig_b = layer.biases.sigma();
            let b_sig_grad = u.col_sums().hadamard(&sig_b)?;
            g.b_rho = Tensor2::from_fn(1, b_sig_grad.cols(), |_, c| {
                b_sig_grad.get(0, c) * sigmoid(layer.biases.rho.get(0, c))
            });

            if l > 0 {
                let mean_part = dz.matmul(&layer.weights.mu.transpose())?;
                let sig_w2t = sig_w.map(|v| v * v).transpose();
                let var_part = u.matmul(&sig_w2t)?.hadamard(x)?;
                da = mean_part.add(&var_part)?;
            }
        }
        Ok(grads)
    }

    /// Total KL divergence KL(self || prior) summed over every weight and
    /// bias coordinate, in closed form.
    pub fn kl_between(&self, prior: &VariationalNet) -> Result<f64> {
        if !self.same_arch(prior) {
            return Err(CoreError::Domain {
                op: "kl_between",
                msg: "architectures differ".to_string(),
            });
        }
        let mut acc = 0.0;
        for (q, p) in self.layers.iter().zip(&prior.layers) {
            for (qt, pt) in [(&q.weights, &p.weights), (&q.biases, &p.biases)] {
                let (sq, sp) = (qt.sigma(), pt.sigma());
                for i in 0..qt.mu.as_slice().len() {
                    acc += kl_gauss_scalar(
                        qt.mu.as_slice()[i],
                        sq.as_slice()[i],
                        pt.mu.as_slice()[i],
                        sp.as_slice()[i],
                    );
                }
            }
        }
        Ok(acc)
    }

    /// Analytic gradients of KL(self || prior) with respect to this
    /// network's mu and rho. Per coordinate:
    ///   d/d mu_q   = (mu_q - mu_p) / sigma_p^2
    ///   d/d sigma_q = sigma_q / sigma_p^2 - 1 / sigma_q
    /// with the sigma gradient chained through softplus.
    pub fn kl_gradients(&self, prior: &VariationalNet) -> Result<GradientSet> {
        if !self.same_arch(prior) {
            return Err(CoreError::Domain {
                op: "kl_gradients",
                msg: "architectures differ".to_string(),
            });
        }
        let mut grads = GradientSet::zeros_like(self);
        for (idx, (q, p)) in self.layers.iter().zip(&prior.layers).enumerate() {
            let g = &mut grads.layers[idx];
            for (qt, pt, gmu, grho) in [
                (&q.weights, &p.weights, &mut g.w_mu, &mut g.w_rho),
                (&q.biases, &p.biases, &mut g.b_mu, &mut g.b_rho),
            ] {
                let (sq, sp) = (qt.sigma(), pt.sigma());
                for i in 0..qt.mu.as_slice().len() {
                    let sp2 = sp.as_slice()[i] * sp.as_slice()[i];
                    gmu.as_mut_slice()[i] = (qt.mu.as_slice()[i] - pt.mu.as_slice()[i]) / sp2;
                    let sqi = sq.as_slice()[i];
                    let dsigma = sqi / sp2 - 1.0 / sqi;
                    grho.as_mut_slice()[i] = dsigma * sigmoid(qt.rho.as_slice()[i]);
                }
            }
        }
        Ok(grads)
    }

    /// Deep copy used where a network is captured as a fixed reference
    /// point (source model, pre-update teacher).
    pub fn clone_frozen(&self) -> VariationalNet {
        self.clone()
    }

    /// Exponential moving average toward `student`: means average in mu
    /// space, scales in sigma space (then map back through softplus).
    /// The beta = 1 and beta = 0 endpoints short-circuit so they hold
    /// bit-exactly rather than up to softplus round-trip error.
    pub fn ema_from(&mut self, student: &VariationalNet, beta: f64) -> Result<()> {
        if !self.same_arch(student) {
            return Err(CoreError::Domain {
                op: "ema_from",
                msg: "architectures differ".to_string(),
            });
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(CoreError::Domain {
                op: "ema_from",
                msg: format!("beta {beta} outside [0, 1]"),
            });
        }
        if beta == 1.0 {
            return Ok(());
        }
        if beta == 0.0 {
            self.layers = student.layers.clone();
            return Ok(());
        }
        for (t, s) in self.layers.iter_mut().zip(&student.layers) {
            for (tt, st) in [(&mut t.weights, &s.weights), (&mut t.biases, &s.biases)] {
                for i in 0..tt.mu.as_slice().len() {
                    let m = beta * tt.mu.as_slice()[i] + (1.0 - beta) * st.mu.as_slice()[i];
                    tt.mu.as_mut_slice()[i] = m;
                    let sig = beta * softplus(tt.rho.as_slice()[i])
                        + (1.0 - beta) * softplus(st.rho.as_slice()[i]);
                    tt.rho.as_mut_slice()[i] = inv_softplus(sig);
                }
            }
        }
        Ok(())
    }

    /// One SGD step `param -= lr * grad`, with each coordinate's step
    /// optionally clamped to `[-max_step, max_step]`.
    pub fn apply_sgd(&mut self, grads: &GradientSet, lr: f64, max_step: Option<f64>) {
        assert_eq!(grads.layers.len(), self.layers.len());
        let clamp = |step: f64| match max_step {
            Some(m) => step.clamp(-m, m),
            None => step,
        };
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (param, grad) in [
                (&mut l.weights.mu, &g.w_mu),
                (&mut l.weights.rho, &g.w_rho),
                (&mut l.biases.mu, &g.b_mu),
                (&mut l.biases.rho, &g.b_rho),
            ] {
                for (p, gv) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *p -= clamp(lr * gv);
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * (l.weights.mu.as_slice().len() + l.biases.mu.as_slice().len()))
            .sum()
    }

    /// All parameters as one flat vector, per layer: weight mu (row-major),
    /// weight rho, bias mu, bias rho. The finite-difference oracle operates
    /// on this view.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.mu.iter());
            out.extend(l.weights.rho.iter());
            out.extend(l.biases.mu.iter());
            out.extend(l.biases.rho.iter());
        }
        out
    }

    /// Inverse of [`flatten_params`]; the length must match exactly.
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CoreError::Domain {
                op: "load_flat_params",
                msg: format!("expected {} values, got {}", self.param_count(), flat.len()),
            });
        }
        let mut pos = 0;
        for l in &mut self.layers {
            for t in [
                &mut l.weights.mu,
                &mut l.weights.rho,
                &mut l.biases.mu,
                &mut l.biases.rho,
            ] {
                let n = t.as_slice().len();
                t.as_mut_slice().copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Arch {
        Arch::new(2, vec![4], 3)
    }

    #[test]
    fn softplus_roundtrips() {
        for &s in &[1e-6, 1e-3, 0.1, 1.0, 5.0, 40.0] {
            let r = inv_softplus(s);
            assert!(
                (softplus(r) - s).abs() <= 1e-12 * s.max(1.0),
                "sigma {s} -> rho {r} -> {}",
                softplus(r)
            );
        }
        // Very negative rho still yields strictly positive sigma.
        assert!(softplus(-40.0) > 0.0);
    }

    #[test]
    fn forward_mean_equals_low_sigma_samples() {
        let mut rng = RngState::new(2);
        let arch = tiny_arch();
        let mut net = VariationalNet::random_init(&arch, DEFAULT_INIT_SIGMA, &mut rng);
        // Force sigma ~ 4e-18 so the sampled path collapses onto the means.
        for l in &mut net.layers {
            l.weights.rho = Tensor2::filled(l.weights.shape().0, l.weights.shape().1, -40.0);
            l.biases.rho = Tensor2::filled(1, l.out_dim(), -40.0);
        }
        let x = Tensor2::from_rows(&[&[0.3, -1.2], &[2.0, 0.4]]).unwrap();
        let mean = net.forward_mean(&x).unwrap();
        let sampled = net.forward_sample(&x, &mut rng).unwrap();
        for (a, b) in mean.iter().zip(sampled.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_preactivation_moments() {
        // One unit, x = [[1]], weight N(0, 1), bias pinned at zero: the
        // logit is standard normal by construction.
        let layer = VariationalLayer {
            weights: GaussianParamTensor::constant(1, 1, 0.0, 1.0),
            biases: GaussianParamTensor::constant(1, 1, 0.0, softplus(-40.0)),
            activation: Activation::Identity,
        };
        let net = VariationalNet::from_parts(vec![layer], 1).unwrap();
        let x = Tensor2::from_rows(&[&[1.0]]).unwrap();
        let mut rng = RngState::new(31);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| net.forward_sample(&x, &mut rng).unwrap().get(0, 0))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut rng = RngState::new(4);
        let net = VariationalNet::random_init(&tiny_arch(), 0.1, &mut rng);
        let x = Tensor2::from_rows(&[&[1.0, -0.5]]).unwrap();
        let a = net.forward_sample(&x, &mut RngState::new(900)).unwrap();
        let b = net.forward_sample(&x, &mut RngState::new(900)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn kl_of_identical_nets_is_zero() {
        let mut rng = RngState::new(6);
        let net = VariationalNet::random_init(&tiny_arch(), 0.05, &mut rng);
        let kl = net.kl_between(&net.clone_frozen()).unwrap();
        assert!(kl.abs() <= 1e-12);
    }

    #[test]
    fn kl_scalar_hand_case() {
        // KL(N(1,1) || N(0,1)) = 1/2.
        assert!((kl_gauss_scalar(1.0, 1.0, 0.0, 1.0) - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn kl_is_positive_unless_equal() {
        let mut rng = RngState::new(8);
        let q = VariationalNet::random_init(&tiny_arch(), 0.2, &mut rng);
        let p = VariationalNet::random_init(&tiny_arch(), 0.2, &mut rng);
        assert!(q.kl_between(&p).unwrap() > 0.0);
    }

    #[test]
    fn kl_gradient_hand_case() {
        // Single coordinate q = N(1, 1), p = N(0, 1): d KL / d mu_q = 1.
        let mk = |mu: f64| {
            let layer = VariationalLayer {
                weights: GaussianParamTensor::constant(1, 1, mu, 1.0),
                biases: GaussianParamTensor::constant(1, 1, 0.0, 1.0),
                activation: Activation::Identity,
            };
            VariationalNet::from_parts(vec![layer], 1).unwrap()
        };
        let q = mk(1.0);
        let p = mk(0.0);
        let g = q.kl_gradients(&p).unwrap();
        assert!((g.layers[0].w_mu.get(0, 0) - 1.0).abs() <= 1e-12);
        // Equal nets: mu gradient vanishes.
        let g0 = q.kl_gradients(&q.clone()).unwrap();
        assert!(g0.layers[0].w_mu.get(0, 0).abs() <= 1e-15);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        use crate::gradcheck::{finite_diff_grad, grad_rel_error};
        let mut rng = RngState::new(12);
        let arch = tiny_arch();
        let q = VariationalNet::random_init(&arch, 0.3, &mut rng);
        let p = VariationalNet::random_init(&arch, 0.4, &mut rng);
        let analytic = q.kl_gradients(&p).unwrap().flatten();
        let template = q.clone();
        let f = |flat: &[f64]| {
            let mut net = template.clone();
            net.load_flat_params(flat).unwrap();
            net.kl_between(&p).unwrap()
        };
        let numeric = finite_diff_grad(f, &q.flatten_params(), 1e-6).unwrap();
        let err = grad_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn pushforward_moments_match_analytic() {
        // Single affine layer: empirical pre-activation mean and variance
        // must match x mu_W + mu_b and (x.*x) sigma_W^2 + sigma_b^2.
        let mut rng = RngState::new(21);
        let arch = Arch::new(3, vec![], 2);
        let net = VariationalNet::random_init(&arch, 0.5, &mut rng);
        let x = Tensor2::from_rows(&[&[0.7, -1.1, 0.4]]).unwrap();
        let n = 100_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let out = net.forward_sample(&x, &mut rng).unwrap();
            for c in 0..2 {
                sums[c] += out.get(0, c);
                sq[c] += out.get(0, c) * out.get(0, c);
            }
        }
        let mu_w = &net.layers[0].weights.mu;
        let sig_w = net.layers[0].weights.sigma();
        let sig_b = net.layers[0].biases.sigma();
        for c in 0..2 {
            let mean_emp = sums[c] / n as f64;
            let var_emp = sq[c] / n as f64 - mean_emp * mean_emp;
            let mean_true: f64 = (0..3).map(|i| x.get(0, i) * mu_w.get(i, c)).sum::<f64>()
                + net.layers[0].biases.mu.get(0, c);
            let var_true: f64 = (0..3)
                .map(|i| x.get(0, i) * x.get(0, i) * sig_w.get(i, c) * sig_w.get(i, c))
                .sum::<f64>()
                + sig_b.get(0, c) * sig_b.get(0, c);
            let se_mean = (var_true / n as f64).sqrt();
            let se_var = var_true * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (mean_emp - mean_true).abs() <= 3.0 * se_mean,
                "mean {mean_emp} vs {mean_true}"
            );
            assert!(
                (var_emp - var_true).abs() <= 3.0 * se_var,
                "var {var_emp} vs {var_true}"
            );
        }
    }

    #[test]
    fn ema_endpoints_are_exact() {
        let mut rng = RngState::new(40);
        let arch = tiny_arch();
        let student = VariationalNet::random_init(&arch, 0.2, &mut rng);
        let teacher0 = VariationalNet::random_init(&arch, 0.3, &mut rng);

        let mut t1 = teacher0.clone();
        t1.ema_from(&student, 1.0).unwrap();
        assert_eq!(t1, teacher0);

        let mut t0 = teacher0.clone();
        t0.ema_from(&student, 0.0).unwrap();
        assert_eq!(t0, student);
    }

    #[test]
    fn ema_geometric_decay_matches_closed_form() {
        let mut rng = RngState::new(41);
        let arch = tiny_arch();
        let student = VariationalNet::random_init(&arch, 0.2, &mut rng);
        let teacher0 = VariationalNet::random_init(&arch, 0.3, &mut rng);
        let beta: f64 = 0.97;
        let k = 100;
        let mut teacher = teacher0.clone();
        for _ in 0..k {
            teacher.ema_from(&student, beta).unwrap();
        }
        let w = beta.powi(k);
        for (tl, (t0l, sl)) in teacher
            .layers
            .iter()
            .zip(teacher0.layers.iter().zip(&student.layers))
        {
            for (t, t0, s) in [
                (&tl.weights, &t0l.weights, &sl.weights),
                (&tl.biases, &t0l.biases, &sl.biases),
            ] {
                for i in 0..t.mu.as_slice().len() {
                    let expect_mu = w * t0.mu.as_slice()[i] + (1.0 - w) * s.mu.as_slice()[i];
                    assert!((t.mu.as_slice()[i] - expect_mu).abs() <= 1e-10);
                    let expect_sig = w * softplus(t0.rho.as_slice()[i])
                        + (1.0 - w) * softplus(s.rho.as_slice()[i]);
                    assert!((softplus(t.rho.as_slice()[i]) - expect_sig).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn clone_frozen_is_a_deep_copy() {
        let mut rng = RngState::new(50);
        let mut net = VariationalNet::random_init(&tiny_arch(), 0.1, &mut rng);
        let frozen = net.clone_frozen();
        net.layers[0].weights.mu.set(0, 0, 99.0);
        assert!(frozen.layers[0].weights.mu.get(0, 0) != 99.0);
        let frozen2 = frozen.clone_frozen();
        assert_eq!(frozen, frozen2);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = RngState::new(60);
        let net = VariationalNet::random_init(&tiny_arch(), 0.1, &mut rng);
        let flat = net.flatten_params();
        assert_eq!(flat.len(), net.param_count());
        let mut other = VariationalNet::constant(&tiny_arch(), 0.0, 0.5);
        other.load_flat_params(&flat).unwrap();
        assert_eq!(other, net);
        assert!(other.load_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn validate_rejects_bad_nets() {
        let arch = tiny_arch();
        let good = VariationalNet::constant(&arch, 0.0, 0.1);
        assert!(good.validate().is_ok());

        let mut relu_out = good.clone();
        relu_out.layers.last_mut().unwrap().activation = Activation::Relu;
        assert!(relu_out.validate().is_err());

        let mut wrong_classes = good.clone();
        wrong_classes.class_count = 7;
        assert!(wrong_classes.validate().is_err());
    }
}
