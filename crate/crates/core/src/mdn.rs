//! Mixture density network with a single tanh hidden layer.
//!
//! Three heads map the hidden activations to the mixture logits (`z_pi`),
//! the component means (`z_mu`) and the log standard deviations (`z_sigma`).
//! Standard deviations are `exp(z_sigma)` floored at [`SIGMA_FLOOR`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, RngStream};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_HIDDEN_UNITS: usize = 10;
pub const DEFAULT_AVERAGE_SAMPLES: usize = 100;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnParams {
    /// Hidden layer weights, `H × D`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// Mixture-weight head, `K × H`.
    pub w_pi: Matrix,
    pub b_pi: Vec<f64>,
    /// Mean head, `K × H`.
    pub w_mu: Matrix,
    pub b_mu: Vec<f64>,
    /// Log-std head, `K × H`.
    pub w_sigma: Matrix,
    pub b_sigma: Vec<f64>,
}

/// Per-instance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// How a scalar prediction is extracted from a mixture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PredictionStrategy {
    #[default]
    MaxWeightMean,
    MaxWeightSample,
    AverageSample { n_samples: usize },
}


impl MdnParams {
    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_units(&self) -> usize {
        self.w1.rows()
    }

    pub fn n_gaussians(&self) -> usize {
        self.w_pi.rows()
    }

    pub fn zeros(input_dim: usize, hidden_units: usize, n_gaussians: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden_units, input_dim),
            b1: vec![0.0; hidden_units],
            w_pi: Matrix::zeros(n_gaussians, hidden_units),
            b_pi: vec![0.0; n_gaussians],
            w_mu: Matrix::zeros(n_gaussians, hidden_units),
            b_mu: vec![0.0; n_gaussians],
            w_sigma: Matrix::zeros(n_gaussians, hidden_units),
            b_sigma: vec![0.0; n_gaussians],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, k) = (self.hidden_units(), self.n_gaussians());
        if h == 0 || k == 0 || self.input_dim() == 0 {
            return Err(Error::BadConfig("MDN dimensions must be at least 1".into()));
        }
        let heads_ok = [&self.w_pi, &self.w_mu, &self.w_sigma]
            .iter()
            .all(|w| w.rows() == k && w.cols() == h);
        let biases_ok = self.b1.len() == h
            && [&self.b_pi, &self.b_mu, &self.b_sigma].iter().all(|b| b.len() == k);
        if !heads_ok || !biases_ok {
            return Err(Error::ShapeMismatch("inconsistent MDN parameter shapes".into()));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::BadConfig("MDN parameters must be finite".into()));
        }
        Ok(())
    }

    /// All parameters concatenated in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.blocks() {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for (w, b) in self.blocks_mut() {
            let nw = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = b.len();
            b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(w, b)| w.as_slice().len() + b.len()).sum()
    }

    fn blocks(&self) -> [(&Matrix, &Vec<f64>); 4] {
        [
            (&self.w1, &self.b1),
            (&self.w_pi, &self.b_pi),
            (&self.w_mu, &self.b_mu),
            (&self.w_sigma, &self.b_sigma),
        ]
    }

    fn blocks_mut(&mut self) -> [(&mut Matrix, &mut Vec<f64>); 4] {
        [
            (&mut self.w1, &mut self.b1),
            (&mut self.w_pi, &mut self.b_pi),
            (&mut self.w_mu, &mut self.b_mu),
            (&mut self.w_sigma, &mut self.b_sigma),
        ]
    }
}

impl MixtureParams {
    pub fn n_components(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 || self.mu.len() != k || self.sigma.len() != k {
            return Err(Error::ShapeMismatch("mixture component counts differ".into()));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.pi.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::BadConfig("mixture weights must lie on the simplex".into()));
        }
        if self.sigma.iter().any(|&s| !(s >= SIGMA_FLOOR)) {
            return Err(Error::BadConfig("mixture standard deviations below floor".into()));
        }
        Ok(())
    }

    /// Mean of the mixture, `Σ π_k μ_k`.
    pub fn mean(&self) -> f64 {
        dot(&self.pi, &self.mu)
    }

    /// Variance of the mixture.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.pi
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((p, m), s)| p * (s * s + (m - mean) * (m - mean)))
            .sum()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

struct Forward {
    hidden: Vec<f64>,
    log_pi: Vec<f64>,
    mu: Vec<f64>,
    /// Raw `z_sigma` outputs.
    z_sigma: Vec<f64>,
    sigma: Vec<f64>,
}

fn forward(params: &MdnParams, x: &[f64]) -> Forward {
    let hidden: Vec<f64> = (0..params.hidden_units())
        .map(|j| (dot(params.w1.row(j), x) + params.b1[j]).tanh())
        .collect();
    let head = |w: &Matrix, b: &[f64]| -> Vec<f64> {
        (0..w.rows()).map(|k| dot(w.row(k), &hidden) + b[k]).collect()
    };
    let z_pi = head(&params.w_pi, &params.b_pi);
    let lse = log_sum_exp(&z_pi);
    let log_pi = z_pi.iter().map(|z| z - lse).collect();
    let mu = head(&params.w_mu, &params.b_mu);
    let z_sigma = head(&params.w_sigma, &params.b_sigma);
    let sigma = z_sigma.iter().map(|z| z.exp().max(SIGMA_FLOOR)).collect();
    Forward { hidden, log_pi, mu, z_sigma, sigma }
}

/// Mixture parameters for a single input.
pub fn mdn_forward(params: &MdnParams, x: &[f64]) -> MixtureParams {
    assert_eq!(x.len(), params.input_dim(), "mdn_forward: input dimension");
    let f = forward(params, x);
    let pi = softmax(&f.log_pi);
    MixtureParams { pi, mu: f.mu, sigma: f.sigma }
}

fn component_log_densities(log_pi: &[f64], mu: &[f64], sigma: &[f64], y: f64) -> Vec<f64> {
    log_pi
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((lp, m), s)| {
            let z = (y - m) / s;
            lp - HALF_LN_2PI - s.ln() - 0.5 * z * z
        })
        .collect()
}

/// Negative log-likelihood `−log Σ_k π_k N(y; μ_k, σ_k²)`, via log-sum-exp.
pub fn mdn_loss(mix: &MixtureParams, y: f64) -> f64 {
    let log_pi: Vec<f64> = mix.pi.iter().map(|p| p.ln()).collect();
    -log_sum_exp(&component_log_densities(&log_pi, &mix.mu, &mix.sigma, y))
}

/// Weighted mean NLL `Σ w_i·NLL_i / Σ w_i` over a batch. Zero total weight gives 0.
pub fn mdn_batch_loss(params: &MdnParams, x: &Matrix, y: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..x.rows() {
        if w[i] == 0.0 {
            continue;
        }
        let f = forward(params, x.row(i));
        acc += -w[i] * log_sum_exp(&component_log_densities(&f.log_pi, &f.mu, &f.sigma, y[i]));
    }
    acc / total
}

/// Weighted mean NLL of a batch and its gradient, laid out like [`MdnParams`].
pub fn mdn_loss_and_grad(
    params: &MdnParams,
    x: &Matrix,
    y: &[f64],
    w: &[f64],
) -> Result<(f64, MdnParams)> {
    if x.rows() == 0 {
        return Err(Error::BadConfig("empty batch".into()));
    }
    if x.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, network expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    if y.len() != x.rows() || w.len() != x.rows() {
        return Err(Error::LengthMismatch { left: x.rows(), right: y.len().min(w.len()) });
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::BadConfig("sample weights must be finite and nonnegative".into()));
    }
    let (h, k) = (params.hidden_units(), params.n_gaussians());
    let mut grad = MdnParams::zeros(params.input_dim(), h, k);
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let mut d_pi = vec![0.0; k];
    let mut d_mu = vec![0.0; k];
    let mut d_sigma = vec![0.0; k];
    let mut d_hidden = vec![0.0; h];
    for i in 0..x.rows() {
        let wi = w[i] / total;
        if wi == 0.0 {
            continue;
        }
        let xi = x.row(i);
        let f = forward(params, xi);
        let log_joint = component_log_densities(&f.log_pi, &f.mu, &f.sigma, y[i]);
        let lse = log_sum_exp(&log_joint);
        loss += wi * -lse;
        for c in 0..k {
            let resp = (log_joint[c] - lse).exp();
            let pi = f.log_pi[c].exp();
            let resid = y[i] - f.mu[c];
            let var = f.sigma[c] * f.sigma[c];
            d_pi[c] = wi * (pi - resp);
            d_mu[c] = -wi * resp * resid / var;
            // the floor is flat in z_sigma
            d_sigma[c] = if f.z_sigma[c].exp() > SIGMA_FLOOR {
                wi * resp * (1.0 - resid * resid / var)
            } else {
                0.0
            };
        }
        d_hidden.iter_mut().for_each(|v| *v = 0.0);
        for (w_head, g_w, g_b, delta) in [
            (&params.w_pi, &mut grad.w_pi, &mut grad.b_pi, &d_pi),
            (&params.w_mu, &mut grad.w_mu, &mut grad.b_mu, &d_mu),
            (&params.w_sigma, &mut grad.w_sigma, &mut grad.b_sigma, &d_sigma),
        ] {
            for c in 0..k {
                let dc = delta[c];
                if dc == 0.0 {
                    continue;
                }
                g_b[c] += dc;
                let row = g_w.row_mut(c);
                for j in 0..h {
                    row[j] += dc * f.hidden[j];
                    d_hidden[j] += dc * w_head[(c, j)];
                }
            }
        }
        for j in 0..h {
            let da = d_hidden[j] * (1.0 - f.hidden[j] * f.hidden[j]);
            if da == 0.0 {
                continue;
            }
            grad.b1[j] += da;
            for (g, xv) in grad.w1.row_mut(j).iter_mut().zip(xi) {
                *g += da * xv;
            }
        }
    }
    Ok((loss, grad))
}

/// Gradient of the weighted mean NLL.
pub fn mdn_loss_grad(params: &MdnParams, x: &Matrix, y: &[f64], w: &[f64]) -> Result<MdnParams> {
    Ok(mdn_loss_and_grad(params, x, y, w)?.1)
}

/// Mean of the heaviest component; ties go to the lowest index.
pub fn predict_max_weight_mean(mix: &MixtureParams) -> f64 {
    mix.mu[argmax(&mix.pi)]
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_component(pi: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.next_uniform();
    let mut cumulative = 0.0;
    for (k, p) in pi.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return k;
        }
    }
    // rounding left the cumulative sum just under 1
    pi.iter().rposition(|&p| p > 0.0).unwrap_or(pi.len() - 1)
}

/// Draws a component from `pi` and samples from it.
pub fn predict_max_weight_sample(mix: &MixtureParams, rng: &mut RngStream) -> f64 {
    let k = sample_component(&mix.pi, rng);
    mix.mu[k] + mix.sigma[k] * rng.next_normal()
}

/// Average of `n_samples` independent mixture draws.
pub fn predict_average_sample(mix: &MixtureParams, rng: &mut RngStream, n_samples: usize) -> f64 {
    let n = n_samples.max(1);
    (0..n).map(|_| predict_max_weight_sample(mix, rng)).sum::<f64>() / n as f64
}

pub fn predict(mix: &MixtureParams, strategy: PredictionStrategy, rng: &mut RngStream) -> f64 {
    match strategy {
        PredictionStrategy::MaxWeightMean => predict_max_weight_mean(mix),
        PredictionStrategy::MaxWeightSample => predict_max_weight_sample(mix, rng),
        PredictionStrategy::AverageSample { n_samples } => {
            predict_average_sample(mix, rng, n_samples)
        }
    }
}

/// `n` independent draws from the mixture.
pub fn mdn_sample(mix: &MixtureParams, rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| predict_max_weight_sample(mix, rng)).collect()
}

/// Weights uniform in `±1/√fan_in`, biases zero.
pub fn init_mdn(
    input_dim: usize,
    hidden_units: usize,
    n_gaussians: usize,
    rng: &mut RngStream,
) -> Result<MdnParams> {
    if input_dim == 0 || hidden_units == 0 || n_gaussians == 0 {
        return Err(Error::BadConfig(format!(
            "MDN sizes must be positive (input {input_dim}, hidden {hidden_units}, components {n_gaussians})"
        )));
    }
    let mut params = MdnParams::zeros(input_dim, hidden_units, n_gaussians);
    let mut fill = |w: &mut Matrix, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in w.as_mut_slice() {
            *v = rng.uniform_range(-bound, bound);
        }
    };
    fill(&mut params.w1, input_dim);
    fill(&mut params.w_pi, hidden_units);
    fill(&mut params.w_mu, hidden_units);
    fill(&mut params.w_sigma, hidden_units);
    Ok(params)
}

/// Density of the mixture at `y`, by direct summation.
pub fn mixture_pdf(mix: &MixtureParams, y: f64) -> f64 {
    mix.pi
        .iter()
        .zip(&mix.mu)
        .zip(&mix.sigma)
        .map(|((p, m), s)| p * (-0.5 * ((y - m) / s).powi(2)).exp() / (s * (2.0 * PI).sqrt()))
        .sum()
}
