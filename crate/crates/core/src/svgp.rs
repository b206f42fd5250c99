//! Sparse variational Gaussian process regression.
//!
//! The variational posterior is placed on the inducing values relative to the
//! constant mean: `u = c·1 + ũ` with `q(ũ) = N(m, L·Lᵀ)` and prior
//! `ũ ~ N(0, K_ZZ)`. This is the same family as a prior `N(c·1, K_ZZ)` on `u`
//! and gives the predictive
//!
//! ```text
//! μ(x) = c + kₓᵀ K⁻¹ m
//! v(x) = k(x, x) − kₓᵀ K⁻¹ kₓ + kₓᵀ K⁻¹ S K⁻¹ kₓ,   K = K_ZZ + 1e-6·I
//! ```
//!
//! The ELBO and its gradient with respect to every parameter are computed in
//! closed form; the per-point expected log-likelihood under a Gaussian
//! likelihood is `log N(y; μ, σ²) − v / (2σ²)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix, squared_distance, KernelHyper, MeanHyper};
use crate::numerics::{
    backward_subst_in_place, cholesky, dot, forward_subst_in_place, tri_solve, Cholesky, Matrix,
    RngStream, DEFAULT_JITTER_SCHEDULE,
};

/// Diagonal jitter added to `K_ZZ` before factorization.
pub const INDUCING_JITTER: f64 = 1e-6;

/// Lower bound applied to reported predictive variances.
pub const MIN_VARIANCE: f64 = 1e-12;

/// Full trainable parameter set of the SVGP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgpState {
    /// Inducing locations `Z`, one per row.
    pub inducing: Matrix,
    pub var_mean: Vec<f64>,
    /// Lower-triangular `L` with `S = L·Lᵀ`. Strictly-upper entries are zero.
    pub var_chol: Matrix,
    pub kernel: KernelHyper,
    pub mean: MeanHyper,
    pub log_noise: f64,
}

/// Predictive distribution of a single point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianPrediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Gradient of `−ELBO`, laid out like [`SvgpState`].
///
/// `var_chol` holds derivatives with respect to the entries of `L` itself
/// (not their logs); its strictly-upper part is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgpGrad {
    pub inducing: Matrix,
    pub var_mean: Vec<f64>,
    pub var_chol: Matrix,
    pub log_lengthscale: f64,
    pub log_outputscale: f64,
    pub constant: f64,
    pub log_noise: f64,
}

impl SvgpState {
    pub fn num_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.cols()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_inducing();
        if m == 0 {
            return Err(Error::BadConfig("SVGP needs at least one inducing point".into()));
        }
        if self.var_mean.len() != m || self.var_chol.rows() != m || self.var_chol.cols() != m {
            return Err(Error::ShapeMismatch(format!(
                "{m} inducing points with a {}-vector mean and {}x{} factor",
                self.var_mean.len(),
                self.var_chol.rows(),
                self.var_chol.cols()
            )));
        }
        for i in 0..m {
            if !(self.var_chol[(i, i)] > 0.0) {
                return Err(Error::BadConfig(format!(
                    "variational factor diagonal {i} is not positive"
                )));
            }
            for j in (i + 1)..m {
                if self.var_chol[(i, j)] != 0.0 {
                    return Err(Error::BadConfig("variational factor is not lower triangular".into()));
                }
            }
        }
        let scalars = [
            self.kernel.log_lengthscale,
            self.kernel.log_outputscale,
            self.mean.constant,
            self.log_noise,
        ];
        let finite = scalars.iter().all(|v| v.is_finite())
            && self.var_mean.iter().all(|v| v.is_finite())
            && self.inducing.as_slice().iter().all(|v| v.is_finite())
            && self.var_chol.as_slice().iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::BadConfig("SVGP state has non-finite entries".into()));
        }
        Ok(())
    }

    /// Number of entries in the unconstrained parameter vector.
    pub fn num_params(&self) -> usize {
        let m = self.num_inducing();
        m * self.input_dim() + m + m * (m + 1) / 2 + 4
    }

    /// Flattens the state into an unconstrained vector: inducing locations,
    /// variational mean, the lower triangle of `L` row by row (with the
    /// diagonal as logarithms), then log-lengthscale, log-outputscale, the
    /// constant mean and the log-noise.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let m = self.num_inducing();
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.inducing.as_slice());
        out.extend_from_slice(&self.var_mean);
        for i in 0..m {
            for j in 0..i {
                out.push(self.var_chol[(i, j)]);
            }
            out.push(self.var_chol[(i, i)].ln());
        }
        out.extend([
            self.kernel.log_lengthscale,
            self.kernel.log_outputscale,
            self.mean.constant,
            self.log_noise,
        ]);
        out
    }

    /// Inverse of [`SvgpState::to_unconstrained`]; shapes are taken from `self`.
    pub fn set_unconstrained(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "unconstrained vector length");
        let m = self.num_inducing();
        let nz = self.inducing.as_slice().len();
        let (z, rest) = flat.split_at(nz);
        self.inducing.as_mut_slice().copy_from_slice(z);
        let (mean, rest) = rest.split_at(m);
        self.var_mean.copy_from_slice(mean);
        let mut it = rest.iter();
        for i in 0..m {
            for j in 0..i {
                self.var_chol[(i, j)] = *it.next().unwrap();
            }
            self.var_chol[(i, i)] = it.next().unwrap().exp();
        }
        let tail: Vec<f64> = it.copied().collect();
        self.kernel.log_lengthscale = tail[0];
        self.kernel.log_outputscale = tail[1];
        self.mean.constant = tail[2];
        self.log_noise = tail[3];
    }
}

impl SvgpGrad {
    /// Gradient in the coordinates of [`SvgpState::to_unconstrained`].
    pub fn to_unconstrained(&self, state: &SvgpState) -> Vec<f64> {
        let m = state.num_inducing();
        let mut out = Vec::with_capacity(state.num_params());
        out.extend_from_slice(self.inducing.as_slice());
        out.extend_from_slice(&self.var_mean);
        for i in 0..m {
            for j in 0..i {
                out.push(self.var_chol[(i, j)]);
            }
            out.push(self.var_chol[(i, i)] * state.var_chol[(i, i)]);
        }
        out.extend([self.log_lengthscale, self.log_outputscale, self.constant, self.log_noise]);
        out
    }
}

/// `KL(N(m_q, L_q·L_qᵀ) ‖ N(m_p, L_p·L_pᵀ))` in closed form.
pub fn kl_gaussians(m_q: &[f64], l_q: &Matrix, m_p: &[f64], l_p: &Matrix) -> Result<f64> {
    let m = m_q.len();
    if m_p.len() != m || l_q.rows() != m || l_p.rows() != m || !l_q.is_square() || !l_p.is_square()
    {
        return Err(Error::ShapeMismatch("kl_gaussians: inconsistent dimensions".into()));
    }
    if let Some(index) = (0..m).find(|&i| l_q[(i, i)] == 0.0) {
        return Err(Error::SingularTriangular { index });
    }
    // tr(S_p⁻¹ S_q) = ‖L_p⁻¹ L_q‖_F²
    let lower_q = Matrix::from_fn(m, m, |i, j| if j <= i { l_q[(i, j)] } else { 0.0 });
    let w = tri_solve(l_p, &lower_q, false)?;
    let trace: f64 = w.as_slice().iter().map(|v| v * v).sum();
    let diff: Vec<f64> = m_p.iter().zip(m_q).map(|(p, q)| p - q).collect();
    let r = tri_solve(l_p, &Matrix::column(&diff), false)?;
    let maha: f64 = r.as_slice().iter().map(|v| v * v).sum();
    let log_det_p: f64 = (0..m).map(|i| 2.0 * l_p[(i, i)].abs().ln()).sum();
    let log_det_q: f64 = (0..m).map(|i| 2.0 * l_q[(i, i)].abs().ln()).sum();
    Ok((0.5 * (trace + maha - m as f64 + log_det_p - log_det_q)).max(0.0))
}

/// Factorization of the inducing covariance, reusable across many queries.
pub struct SvgpPredictor<'a> {
    state: &'a SvgpState,
    chol: Cholesky,
    beta: Vec<f64>,
}

impl<'a> SvgpPredictor<'a> {
    pub fn new(state: &'a SvgpState) -> Result<Self> {
        state.validate()?;
        let chol = inducing_cholesky(state)?;
        let beta = chol.solve_vec(&state.var_mean);
        Ok(Self { state, chol, beta })
    }

    /// Latent predictive distribution of `f(x)`.
    pub fn predict(&self, x: &[f64]) -> GaussianPrediction {
        let state = self.state;
        assert_eq!(x.len(), state.input_dim(), "query dimension");
        let k: Vec<f64> = (0..state.num_inducing())
            .map(|a| crate::kernels::rbf(state.inducing.row(a), x, &state.kernel))
            .collect();
        let mean = state.mean.constant + dot(&k, &self.beta);
        let alpha = self.chol.solve_vec(&k);
        let q = dot(&k, &alpha);
        let s_alpha = lt_matvec(&state.var_chol, &alpha);
        let variance = state.kernel.outputscale() - q + dot(&s_alpha, &s_alpha);
        GaussianPrediction { mean, variance: variance.max(MIN_VARIANCE) }
    }

    /// Observation-level prediction: latent variance plus the noise variance.
    pub fn predict_observed(&self, x: &[f64]) -> GaussianPrediction {
        let latent = self.predict(x);
        GaussianPrediction { mean: latent.mean, variance: latent.variance + self.state.noise() }
    }
}

/// Latent predictive distribution at a single input.
pub fn svgp_predict(state: &SvgpState, x: &[f64]) -> Result<GaussianPrediction> {
    if x.len() != state.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "query has {} features, model expects {}",
            x.len(),
            state.input_dim()
        )));
    }
    Ok(SvgpPredictor::new(state)?.predict(x))
}

fn inducing_cholesky(state: &SvgpState) -> Result<Cholesky> {
    let mut kzz = kernel_matrix(&state.inducing, &state.inducing, &state.kernel);
    kzz.add_diagonal(INDUCING_JITTER);
    cholesky(&kzz, &DEFAULT_JITTER_SCHEDULE)
}

/// `Lᵀ·v` for lower-triangular `L`.
fn lt_matvec(l: &Matrix, v: &[f64]) -> Vec<f64> {
    let m = l.rows();
    (0..m).map(|j| (j..m).map(|i| l[(i, j)] * v[i]).sum()).collect()
}

fn check_batch(state: &SvgpState, x: &Matrix, y: &[f64], w: &[f64]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::BadConfig("empty batch".into()));
    }
    if x.cols() != state.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, model expects {}",
            x.cols(),
            state.input_dim()
        )));
    }
    if y.len() != x.rows() {
        return Err(Error::LengthMismatch { left: x.rows(), right: y.len() });
    }
    if w.len() != x.rows() {
        return Err(Error::LengthMismatch { left: x.rows(), right: w.len() });
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::BadConfig("sample weights must be finite and nonnegative".into()));
    }
    state.validate()
}

/// Evidence lower bound on a (mini-)batch:
/// `(N/B)·Σ w_i·E_q[log N(y_i | f_i, σ²)] − KL(q(u) ‖ p(u))`.
pub fn elbo(state: &SvgpState, x: &Matrix, y: &[f64], w: &[f64], n_total: usize) -> Result<f64> {
    Ok(evaluate(state, x, y, w, n_total, GradMode::None)?.0)
}

/// Gradient of `−ELBO` with respect to every field of the state.
pub fn elbo_grad(
    state: &SvgpState,
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    n_total: usize,
) -> Result<SvgpGrad> {
    Ok(evaluate(state, x, y, w, n_total, GradMode::Direct)?.1.unwrap())
}

/// ELBO and the gradient of `−ELBO` from a single pass.
pub fn elbo_and_grad(
    state: &SvgpState,
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    n_total: usize,
) -> Result<(f64, SvgpGrad)> {
    let (value, grad) = evaluate(state, x, y, w, n_total, GradMode::Direct)?;
    Ok((value, grad.unwrap()))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GradMode {
    None,
    /// With respect to `m` and `L` as stored.
    Direct,
    /// With respect to whitened `m̃ = L_K⁻¹m`, `L̃ = L_K⁻¹L`, where `L_K` is the
    /// Cholesky factor of `K_ZZ` and moves with `Z` and the kernel.
    Whitened,
}

fn evaluate(
    state: &SvgpState,
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    n_total: usize,
    mode: GradMode,
) -> Result<(f64, Option<SvgpGrad>)> {
    check_batch(state, x, y, w)?;
    let want_grad = mode != GradMode::None;
    let m = state.num_inducing();
    let b = x.rows();
    let d = state.input_dim();
    let hyper = &state.kernel;
    let ell2 = hyper.lengthscale().powi(2);
    let outputscale = hyper.outputscale();
    let noise = state.noise();
    let c = state.mean.constant;
    let l = &state.var_chol;

    let kzz_raw = kernel_matrix(&state.inducing, &state.inducing, hyper);
    let mut kzz = kzz_raw.clone();
    kzz.add_diagonal(INDUCING_JITTER);
    let chol = cholesky(&kzz, &DEFAULT_JITTER_SCHEDULE)?;
    // kzx_t row i is k_i = K_Z,x_i
    let kzx_t = kernel_matrix(x, &state.inducing, hyper);

    // alpha_i = K⁻¹ k_i, lta_i = Lᵀ alpha_i, gamma_i = K⁻¹ S alpha_i
    let mut alpha_t = Matrix::zeros(b, m);
    let mut lta_t = Matrix::zeros(b, m);
    let mut gamma_t = Matrix::zeros(b, m);
    let lf = chol.factor();
    for i in 0..b {
        let alpha = alpha_t.row_mut(i);
        alpha.copy_from_slice(kzx_t.row(i));
        forward_subst_in_place(lf, alpha);
        backward_subst_in_place(lf, alpha);
        let lta = lt_matvec(l, alpha_t.row(i));
        if want_grad {
            let mut gamma = l.matvec(&lta);
            forward_subst_in_place(lf, &mut gamma);
            backward_subst_in_place(lf, &mut gamma);
            gamma_t.row_mut(i).copy_from_slice(&gamma);
        }
        lta_t.row_mut(i).copy_from_slice(&lta);
    }

    let batch_scale = n_total as f64 / b as f64;
    let log_norm = -0.5 * (2.0 * PI * noise).ln();
    let mut lik = 0.0;
    let mut g_mu = vec![0.0; b];
    let mut g_v = vec![0.0; b];
    let mut g_log_noise = 0.0;
    let mut g_constant = 0.0;
    for i in 0..b {
        let alpha = alpha_t.row(i);
        let mu = c + dot(alpha, &state.var_mean);
        let q = dot(kzx_t.row(i), alpha);
        let lta = lta_t.row(i);
        let v = outputscale - q + dot(lta, lta);
        let resid = y[i] - mu;
        let scale = batch_scale * w[i];
        lik += scale * (log_norm - (resid * resid + v) / (2.0 * noise));
        g_mu[i] = -scale * resid / noise;
        g_v[i] = scale / (2.0 * noise);
        g_log_noise -= scale * (-0.5 + (resid * resid + v) / (2.0 * noise));
        g_constant += g_mu[i];
    }

    // KL(N(m, S) ‖ N(0, K))
    let k_inv_l = chol.solve(l);
    let l_inv_l = tri_solve(lf, l, false)?;
    let trace: f64 = l_inv_l.as_slice().iter().map(|v| v * v).sum();
    let beta = chol.solve_vec(&state.var_mean);
    let maha = dot(&state.var_mean, &beta);
    let log_det_s: f64 = (0..m).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let kl = 0.5 * (trace + maha - m as f64 + chol.log_det() - log_det_s);

    let value = lik - kl;
    if !want_grad {
        return Ok((value, None));
    }

    // d(−ELBO)/dm
    let mut g_mean = alpha_t.tr_matvec(&g_mu);
    for (g, bv) in g_mean.iter_mut().zip(&beta) {
        *g += bv;
    }

    // d(−ELBO)/dL: 2·A·diag(g_v)·(LᵀA)ᵀ + K⁻¹L − diag(1/L_jj)
    let mut g_chol = k_inv_l.clone();
    for i in 0..b {
        let gv2 = 2.0 * g_v[i];
        let alpha = alpha_t.row(i);
        let lta = lta_t.row(i);
        for p in 0..m {
            let ap = gv2 * alpha[p];
            if ap == 0.0 {
                continue;
            }
            for q in 0..=p {
                g_chol[(p, q)] += ap * lta[q];
            }
        }
    }
    for p in 0..m {
        g_chol[(p, p)] -= 1.0 / l[(p, p)];
        for q in (p + 1)..m {
            g_chol[(p, q)] = 0.0;
        }
    }

    // d(−ELBO)/dK, treating every entry of K as free.
    let k_inv = chol.inverse();
    let k_inv_s_k_inv = k_inv_l.matmul(&k_inv_l.transpose());
    let a_gmu = alpha_t.tr_matvec(&g_mu);
    let mut g_k = Matrix::from_fn(m, m, |p, q| {
        0.5 * (k_inv[(p, q)] - k_inv_s_k_inv[(p, q)] - beta[p] * beta[q]) - a_gmu[p] * beta[q]
    });
    for i in 0..b {
        let gv = g_v[i];
        if gv == 0.0 {
            continue;
        }
        let alpha = alpha_t.row(i);
        let gamma = gamma_t.row(i);
        for p in 0..m {
            let (ap, gp) = (gv * alpha[p], gv * gamma[p]);
            let row = g_k.row_mut(p);
            for q in 0..m {
                row[q] += ap * (alpha[q] - gamma[q]) - gp * alpha[q];
            }
        }
    }

    if mode == GradMode::Whitened {
        // m = L_K·m̃ and L = L_K·L̃ also depend on K through L_K
        let mut m_w = state.var_mean.clone();
        forward_subst_in_place(lf, &mut m_w);
        let l_w = l_inv_l;
        let g_lk = Matrix::from_fn(m, m, |p, q| {
            if q > p {
                return 0.0;
            }
            g_mean[p] * m_w[q] + (0..=q).map(|r| g_chol[(p, r)] * l_w[(q, r)]).sum::<f64>()
        });
        let extra = cholesky_backward(lf, &g_lk)?;
        for (g, e) in g_k.as_mut_slice().iter_mut().zip(extra.as_slice()) {
            *g += e;
        }
        g_mean = lf.tr_matvec(&g_mean);
        g_chol = Matrix::from_fn(m, m, |p, q| {
            if q > p {
                return 0.0;
            }
            (p..m).map(|r| lf[(r, p)] * g_chol[(r, q)]).sum()
        });
    }

    // chain rule through K_ZZ and K_Zx to Z and the kernel hyperparameters
    let mut g_z = Matrix::zeros(m, d);
    let mut g_log_ell = 0.0;
    let mut g_log_out = 0.0;
    for p in 0..m {
        for q in 0..m {
            let coeff = g_k[(p, q)] * kzz_raw[(p, q)];
            g_log_out += coeff;
            if p == q {
                continue;
            }
            let zp = state.inducing.row(p);
            let zq = state.inducing.row(q);
            g_log_ell += coeff * squared_distance(zp, zq) / ell2;
            for k in 0..d {
                let delta = coeff * (zp[k] - zq[k]) / ell2;
                g_z[(p, k)] -= delta;
                g_z[(q, k)] += delta;
            }
        }
    }
    for i in 0..b {
        let alpha = alpha_t.row(i);
        let gamma = gamma_t.row(i);
        let xi = x.row(i);
        for p in 0..m {
            let g_kzx = g_mu[i] * beta[p] + 2.0 * g_v[i] * (gamma[p] - alpha[p]);
            let coeff = g_kzx * kzx_t[(i, p)];
            if coeff == 0.0 {
                continue;
            }
            g_log_out += coeff;
            let zp = state.inducing.row(p);
            g_log_ell += coeff * squared_distance(zp, xi) / ell2;
            for k in 0..d {
                g_z[(p, k)] -= coeff * (zp[k] - xi[k]) / ell2;
            }
        }
        // k(x_i, x_i) = σ_k²
        g_log_out += g_v[i] * outputscale;
    }

    let grad = SvgpGrad {
        inducing: g_z,
        var_mean: g_mean,
        var_chol: g_chol,
        log_lengthscale: g_log_ell,
        log_outputscale: g_log_out,
        constant: g_constant,
        log_noise: g_log_noise,
    };
    Ok((value, Some(grad)))
}

/// Reverse-mode step through `A = L·Lᵀ`: maps the gradient with respect to the
/// lower triangle of `L` to a symmetric gradient with respect to `A`.
fn cholesky_backward(l: &Matrix, g_l: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    // P = Φ(Lᵀ·Ḡ), lower triangle with halved diagonal
    let ltg = l.transpose().matmul(g_l);
    let p = Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => ltg[(i, j)],
        std::cmp::Ordering::Equal => 0.5 * ltg[(i, i)],
        std::cmp::Ordering::Less => 0.0,
    });
    // L⁻ᵀ·P·L⁻¹
    let right = tri_solve(l, &p.transpose(), true)?.transpose();
    let s = tri_solve(l, &right, true)?;
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)])))
}

fn inducing_factor(state: &SvgpState) -> Result<Matrix> {
    let mut kzz = kernel_matrix(&state.inducing, &state.inducing, &state.kernel);
    kzz.add_diagonal(INDUCING_JITTER);
    Ok(cholesky(&kzz, &DEFAULT_JITTER_SCHEDULE)?.into_factor())
}

impl SvgpState {
    /// Like [`SvgpState::to_unconstrained`] but with the variational mean and
    /// factor in whitened coordinates `m̃ = L_K⁻¹m`, `L̃ = L_K⁻¹L`.
    pub fn to_whitened(&self) -> Result<Vec<f64>> {
        let lk = inducing_factor(self)?;
        let mut white = self.clone();
        forward_subst_in_place(&lk, &mut white.var_mean);
        white.var_chol = tri_solve(&lk, &self.var_chol, false)?;
        Ok(white.to_unconstrained())
    }

    /// Inverse of [`SvgpState::to_whitened`].
    pub fn set_whitened(&mut self, flat: &[f64]) -> Result<()> {
        self.set_unconstrained(flat);
        let lk = inducing_factor(self)?;
        self.var_mean = lk.matvec(&self.var_mean);
        self.var_chol = lk.matmul(&self.var_chol);
        Ok(())
    }
}

/// ELBO and the gradient of `−ELBO` in the coordinates of
/// [`SvgpState::to_whitened`]. The ELBO itself does not depend on the
/// coordinates; the whitened ones are far better conditioned for first-order
/// optimizers.
pub fn elbo_and_whitened_grad(
    state: &SvgpState,
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    n_total: usize,
) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = evaluate(state, x, y, w, n_total, GradMode::Whitened)?;
    let grad = grad.unwrap();
    let lk = inducing_factor(state)?;
    let l_white = tri_solve(&lk, &state.var_chol, false)?;
    let mut white = state.clone();
    white.var_chol = l_white;
    Ok((value, grad.to_unconstrained(&white)))
}

/// Initial state: inducing rows drawn from `train_x` without replacement,
/// `q(u)` equal to the prior (`m = 0`, `L = chol(K_ZZ + jitter·I)`), unit
/// hyperparameters and noise, constant = mean target.
pub fn init_svgp(
    train_x: &Matrix,
    train_y: &[f64],
    m_inducing: usize,
    rng: &mut RngStream,
) -> Result<SvgpState> {
    let n = train_x.rows();
    if train_y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: train_y.len() });
    }
    if m_inducing == 0 || m_inducing > n {
        return Err(Error::BadConfig(format!(
            "number of inducing points must be in 1..={n}, got {m_inducing}"
        )));
    }
    let rows = rng.sample_indices(n, m_inducing);
    let constant = train_y.iter().sum::<f64>() / n as f64;
    let inducing = train_x.select_rows(&rows);
    let kernel = KernelHyper::default();
    let mut kzz = kernel_matrix(&inducing, &inducing, &kernel);
    kzz.add_diagonal(INDUCING_JITTER);
    let var_chol = cholesky(&kzz, &DEFAULT_JITTER_SCHEDULE)?.into_factor();
    Ok(SvgpState {
        inducing,
        var_mean: vec![0.0; m_inducing],
        var_chol,
        kernel,
        mean: MeanHyper { constant },
        log_noise: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(z: f64, m: f64, s: f64) -> SvgpState {
        SvgpState {
            inducing: Matrix::column(&[z]),
            var_mean: vec![m],
            var_chol: Matrix::column(&[s.sqrt()]),
            kernel: KernelHyper::default(),
            mean: MeanHyper { constant: 0.0 },
            log_noise: 0.0,
        }
    }

    fn random_state(rng: &mut RngStream, m: usize, d: usize) -> SvgpState {
        let inducing = Matrix::from_fn(m, d, |_, _| rng.uniform_range(-2.0, 2.0));
        let var_chol = Matrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.uniform_range(-0.3, 0.3),
            std::cmp::Ordering::Equal => rng.uniform_range(0.3, 1.2),
            std::cmp::Ordering::Less => 0.0,
        });
        SvgpState {
            inducing,
            var_mean: (0..m).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            var_chol,
            kernel: KernelHyper {
                log_lengthscale: rng.uniform_range(-0.3, 0.5),
                log_outputscale: rng.uniform_range(-0.5, 0.5),
            },
            mean: MeanHyper { constant: rng.uniform_range(-1.0, 1.0) },
            log_noise: rng.uniform_range(-1.5, 0.0),
        }
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let l = Matrix::from_rows(&[[1.0, 0.0], [0.4, 0.7]]).unwrap();
        let m = [0.3, -1.0];
        assert!(kl_gaussians(&m, &l, &m, &l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_scalar_mean_shift() {
        let one = Matrix::identity(1);
        let kl = kl_gaussians(&[1.0], &one, &[0.0], &one).unwrap();
        assert!((kl - 0.5).abs() < 1e-14);
    }

    #[test]
    fn kl_singular_factor() {
        let l = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let ok = Matrix::identity(2);
        assert!(matches!(
            kl_gaussians(&[0.0, 0.0], &l, &[0.0, 0.0], &ok),
            Err(Error::SingularTriangular { index: 1 })
        ));
        assert!(kl_gaussians(&[0.0, 0.0], &ok, &[0.0, 0.0], &l).is_err());
    }

    #[test]
    fn kl_is_nonnegative_on_random_inputs() {
        let mut rng = RngStream::new(3);
        for _ in 0..200 {
            let a = random_state(&mut rng, 4, 1);
            let b = random_state(&mut rng, 4, 1);
            let kl = kl_gaussians(&a.var_mean, &a.var_chol, &b.var_mean, &b.var_chol).unwrap();
            assert!(kl >= -1e-10);
        }
    }

    #[test]
    fn zero_mean_state_predicts_zero() {
        let mut rng = RngStream::new(8);
        let mut state = random_state(&mut rng, 5, 2);
        state.var_mean = vec![0.0; 5];
        state.mean.constant = 0.0;
        for _ in 0..10 {
            let x = [rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0)];
            assert_eq!(svgp_predict(&state, &x).unwrap().mean, 0.0);
        }
    }

    #[test]
    fn single_inducing_point_at_query() {
        let state = scalar_state(0.0, 1.0, 1e-12);
        let p = svgp_predict(&state, &[0.0]).unwrap();
        assert!((p.mean - 1.0).abs() < 1e-5);
        assert!((p.variance - 1e-12).abs() < 1e-6);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let mut rng = RngStream::new(1);
        let state = random_state(&mut rng, 6, 1);
        let p = svgp_predict(&state, &[1e3]).unwrap();
        assert!((p.variance - state.kernel.outputscale()).abs() < 1e-6);
        assert!((p.mean - state.mean.constant).abs() < 1e-9);
    }

    #[test]
    fn latent_variance_never_exceeds_prior() {
        let mut rng = RngStream::new(21);
        for _ in 0..20 {
            let mut state = random_state(&mut rng, 5, 2);
            // the bound needs S ≼ K, so take S = L_K D² L_Kᵀ with D ≤ I
            let mut k = kernel_matrix(&state.inducing, &state.inducing, &state.kernel);
            k.add_diagonal(INDUCING_JITTER);
            let lk = cholesky(&k, &[0.0]).unwrap().factor().clone();
            let d: Vec<f64> = (0..5).map(|_| rng.uniform_range(0.05, 1.0)).collect();
            state.var_chol = Matrix::from_fn(5, 5, |i, j| lk[(i, j)] * d[j]);
            let predictor = SvgpPredictor::new(&state).unwrap();
            for _ in 0..50 {
                let x = [rng.uniform_range(-4.0, 4.0), rng.uniform_range(-4.0, 4.0)];
                let p = predictor.predict(&x);
                assert!(p.variance > 0.0);
                assert!(p.variance <= state.kernel.outputscale() + 1e-8);
            }
        }
    }

    #[test]
    fn zero_weights_leave_only_the_kl_term() {
        let mut rng = RngStream::new(4);
        let state = random_state(&mut rng, 3, 1);
        let x = Matrix::from_fn(6, 1, |_, _| rng.uniform_range(-2.0, 2.0));
        let y: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let value = elbo(&state, &x, &y, &[0.0; 6], 60).unwrap();
        let kl = kl_gaussians(
            &state.var_mean,
            &state.var_chol,
            &[0.0; 3],
            inducing_cholesky(&state).unwrap().factor(),
        )
        .unwrap();
        assert!((value + kl).abs() < 1e-12);
    }

    #[test]
    fn likelihood_term_is_linear_in_weights() {
        let mut rng = RngStream::new(5);
        let state = random_state(&mut rng, 3, 2);
        let x = Matrix::from_fn(5, 2, |_, _| rng.uniform_range(-2.0, 2.0));
        let y: Vec<f64> = (0..5).map(|_| rng.next_normal()).collect();
        let kl = -elbo(&state, &x, &y, &[0.0; 5], 5).unwrap();
        let e1 = elbo(&state, &x, &y, &[1.0; 5], 5).unwrap();
        let e2 = elbo(&state, &x, &y, &[2.0; 5], 5).unwrap();
        assert!(((e2 + kl) - 2.0 * (e1 + kl)).abs() < 1e-10);
    }

    #[test]
    fn upper_triangle_gradient_is_zero() {
        let mut rng = RngStream::new(6);
        let state = random_state(&mut rng, 4, 1);
        let x = Matrix::from_fn(7, 1, |_, _| rng.uniform_range(-2.0, 2.0));
        let y: Vec<f64> = (0..7).map(|_| rng.next_normal()).collect();
        let g = elbo_grad(&state, &x, &y, &[1.0; 7], 7).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_eq!(g.var_chol[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn unconstrained_round_trip() {
        let mut rng = RngStream::new(7);
        let state = random_state(&mut rng, 4, 3);
        let flat = state.to_unconstrained();
        assert_eq!(flat.len(), state.num_params());
        let mut other = state.clone();
        other.var_mean = vec![9.0; 4];
        other.set_unconstrained(&flat);
        for (a, b) in other.var_chol.as_slice().iter().zip(state.var_chol.as_slice()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        assert_eq!(other.var_mean, state.var_mean);
        assert_eq!(other.inducing, state.inducing);
    }

    #[test]
    fn init_rules() {
        let x = Matrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = init_svgp(&x, &y, 6, &mut RngStream::new(9)).unwrap();
        let b = init_svgp(&x, &y, 6, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let mut rows: Vec<Vec<u64>> = (0..6)
            .map(|i| a.inducing.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        let mut expected: Vec<Vec<u64>> =
            (0..6).map(|i| x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        expected.sort();
        assert_eq!(rows, expected);
        let s = a.var_chol.matmul(&a.var_chol.transpose());
        let mut k = kernel_matrix(&a.inducing, &a.inducing, &a.kernel);
        k.add_diagonal(INDUCING_JITTER);
        for (p, q) in s.as_slice().iter().zip(k.as_slice()) {
            assert!((p - q).abs() < 1e-12);
        }
        let prior = cholesky(&k, &[0.0]).unwrap().into_factor();
        assert!(kl_gaussians(&a.var_mean, &a.var_chol, &[0.0; 6], &prior).unwrap() < 1e-9);
        assert_eq!(a.var_mean, vec![0.0; 6]);
        assert_eq!(a.mean.constant, 3.5);
        assert_eq!(a.log_noise, 0.0);
        assert!(matches!(init_svgp(&x, &y, 7, &mut RngStream::new(9)), Err(Error::BadConfig(_))));
        assert!(matches!(init_svgp(&x, &y, 0, &mut RngStream::new(9)), Err(Error::BadConfig(_))));
    }
}
