//! Independent oracles and reusable checks shared by the integration tests and
//! the acceptance suite. Dense linear algebra here goes through nalgebra, not
//! the crate's own factorizations.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use uqkit::kernels::{kernel_matrix, KernelHyper, MeanHyper};
use uqkit::mdn::{init_mdn, mdn_batch_loss, mdn_loss_and_grad, MdnParams};
use uqkit::numerics::{Matrix, RngStream};
use uqkit::svgp::{elbo, elbo_and_grad, SvgpState, INDUCING_JITTER};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// `log N(y; c·1, K_NN + σ²I)` by dense Cholesky.
pub fn exact_log_evidence(x: &Matrix, y: &[f64], kernel: &KernelHyper, mean: &MeanHyper, noise: f64) -> f64 {
    let n = y.len();
    let k = to_na(&kernel_matrix(x, x, kernel)) + DMatrix::identity(n, n) * noise;
    let chol = k.cholesky().expect("evidence covariance is PD");
    let r = DVector::from_iterator(n, y.iter().map(|v| v - mean.constant));
    let alpha = chol.solve(&r);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * r.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Gauss–Hermite nodes and weights for `∫ e^{−t²} f(t) dt` via the
/// Golub–Welsch eigenproblem.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut out: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], sqrt_pi * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (y - mean).powi(2) / var
}

/// ELBO recomputed from scratch: expected log-likelihoods by 20-point
/// Gauss–Hermite quadrature over the marginals of `q(f)`, KL in closed form
/// against the prior on the centered inducing values.
pub fn oracle_elbo(state: &SvgpState, x: &Matrix, y: &[f64], w: &[f64], n_total: usize) -> f64 {
    let m = state.num_inducing();
    let kzz = to_na(&kernel_matrix(&state.inducing, &state.inducing, &state.kernel))
        + DMatrix::identity(m, m) * INDUCING_JITTER;
    let kzx = to_na(&kernel_matrix(&state.inducing, x, &state.kernel));
    let kinv = kzz.clone().try_inverse().expect("K invertible");
    let l = to_na(&state.var_chol);
    let s = &l * l.transpose();
    let mv = DVector::from_column_slice(&state.var_mean);
    let noise = state.noise();
    let nodes = gauss_hermite(20);
    let outputscale = state.kernel.outputscale();
    let mut lik = 0.0;
    for i in 0..y.len() {
        let k = kzx.column(i).into_owned();
        let a = &kinv * &k;
        let mu = state.mean.constant + a.dot(&mv);
        let var = (outputscale - k.dot(&a) + (a.transpose() * &s * &a)[(0, 0)]).max(1e-12);
        let expected: f64 = nodes
            .iter()
            .map(|&(t, wt)| wt * log_normal(y[i], mu + (2.0 * var).sqrt() * t, noise))
            .sum::<f64>()
            / std::f64::consts::PI.sqrt();
        lik += w[i] * expected;
    }
    let kl = 0.5
        * ((&kinv * &s).trace() + (mv.transpose() * &kinv * &mv)[(0, 0)] - m as f64
            + kzz.determinant().ln()
            - s.determinant().ln());
    n_total as f64 / y.len() as f64 * lik - kl
}

pub fn random_inputs(rng: &mut RngStream, n: usize, d: usize, scale: f64) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.uniform_range(-scale, scale))
}

/// A random but well-conditioned SVGP state.
pub fn random_svgp_state(rng: &mut RngStream, m: usize, d: usize) -> SvgpState {
    SvgpState {
        inducing: random_inputs(rng, m, d, 2.0),
        var_mean: (0..m).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        var_chol: Matrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.uniform_range(-0.3, 0.3),
            std::cmp::Ordering::Equal => rng.uniform_range(0.3, 1.0),
            std::cmp::Ordering::Less => 0.0,
        }),
        kernel: KernelHyper {
            log_lengthscale: rng.uniform_range(-0.2, 0.6),
            log_outputscale: rng.uniform_range(-0.5, 0.5),
        },
        mean: MeanHyper { constant: rng.uniform_range(-1.0, 1.0) },
        log_noise: rng.uniform_range(-1.5, -0.2),
    }
}

/// Worst discrepancy of `analytic` against central differences of `f`, as
/// `(index, analytic, numeric)` if any entry fails both tolerances.
pub fn fd_mismatch(
    flat: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> Option<(usize, f64, f64)> {
    let mut probe = flat.to_vec();
    for i in 0..flat.len() {
        probe[i] = flat[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = flat[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = flat[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = (analytic[i] - numeric).abs();
        let scale = analytic[i].abs().max(numeric.abs());
        if err > FD_ABS_TOL && err > FD_REL_TOL * scale {
            return Some((i, analytic[i], numeric));
        }
    }
    None
}

/// ELBO gradients on `instances` random problems; returns the failures.
pub fn check_elbo_gradients(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = RngStream::new(seed);
    let mut failures = Vec::new();
    for t in 0..instances {
        let m = 1 + t % 5;
        let d = 1 + t % 3;
        let n = 3 + t % 8;
        let state = random_svgp_state(&mut rng, m, d);
        let x = random_inputs(&mut rng, n, d, 2.5);
        let y: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        let n_total = n * (1 + t % 3);
        let (_, grad) = elbo_and_grad(&state, &x, &y, &w, n_total).unwrap();
        let analytic = grad.to_unconstrained(&state);
        let flat = state.to_unconstrained();
        let mut probe = state.clone();
        let mismatch = fd_mismatch(&flat, &analytic, |p| {
            probe.set_unconstrained(p);
            -elbo(&probe, &x, &y, &w, n_total).unwrap()
        });
        if let Some((i, a, num)) = mismatch {
            failures.push(format!("elbo instance {t}: param {i} analytic {a:e} numeric {num:e}"));
        }
    }
    failures
}

/// MDN loss gradients on `instances` random problems; returns the failures.
pub fn check_mdn_gradients(instances: usize, seed: u64) -> Vec<String> {
    let mut rng = RngStream::new(seed);
    let mut failures = Vec::new();
    for t in 0..instances {
        let d = 1 + t % 3;
        let h = 2 + t % 4;
        let k = 1 + t % 4;
        let n = 4 + t % 6;
        let mut params = init_mdn(d, h, k, &mut rng).unwrap();
        let mut flat = params.to_flat();
        flat.iter_mut().for_each(|v| *v += 0.3 * rng.next_normal());
        params.set_flat(&flat);
        let x = random_inputs(&mut rng, n, d, 1.5);
        let y: Vec<f64> = (0..n).map(|_| 2.0 * rng.next_normal()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        let (_, grad) = mdn_loss_and_grad(&params, &x, &y, &w).unwrap();
        let mut probe: MdnParams = params.clone();
        let mismatch = fd_mismatch(&flat, &grad.to_flat(), |p| {
            probe.set_flat(p);
            mdn_batch_loss(&probe, &x, &y, &w)
        });
        if let Some((i, a, num)) = mismatch {
            failures.push(format!("mdn instance {t}: param {i} analytic {a:e} numeric {num:e}"));
        }
    }
    failures
}

/// Full-batch ELBO minus exact evidence on random small datasets; returns the
/// largest violation of `elbo ≤ evidence + 1e-8` (negative when all hold).
pub fn max_bound_violation(datasets: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let mut worst = f64::NEG_INFINITY;
    for t in 0..datasets {
        let n = 2 + t % 19;
        let d = 1 + t % 2;
        let m = 1 + (t * 7) % n;
        let mut state = random_svgp_state(&mut rng, m, d);
        let x = random_inputs(&mut rng, n, d, 3.0);
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() + 0.3 * rng.next_normal()).collect();
        // sometimes place the inducing points on the data
        if t % 3 == 0 {
            let rows = rng.sample_indices(n, m);
            state.inducing = x.select_rows(&rows);
        }
        let w = vec![1.0; n];
        let bound = elbo(&state, &x, &y, &w, n).unwrap();
        let evidence = exact_log_evidence(&x, &y, &state.kernel, &state.mean, state.noise());
        worst = worst.max(bound - evidence);
    }
    worst
}

/// Gap between the exact evidence and the ELBO after optimizing `(m, L)` with
/// Adam in whitened coordinates, with `M = N` and the inducing points on the data.
pub fn optimized_full_rank_gap(seed: u64) -> f64 {
    use uqkit::training::Adam;
    let mut rng = RngStream::new(seed);
    let n = 10;
    let x = random_inputs(&mut rng, n, 1, 3.0);
    let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() + 0.2 * rng.next_normal()).collect();
    let w = vec![1.0; n];
    let mut state = SvgpState {
        inducing: x.clone(),
        var_mean: vec![0.0; n],
        var_chol: Matrix::identity(n),
        kernel: KernelHyper::new(1.0, 1.0),
        mean: MeanHyper { constant: 0.1 },
        log_noise: (0.05f64).ln(),
    };
    // only (m, L) move; they lead the unconstrained layout after Z
    let nz = n;
    let nv = n + n * (n + 1) / 2;
    // start from the prior, L̃ = I
    let mut flat = state.to_whitened().unwrap();
    state.var_chol = Matrix::identity(n);
    let white_chol = state.to_unconstrained();
    flat[nz + n..nz + nv].copy_from_slice(&white_chol[nz + n..nz + nv]);
    state.set_whitened(&flat).unwrap();
    let evidence = exact_log_evidence(&x, &y, &state.kernel, &state.mean, state.noise());
    let mut sub = flat[nz..nz + nv].to_vec();
    let mut adam = Adam::new(nv, 0.05);
    for step in 0..20_000 {
        if step == 10_000 {
            adam = Adam::new(nv, 0.005);
        }
        let (_, g) = uqkit::svgp::elbo_and_whitened_grad(&state, &x, &y, &w, n).unwrap();
        adam.step(&mut sub, &g[nz..nz + nv]);
        flat[nz..nz + nv].copy_from_slice(&sub);
        state.set_whitened(&flat).unwrap();
    }
    evidence - elbo(&state, &x, &y, &w, n).unwrap()
}

/// `y = sin(x) + 0.1·ε` with `x ~ U(−3, 3)`.
pub fn sine_dataset(n: usize, seed: u64) -> uqkit::Dataset {
    let mut rng = RngStream::new(seed);
    let x = random_inputs(&mut rng, n, 1, 3.0);
    let y = (0..n).map(|i| x[(i, 0)].sin() + 0.1 * rng.next_normal()).collect();
    uqkit::Dataset::new(x, y).unwrap()
}

/// Equal-weight modes at ±2 with std 0.3, as a target-only dataset.
pub fn bimodal_dataset(n: usize, seed: u64) -> uqkit::Dataset {
    use uqkit::datagen::generate_multi_modal_data;
    let modes = [
        uqkit::ModeSpec { mean: -2.0, std: 0.3, weight: 0.5 },
        uqkit::ModeSpec { mean: 2.0, std: 0.3, weight: 0.5 },
    ];
    let y = generate_multi_modal_data(n, &modes, &mut RngStream::new(seed)).unwrap();
    uqkit::Dataset::from_targets(y).unwrap()
}

pub const SINE_CONFIG: uqkit::TrainConfig = uqkit::TrainConfig {
    num_epochs: 200,
    batch_size: 32,
    lr: 0.1,
    patience: 200,
    val_fraction: 0.2,
    seed: 7,
    num_workers: 0,
};

pub const BIMODAL_CONFIG: uqkit::TrainConfig = uqkit::TrainConfig {
    num_epochs: 150,
    batch_size: 64,
    lr: 0.01,
    patience: 20,
    val_fraction: 0.2,
    seed: 3,
    num_workers: 0,
};

/// Grid-local maxima of a sampled curve.
pub fn local_maxima(curve: &[(f64, f64)]) -> usize {
    curve.windows(3).filter(|w| w[1].1 > w[0].1 && w[1].1 >= w[2].1).count()
}

/// Element counts of a rendered SVG document, or the XML parse error.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct SvgInventory {
    pub panels: usize,
    pub polylines: usize,
    pub axis_lines: usize,
    pub vlines: usize,
    pub vline_labels: Vec<String>,
    pub tick_labels: usize,
    pub titles: usize,
}

pub fn svg_inventory(svg: &str) -> Result<SvgInventory, String> {
    let doc = roxmltree::Document::parse(svg).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(format!("root element is {}", root.tag_name().name()));
    }
    let mut inv = SvgInventory::default();
    for node in root.descendants().filter(|n| n.is_element()) {
        let class = node.attribute("class").unwrap_or("");
        match (node.tag_name().name(), class) {
            ("g", "panel") => inv.panels += 1,
            ("polyline", _) => inv.polylines += 1,
            ("line", c) if c.starts_with("axis") => inv.axis_lines += 1,
            ("line", c) if c.starts_with("vline") => inv.vlines += 1,
            ("text", "vline-label") => inv.vline_labels.push(node.text().unwrap_or("").to_string()),
            ("text", c) if c.starts_with("tick") => inv.tick_labels += 1,
            ("text", "title") => inv.titles += 1,
            _ => {}
        }
    }
    Ok(inv)
}

/// Whitened-coordinate ELBO gradients on `instances` random problems.
pub fn check_whitened_gradients(instances: usize, seed: u64) -> Vec<String> {
    use uqkit::svgp::elbo_and_whitened_grad;
    let mut rng = RngStream::new(seed);
    let mut failures = Vec::new();
    for t in 0..instances {
        let (m, d, n) = (1 + t % 5, 1 + t % 3, 3 + t % 8);
        let state = random_svgp_state(&mut rng, m, d);
        let x = random_inputs(&mut rng, n, d, 2.5);
        let y: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
        let (_, analytic) = elbo_and_whitened_grad(&state, &x, &y, &w, n).unwrap();
        let flat = state.to_whitened().unwrap();
        let mut probe = state.clone();
        let mismatch = fd_mismatch(&flat, &analytic, |p| {
            probe.set_whitened(p).unwrap();
            -elbo(&probe, &x, &y, &w, n).unwrap()
        });
        if let Some((i, a, num)) = mismatch {
            failures.push(format!("whitened instance {t}: param {i} analytic {a:e} numeric {num:e}"));
        }
    }
    failures
}
