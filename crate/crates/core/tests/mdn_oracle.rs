mod common;

use common::*;
use uqkit::mdn::{mdn_batch_loss, mdn_forward, mdn_loss, MdnParams, MixtureParams};
use uqkit::numerics::Matrix;

#[test]
fn mdn_gradients_match_finite_differences() {
    let failures = check_mdn_gradients(50, 23);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn single_standard_component_at_its_mean() {
    let mix = MixtureParams { pi: vec![1.0], mu: vec![0.0], sigma: vec![1.0] };
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((mdn_loss(&mix, 0.0) - half_ln_2pi).abs() <= 1e-12);
}

#[test]
fn batch_loss_matches_direct_mixture_density() {
    let mut rng = uqkit::RngStream::new(6);
    let params = uqkit::mdn::init_mdn(2, 5, 3, &mut rng).unwrap();
    let x = random_inputs(&mut rng, 12, 2, 1.0);
    let y: Vec<f64> = (0..12).map(|_| rng.next_normal()).collect();
    let w: Vec<f64> = (0..12).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    let direct: f64 = (0..12)
        .map(|i| {
            let mix = mdn_forward(&params, x.row(i));
            let density: f64 = (0..3)
                .map(|k| {
                    let z = (y[i] - mix.mu[k]) / mix.sigma[k];
                    mix.pi[k] * (-0.5 * z * z).exp() / (mix.sigma[k] * (2.0 * std::f64::consts::PI).sqrt())
                })
                .sum();
            -w[i] * density.ln()
        })
        .sum::<f64>()
        / w.iter().sum::<f64>();
    assert!((mdn_batch_loss(&params, &x, &y, &w) - direct).abs() < 1e-12);
}

#[test]
fn forward_pass_matches_hand_computation() {
    let mut p = MdnParams::zeros(1, 1, 2);
    p.w1 = Matrix::column(&[2.0]);
    p.b1 = vec![0.5];
    p.w_pi = Matrix::column(&[1.0, -1.0]);
    p.w_mu = Matrix::column(&[3.0, 0.0]);
    p.b_mu = vec![0.0, -1.0];
    p.w_sigma = Matrix::column(&[0.0, 1.0]);
    let x = 0.25;
    let h = (2.0f64 * x + 0.5).tanh();
    let mix = mdn_forward(&p, &[x]);
    let e = (2.0 * h).exp();
    assert!((mix.pi[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((mix.mu[0] - 3.0 * h).abs() < 1e-15);
    assert_eq!(mix.mu[1], -1.0);
    assert_eq!(mix.sigma[0], 1.0);
    assert!((mix.sigma[1] - h.exp()).abs() < 1e-15);
}
