//! Trainers for both models: validation split, shuffled weighted
//! mini-batches, Adam, early stopping with best-state restoration, metrics and
//! the per-epoch log lines.
//!
//! SVGP epochs are logged as
//! `Epoch {e}/{E}, Weighted Loss: {l:.3}, Val MSE: {m:.6}, Val R2: {r:.3}` and
//! MDN epochs as `Epoch {e}/{E}, Training Loss: {t:.3}, Validation Loss: {v:.3}`,
//! followed by `Early stopping after {e} epochs` when patience runs out.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::mdn::{init_mdn, mdn_batch_loss, mdn_forward, mdn_loss_and_grad, mdn_sample, MdnParams};
use crate::modelfile::Snapshot;
use crate::numerics::{Matrix, RngStream};
use crate::svgp::{elbo_and_whitened_grad, init_svgp, SvgpPredictor, SvgpState};

// sub-stream ids derived from the run seed
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Helper threads used to assemble batches; 0 assembles on the training thread.
    pub num_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_epochs: 100,
            batch_size: 32,
            lr: 0.01,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
            num_workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_epochs == 0 {
            return Err(Error::BadConfig("num_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::BadConfig("patience must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::BadConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::BadConfig(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.first.len(), "adam: parameter count");
        assert_eq!(grads.len(), self.first.len(), "adam: gradient count");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Ordering used by the early stopper: `compare(candidate, best)` is true
/// when `candidate` is an improvement.
pub type CompareFn = fn(f64, f64) -> bool;

pub fn less_than(candidate: f64, best: f64) -> bool {
    candidate < best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    best_metric: Option<f64>,
    epochs_since_improve: usize,
    best_snapshot: Option<Snapshot>,
    compare: CompareFn,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self::with_compare(patience, less_than)
    }

    pub fn with_compare(patience: usize, compare: CompareFn) -> Self {
        Self { patience, best_metric: None, epochs_since_improve: 0, best_snapshot: None, compare }
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best_metric
    }

    pub fn epochs_since_improve(&self) -> usize {
        self.epochs_since_improve
    }

    pub fn best_snapshot(&self) -> Option<&Snapshot> {
        self.best_snapshot.as_ref()
    }

    /// Records one epoch's metric. `snapshot` is only invoked on improvement.
    pub fn step(&mut self, metric: f64, snapshot: impl FnOnce() -> Snapshot) -> StopDecision {
        let improved = match self.best_metric {
            None => metric.is_finite(),
            Some(best) => (self.compare)(metric, best),
        };
        if improved {
            self.best_metric = Some(metric);
            self.epochs_since_improve = 0;
            self.best_snapshot = Some(snapshot());
        } else {
            self.epochs_since_improve += 1;
        }
        if self.epochs_since_improve >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches of the objective that was differentiated.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mse: Option<f64>,
    pub val_r2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Mean squared error.
pub fn mse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: actual.len() });
    }
    if pred.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    Ok(pred.iter().zip(actual).map(|(p, a)| (a - p) * (a - p)).sum::<f64>() / pred.len() as f64)
}

/// Coefficient of determination. A constant `actual` gives 0.
pub fn r2(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: actual.len() });
    }
    if pred.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (a - p) * (a - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Seeded `(train, validation)` split of a dataset.
pub fn split_train_val(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), val_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

pub(crate) struct Batch {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

/// Materializes the epoch's batches in `order`. The result does not depend on
/// `num_workers`; workers only gather rows.
fn prepare_batches(data: &Dataset, order: &[usize], batch_size: usize, num_workers: usize) -> Vec<Batch> {
    let chunks: Vec<&[usize]> = order.chunks(batch_size).collect();
    let build = |idx: &[usize]| Batch {
        x: data.features.select_rows(idx),
        y: idx.iter().map(|&i| data.targets[i]).collect(),
        w: idx.iter().map(|&i| data.weights[i]).collect(),
    };
    if num_workers == 0 || chunks.len() < 2 {
        return chunks.into_iter().map(build).collect();
    }
    let workers = num_workers.min(chunks.len());
    let mut slots: Vec<Option<Batch>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|t| {
                let chunks = &chunks;
                let build = &build;
                scope.spawn(move || {
                    (t..chunks.len()).step_by(workers).map(|b| (b, build(chunks[b]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (b, batch) in h.join().expect("batch worker panicked") {
                slots[b] = Some(batch);
            }
        }
    });
    slots.into_iter().map(|b| b.expect("every batch prepared")).collect()
}

fn check_finite(value: f64, what: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} is {value} at epoch {epoch}")))
    }
}

/// Latent-mean predictions for every row.
fn svgp_means(state: &SvgpState, xs: &Matrix) -> Result<Vec<f64>> {
    let predictor = SvgpPredictor::new(state)?;
    Ok((0..xs.rows()).map(|i| predictor.predict(xs.row(i)).mean).collect())
}

/// Validation MSE and R² of a state.
pub fn svgp_validation_metrics(state: &SvgpState, val: &Dataset) -> Result<(f64, f64)> {
    let means = svgp_means(state, &val.features)?;
    Ok((mse(&means, &val.targets)?, r2(&means, &val.targets)?))
}

/// Trains an SVGP by minimizing the per-datum negative ELBO, `−ELBO / N`,
/// with Adam steps taken in whitened variational coordinates.
/// Validation MSE drives early stopping and the best state is returned.
pub fn train_svgp(
    dataset: &Dataset,
    m_inducing: usize,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(SvgpState, TrainHistory)> {
    config.validate()?;
    let (train, val) = split_train_val(dataset, config.val_fraction, config.seed)?;
    if m_inducing > train.len() {
        return Err(Error::BadConfig(format!(
            "{m_inducing} inducing points but only {} training rows",
            train.len()
        )));
    }
    let mut init_rng = RngStream::with_stream(config.seed, INIT_STREAM);
    let mut shuffle_rng = RngStream::with_stream(config.seed, SHUFFLE_STREAM);
    let mut state = init_svgp(&train.features, &train.targets, m_inducing, &mut init_rng)?;
    let n_train = train.len();
    let mut flat = state.to_whitened()?;
    let mut adam = Adam::new(flat.len(), config.lr);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut records = Vec::new();
    let mut stop_reason = StopReason::Completed;
    let mut best_epoch = 0;

    for epoch in 1..=config.num_epochs {
        let order = shuffle_rng.permutation(n_train);
        let batches = prepare_batches(&train, &order, config.batch_size, config.num_workers);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let (value, mut g) = elbo_and_whitened_grad(&state, &batch.x, &batch.y, &batch.w, n_train)?;
            let loss = -value / n_train as f64;
            check_finite(loss, "training loss", epoch)?;
            loss_sum += loss;
            g.iter_mut().for_each(|v| *v /= n_train as f64);
            adam.step(&mut flat, &g);
            state.set_whitened(&flat)?;
        }
        let train_loss = loss_sum / batches.len() as f64;
        let (val_mse, val_r2) = svgp_validation_metrics(&state, &val)?;
        writeln!(
            log,
            "Epoch {epoch}/{}, Weighted Loss: {train_loss:.3}, Val MSE: {val_mse:.6}, Val R2: {val_r2:.3}",
            config.num_epochs
        )?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            val_mse: Some(val_mse),
            val_r2: Some(val_r2),
        });
        let before = stopper.best_metric();
        let decision = stopper.step(val_mse, || Snapshot::capture(&state));
        if stopper.best_metric() != before {
            best_epoch = epoch;
        }
        if decision == StopDecision::Stop {
            stop_reason = StopReason::EarlyStopped { epoch };
            break;
        }
    }

    let (state, best_metric) = match stopper.best_snapshot() {
        Some(snap) => (snap.restore()?, stopper.best_metric().unwrap()),
        None => return Err(Error::Diverged("validation MSE never became finite".into())),
    };
    Ok((state, TrainHistory { records, stop_reason, best_epoch, best_metric }))
}

/// Trains an MDN on the weighted mean NLL; validation NLL drives early stopping.
pub fn train_mdn(
    dataset: &Dataset,
    hidden_units: usize,
    n_gaussians: usize,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(MdnParams, TrainHistory)> {
    config.validate()?;
    let (train, val) = split_train_val(dataset, config.val_fraction, config.seed)?;
    let mut init_rng = RngStream::with_stream(config.seed, INIT_STREAM);
    let mut shuffle_rng = RngStream::with_stream(config.seed, SHUFFLE_STREAM);
    let mut params = init_mdn(dataset.n_features(), hidden_units, n_gaussians, &mut init_rng)?;
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), config.lr);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut records = Vec::new();
    let mut stop_reason = StopReason::Completed;
    let mut best_epoch = 0;

    for epoch in 1..=config.num_epochs {
        let order = shuffle_rng.permutation(train.len());
        let batches = prepare_batches(&train, &order, config.batch_size, config.num_workers);
        let mut loss_sum = 0.0;
        for batch in &batches {
            let (loss, grad) = mdn_loss_and_grad(&params, &batch.x, &batch.y, &batch.w)?;
            check_finite(loss, "training loss", epoch)?;
            loss_sum += loss;
            adam.step(&mut flat, &grad.to_flat());
            params.set_flat(&flat);
        }
        let train_loss = loss_sum / batches.len() as f64;
        let val_loss = mdn_batch_loss(&params, &val.features, &val.targets, &val.weights);
        writeln!(
            log,
            "Epoch {epoch}/{}, Training Loss: {train_loss:.3}, Validation Loss: {val_loss:.3}",
            config.num_epochs
        )?;
        records.push(EpochRecord { epoch, train_loss, val_loss: Some(val_loss), val_mse: None, val_r2: None });
        let before = stopper.best_metric();
        let decision = stopper.step(val_loss, || Snapshot::capture(&params));
        if stopper.best_metric() != before {
            best_epoch = epoch;
        }
        if decision == StopDecision::Stop {
            writeln!(log, "Early stopping after {epoch} epochs")?;
            stop_reason = StopReason::EarlyStopped { epoch };
            break;
        }
    }

    let (params, best_metric) = match stopper.best_snapshot() {
        Some(snap) => (snap.restore()?, stopper.best_metric().unwrap()),
        None => return Err(Error::Diverged("validation loss never became finite".into())),
    };
    Ok((params, TrainHistory { records, stop_reason, best_epoch, best_metric }))
}

/// Observation-level predictive means and variances (latent variance plus noise).
pub fn predict_with_uncertainty_svgp(state: &SvgpState, xs: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if xs.cols() != state.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} features, model expects {}",
            xs.cols(),
            state.input_dim()
        )));
    }
    let predictor = SvgpPredictor::new(state)?;
    let (means, variances) = (0..xs.rows())
        .map(|i| {
            let p = predictor.predict_observed(xs.row(i));
            (p.mean, p.variance)
        })
        .unzip();
    Ok((means, variances))
}

/// Mixture parameters and samples for every row of `xs`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnUncertainty {
    pub pi: Matrix,
    pub mu: Matrix,
    pub sigma: Matrix,
    pub samples: Matrix,
}

pub fn predict_with_uncertainty_mdn(
    params: &MdnParams,
    xs: &Matrix,
    rng: &mut RngStream,
    n_samples: usize,
) -> Result<MdnUncertainty> {
    if xs.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} features, network expects {}",
            xs.cols(),
            params.input_dim()
        )));
    }
    let (n, k) = (xs.rows(), params.n_gaussians());
    let mut out = MdnUncertainty {
        pi: Matrix::zeros(n, k),
        mu: Matrix::zeros(n, k),
        sigma: Matrix::zeros(n, k),
        samples: Matrix::zeros(n, n_samples),
    };
    for i in 0..n {
        let mix = mdn_forward(params, xs.row(i));
        out.pi.row_mut(i).copy_from_slice(&mix.pi);
        out.mu.row_mut(i).copy_from_slice(&mix.mu);
        out.sigma.row_mut(i).copy_from_slice(&mix.sigma);
        out.samples.row_mut(i).copy_from_slice(&mdn_sample(&mix, rng, n_samples));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap() -> Snapshot {
        Snapshot::capture(&0u8)
    }

    fn run(patience: usize, metrics: &[f64]) -> Option<usize> {
        let mut s = EarlyStopper::new(patience);
        for (i, &m) in metrics.iter().enumerate() {
            if s.step(m, snap) == StopDecision::Stop {
                return Some(i + 1);
            }
            assert!(s.epochs_since_improve() <= s.patience);
        }
        None
    }

    #[test]
    fn strictly_improving_never_stops() {
        let metrics: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
        assert_eq!(run(3, &metrics), None);
    }

    #[test]
    fn three_non_improvements_stop() {
        assert_eq!(run(3, &[5.0, 6.0, 6.0, 6.0]), Some(4));
        // equal is not an improvement under strict less-than
        assert_eq!(run(2, &[5.0, 5.0, 5.0]), Some(3));
    }

    #[test]
    fn custom_compare() {
        let mut s = EarlyStopper::with_compare(2, |c, b| c > b);
        assert_eq!(s.step(0.5, snap), StopDecision::Continue);
        assert_eq!(s.step(0.7, snap), StopDecision::Continue);
        assert_eq!(s.best_metric(), Some(0.7));
        assert_eq!(s.step(0.6, snap), StopDecision::Continue);
        assert_eq!(s.step(0.6, snap), StopDecision::Stop);
    }

    #[test]
    fn snapshot_only_taken_on_improvement() {
        let mut s = EarlyStopper::new(5);
        let mut calls = 0;
        for m in [3.0, 2.0, 2.5, 1.0, 4.0] {
            s.step(m, || {
                calls += 1;
                Snapshot::capture(&m)
            });
        }
        assert_eq!(calls, 3);
        assert_eq!(s.best_snapshot().unwrap().restore::<f64>().unwrap(), 1.0);
    }

    #[test]
    fn metrics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mse(&[2.0], &[5.0]).unwrap(), 9.0);
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        let actual = [1.0, 2.0, 4.0];
        assert_eq!(r2(&actual, &actual).unwrap(), 1.0);
        let mean = 7.0 / 3.0;
        assert!(r2(&[mean; 3], &actual).unwrap().abs() < 1e-15);
        assert_eq!(r2(&[1.0, 5.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(r2(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e3] {
            let mut adam = Adam::new(1, 0.05);
            let mut p = vec![0.0];
            adam.step(&mut p, &[g]);
            let expected = -0.05 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((p[0].abs() - 0.05).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_identical_histories_update_identically() {
        let mut adam = Adam::new(2, 0.01);
        let mut p = vec![0.3, 0.3];
        for g in [1.0, -0.5, 2.0, 0.1] {
            adam.step(&mut p, &[g, g]);
        }
        assert_eq!(p[0], p[1]);
        assert_eq!(adam.steps_taken(), 4);
    }

    #[test]
    fn split_train_val_sizes() {
        let d = Dataset::new(Matrix::from_fn(10, 1, |i, _| i as f64), (0..10).map(f64::from).collect()).unwrap();
        let (t, v) = split_train_val(&d, 0.2, 3).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let (t2, v2) = split_train_val(&d, 0.2, 3).unwrap();
        assert_eq!((t, v), (t2, v2));
    }

    #[test]
    fn batches_do_not_depend_on_workers() {
        let d = Dataset::new(Matrix::from_fn(103, 2, |i, j| (i * 3 + j) as f64), (0..103).map(f64::from).collect())
            .unwrap();
        let order = RngStream::new(1).permutation(103);
        let a = prepare_batches(&d, &order, 10, 0);
        for workers in [1, 4, 32] {
            let b = prepare_batches(&d, &order, 10, workers);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.x, y.x);
                assert_eq!(x.y, y.y);
            }
        }
        // last partial batch is kept
        assert_eq!(a.last().unwrap().y.len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { num_epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { val_fraction: 1.0, ..Default::default() }.validate().is_err());
    }
}
