use std::collections::BTreeMap;
use std::io::{self, Write};

use uqkit::datagen::{generate_multi_modal_data, load_csv_weighted, load_features_csv, write_csv};
use uqkit::mdn::{mdn_forward, predict as mdn_predict, DEFAULT_HIDDEN_UNITS};
use uqkit::predplot::{
    compare_distributions_mdn, compare_distributions_svgpr, plot_results_grid, render_grid_svg, render_svg,
};
use uqkit::training::{mse, predict_with_uncertainty_svgp, r2, split_train_val, train_mdn, train_svgp};
use uqkit::{
    Dataset, Error, Matrix, Model, ModelFile, PredictionStrategy, RngStream, Standardizer, TrainConfig,
    TrainingMetadata,
};

use crate::{CliError, GenerateArgs, ModelKind, PlotArgs, PredictArgs, Strategy, TrainArgs};

const DEFAULT_INDUCING_POINTS: usize = 100;
const DEFAULT_GAUSSIANS: usize = 3;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut rng = RngStream::new(args.seed);
    let targets = generate_multi_modal_data(args.n, &args.modes, &mut rng).map_err(|e| match e {
        Error::BadConfig(msg) => usage(msg),
        other => other.into(),
    })?;
    let dataset = Dataset::from_targets(targets)?;
    write_csv(&dataset, &args.out, &args.target)?;
    Ok(())
}

fn not_applicable(flag: &str, model: &str) -> CliError {
    usage(format!("flag not applicable: {flag} is only used with --model {model}"))
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    match args.model {
        ModelKind::Svgp => {
            if args.dense1_units.is_some() {
                return Err(not_applicable("--dense1-units", "mdn"));
            }
            if args.n_gaussians.is_some() {
                return Err(not_applicable("--n-gaussians", "mdn"));
            }
        }
        ModelKind::Mdn => {
            if args.num_inducing_points.is_some() {
                return Err(not_applicable("--num-inducing-points", "svgp"));
            }
        }
    }
    let config = TrainConfig {
        num_epochs: args.num_epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        patience: args.patience,
        val_fraction: args.val_fraction,
        seed: args.seed,
        num_workers: args.num_workers,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    for (flag, value) in [
        ("--num-inducing-points", args.num_inducing_points),
        ("--dense1-units", args.dense1_units),
        ("--n-gaussians", args.n_gaussians),
    ] {
        if value == Some(0) {
            return Err(usage(format!("{flag} must be at least 1")));
        }
    }

    let mut dataset = load_csv_weighted(&args.data, &args.target, args.weights.as_deref())?;
    let standardizer = if args.standardize {
        // the trainer re-derives the same split from the seed
        let (train, _) = split_train_val(&dataset, config.val_fraction, config.seed)?;
        let s = Standardizer::fit(&train.features)?;
        dataset.features = s.transform(&dataset.features)?;
        Some(s)
    } else {
        None
    };

    let stdout = io::stdout();
    let mut log = stdout.lock();
    let mut metrics = BTreeMap::new();
    let (model, history) = match args.model {
        ModelKind::Svgp => {
            let n_train = split_train_val(&dataset, config.val_fraction, config.seed)?.0.len();
            let m = args.num_inducing_points.unwrap_or(DEFAULT_INDUCING_POINTS.min(n_train));
            let (state, history) = train_svgp(&dataset, m, &config, &mut log)?;
            let best = &history.records[history.best_epoch - 1];
            metrics.insert("val_mse".to_string(), history.best_metric);
            if let Some(r2) = best.val_r2 {
                metrics.insert("val_r2".to_string(), r2);
            }
            (Model::Svgp(state), history)
        }
        ModelKind::Mdn => {
            let hidden = args.dense1_units.unwrap_or(DEFAULT_HIDDEN_UNITS);
            let k = args.n_gaussians.unwrap_or(DEFAULT_GAUSSIANS);
            let (params, history) = train_mdn(&dataset, hidden, k, &config, &mut log)?;
            metrics.insert("val_loss".to_string(), history.best_metric);
            (Model::Mdn(params), history)
        }
    };
    log.flush()?;
    metrics.insert("best_epoch".to_string(), history.best_epoch as f64);
    metrics.insert("epochs_run".to_string(), history.records.len() as f64);
    metrics.insert("train_loss".to_string(), history.records[history.best_epoch - 1].train_loss);

    let metadata = TrainingMetadata {
        seed: Some(args.seed),
        config: Some(config),
        metrics,
        feature_names: dataset.feature_names.clone(),
        target: Some(args.target.clone()),
        standardizer,
    };
    ModelFile::new(model, metadata).save(&args.out)?;
    Ok(())
}

/// Feature matrix of `path` in the column order the model was trained with.
fn model_inputs(file: &ModelFile, path: &std::path::Path, target: Option<&str>) -> Result<Matrix, CliError> {
    let (all, names) = load_features_csv(path, target)?;
    let wanted = &file.metadata.feature_names;
    let features = if wanted.is_empty() {
        all
    } else {
        let cols = wanted
            .iter()
            .map(|w| names.iter().position(|n| n == w).ok_or_else(|| Error::MissingColumn(w.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Matrix::from_fn(all.rows(), cols.len(), |i, j| all[(i, cols[j])])
    };
    if features.cols() != file.model.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} feature columns, model expects {}",
            features.cols(),
            file.model.input_dim()
        ))
        .into());
    }
    match &file.metadata.standardizer {
        Some(s) => Ok(s.transform(&features)?),
        None => Ok(features),
    }
}

fn strategy(kind: Strategy, n_samples: usize) -> Result<PredictionStrategy, CliError> {
    if n_samples == 0 {
        return Err(usage("--n-samples must be at least 1"));
    }
    Ok(match kind {
        Strategy::MaxWeightMean => PredictionStrategy::MaxWeightMean,
        Strategy::MaxWeightSample => PredictionStrategy::MaxWeightSample,
        Strategy::AverageSample => PredictionStrategy::AverageSample { n_samples },
    })
}

fn target_column(path: &std::path::Path, target: &str) -> Result<Vec<f64>, CliError> {
    Ok(load_csv_weighted(path, target, None)?.targets)
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let strategy = strategy(args.strategy, args.n_samples)?;
    let file = ModelFile::load(&args.model_file)?;
    let xs = model_inputs(&file, &args.data, args.target.as_deref())?;
    let mut table = String::new();
    let point: Vec<f64> = match &file.model {
        Model::Svgp(state) => {
            let (means, variances) = predict_with_uncertainty_svgp(state, &xs)?;
            table.push_str("row,mean,variance\n");
            for (i, (m, v)) in means.iter().zip(&variances).enumerate() {
                table.push_str(&format!("{i},{m},{v}\n"));
            }
            means
        }
        Model::Mdn(params) => {
            let k = params.n_gaussians();
            let mut header = vec!["row".to_string(), "prediction".to_string()];
            for c in 1..=k {
                header.extend([format!("pi_{c}"), format!("mu_{c}"), format!("sigma_{c}")]);
            }
            table.push_str(&header.join(","));
            table.push('\n');
            let mut rng = RngStream::new(args.seed);
            let mut preds = Vec::with_capacity(xs.rows());
            for i in 0..xs.rows() {
                let mix = mdn_forward(params, xs.row(i));
                let p = mdn_predict(&mix, strategy, &mut rng);
                let mut cells = vec![i.to_string(), p.to_string()];
                for c in 0..k {
                    cells.extend([mix.pi[c].to_string(), mix.mu[c].to_string(), mix.sigma[c].to_string()]);
                }
                table.push_str(&cells.join(","));
                table.push('\n');
                preds.push(p);
            }
            preds
        }
    };
    match &args.out {
        Some(path) => std::fs::write(path, &table)?,
        None => io::stdout().lock().write_all(table.as_bytes())?,
    }
    if let Some(target) = &args.target {
        let actual = target_column(&args.data, target)?;
        eprintln!("MSE: {:.6}, R2: {:.3}", mse(&point, &actual)?, r2(&point, &actual)?);
    }
    Ok(())
}

pub fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let strategy = strategy(args.strategy, args.n_samples)?;
    if args.ncols == 0 {
        return Err(usage("--ncols must be at least 1"));
    }
    if args.n_samples < 2 {
        return Err(usage("--n-samples must be at least 2 for a density estimate"));
    }
    let file = ModelFile::load(&args.model_file)?;
    let target = args
        .target
        .clone()
        .or_else(|| file.metadata.target.clone())
        .ok_or_else(|| usage("--target is required for models saved without a target name"))?;
    let xs = model_inputs(&file, &args.data, Some(&target))?;
    let ys = target_column(&args.data, &target)?;
    if let Some(&index) = args.indices.iter().find(|&&i| i >= xs.rows()) {
        return Err(Error::IndexOutOfRange { index, len: xs.rows() }.into());
    }
    let mut rng = RngStream::new(args.seed);
    let mut compare = |x: &[f64], actual: Option<f64>| match &file.model {
        Model::Svgp(state) => compare_distributions_svgpr(state, x, actual, &mut rng, args.n_samples),
        Model::Mdn(params) => {
            compare_distributions_mdn(params, x, actual, &mut rng, args.n_samples, strategy).map(|r| r.0)
        }
    };
    if let [index] = args.indices[..] {
        let spec = compare(xs.row(index), Some(ys[index]))?;
        render_svg(&spec, &args.out)?;
    } else {
        let grid = plot_results_grid(&mut compare, &xs, &ys, &args.indices, args.ncols)?;
        render_grid_svg(&grid, &args.out)?;
    }
    Ok(())
}
