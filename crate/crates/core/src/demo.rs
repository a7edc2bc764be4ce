//! End-to-end S-curve run: train a small SELU network, build the ensemble
//! on its hidden layers, and compare held-out errors.

use serde::{Deserialize, Serialize};

use crate::composite::{make_scurve, train_toy_mlp, Activation, CompositeModel, TrainConfig};
use crate::pipeline::{build, BuildConfig, DveError, FittedEnsemble};
use crate::ensemble::EnsembleConfig;
use crate::matrix::Matrix;
use crate::neighbors::NeighborBackend;
use crate::vecchia::{OptimizerConfig, ResponseScaling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScurveConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub nn_learning_rate: f64,
    pub m: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub gp_learning_rate: f64,
    pub ensemble: EnsembleConfig,
    pub seed: u64,
}

impl Default for ScurveConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 1000,
            noise_sd: 0.3,
            hidden: vec![2, 2, 2],
            epochs: 100,
            nn_learning_rate: 0.05,
            m: 16,
            steps: 200,
            batch_size: 128,
            gp_learning_rate: 0.05,
            ensemble: EnsembleConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScurveReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Held-out MSE on the standardized response.
    pub network_mse: f64,
    pub dve_mse: f64,
    pub network_train_mse: f64,
    pub dve_nll: f64,
}

pub struct ScurveRun {
    pub report: ScurveReport,
    pub model: CompositeModel,
    pub ensemble: FittedEnsemble,
}

/// Train and test points come from one seeded draw split in two; the
/// response is standardized with the training moments before anything is
/// fitted.
pub fn run_scurve(cfg: &ScurveConfig) -> Result<ScurveRun, DveError> {
    let (x, t) = make_scurve(cfg.n_train + cfg.n_test, cfg.noise_sd, cfg.seed);
    let train_idx: Vec<usize> = (0..cfg.n_train).collect();
    let test_idx: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_test).collect();
    let x_train = x.select_rows(&train_idx);
    let x_test = x.select_rows(&test_idx);
    let scaling = ResponseScaling::from_responses(&t[..cfg.n_train]);
    let y_train = scaling.standardize_all(&t[..cfg.n_train]);
    let y_test = scaling.standardize_all(&t[cfg.n_train..]);

    let trained = train_toy_mlp(
        &x_train,
        &y_train,
        &TrainConfig::new(&cfg.hidden, Activation::Selu, cfg.epochs, cfg.nn_learning_rate, cfg.seed),
    )?;
    let model = trained.model;
    let nn_pred = model.predict(&x_test)?;
    let network_mse = mse(&nn_pred, &y_test);

    let build_cfg = BuildConfig {
        m: cfg.m,
        seed: cfg.seed,
        optimizer: OptimizerConfig {
            batch_size: cfg.batch_size,
            steps: cfg.steps,
            learning_rate: cfg.gp_learning_rate,
            seed: cfg.seed,
        },
        ensemble: cfg.ensemble,
        backend: NeighborBackend::Exact,
    };
    let ensemble = build(&model, &x_train, &y_train, &build_cfg)?;
    let preds = ensemble.predict_batch(&model, &x_test)?;
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let dve_mse = mse(&means, &y_test);
    let dve_nll = ensemble.standardized_metrics(&preds, &y_test)?.nll;

    Ok(ScurveRun {
        report: ScurveReport {
            seed: cfg.seed,
            n_train: cfg.n_train,
            n_test: cfg.n_test,
            network_mse,
            dve_mse,
            network_train_mse: trained.final_mse,
            dve_nll,
        },
        model,
        ensemble,
    })
}

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len().max(1) as f64
}

/// Standardized S-curve split, exposed for tests and benchmarks.
pub fn scurve_split(cfg: &ScurveConfig) -> (Matrix, Vec<f64>, Matrix, Vec<f64>) {
    let (x, t) = make_scurve(cfg.n_train + cfg.n_test, cfg.noise_sd, cfg.seed);
    let scaling = ResponseScaling::from_responses(&t[..cfg.n_train]);
    let train: Vec<usize> = (0..cfg.n_train).collect();
    let test: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_test).collect();
    (
        x.select_rows(&train),
        scaling.standardize_all(&t[..cfg.n_train]),
        x.select_rows(&test),
        scaling.standardize_all(&t[cfg.n_train..]),
    )
}
