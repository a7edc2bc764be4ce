//! Building, persisting and querying the full ensemble.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::{CompositeError, CompositeModel};
use crate::dataio::{self, Checkpoint, ConditioningMeta, DataIoError, LayerCheckpoint};
use crate::ensemble::{combine_with_config, CombinedPrediction, EnsembleConfig};
use crate::kernel::KernelParams;
use crate::matrix::Matrix;
use crate::neighbors::{knn_exact, ordered_knn_exact, ConditioningSets, IvfIndex, NeighborBackend, NeighborError, Ordering, DEFAULT_KMEANS_ITERS};
use crate::vecchia::{self, EmbeddingDataset, GaussianPrediction, OptimizerConfig, ResponseScaling, VecchiaError};

#[derive(Debug, Error)]
pub enum DveError {
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: VecchiaError,
    },
    #[error("layer {layer}: {source}")]
    Neighbors {
        layer: usize,
        #[source]
        source: NeighborError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected {expected} layers of query embeddings, got {found}")]
    LayerCount { expected: usize, found: usize },
    #[error("{predictions} predictions but {truth} true values")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    DataIo(#[from] DataIoError),
}

/// Knobs for [`build`].
#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    /// Conditioning-set size.
    pub m: usize,
    /// Seeds the shared ordering and the IVF quantizers.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub ensemble: EnsembleConfig,
    pub backend: NeighborBackend,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            m: 16,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            ensemble: EnsembleConfig::default(),
            backend: NeighborBackend::Exact,
        }
    }
}

/// One fitted Vecchia GP on one intermediate space.
#[derive(Clone, Debug)]
pub struct FittedLayer {
    /// Embeddings with the standardized responses.
    pub dataset: EmbeddingDataset,
    pub sets: ConditioningSets,
    pub params: KernelParams,
    pub index: Option<IvfIndex>,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FittedEnsemble {
    pub layers: Vec<FittedLayer>,
    pub config: EnsembleConfig,
    pub scaling: ResponseScaling,
    pub model_hash: Option<String>,
    pub ordering: Ordering,
    pub m: usize,
    pub backend: NeighborBackend,
    pub optimizer: OptimizerConfig,
}

/// Per-layer record behind one query's prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerExplanation {
    pub layer: usize,
    pub neighbors: Vec<usize>,
    pub distances: Vec<f64>,
    /// Neighbor responses on the original scale.
    pub responses: Vec<f64>,
    pub weight: f64,
    /// This layer's prediction on the original scale.
    pub mean: f64,
    pub var_latent: f64,
    pub var_observation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub mean: f64,
    pub variance: f64,
    pub layers: Vec<LayerExplanation>,
}

/// Fits the ensemble on the intermediate representations of `model`.
pub fn build(model: &CompositeModel, x: &Matrix, y: &[f64], cfg: &BuildConfig) -> Result<FittedEnsemble, DveError> {
    if x.rows() != y.len() {
        return Err(CompositeError::RowMismatch {
            rows: x.rows(),
            responses: y.len(),
        }
        .into());
    }
    let embeddings = model.embed(x)?;
    build_from_embeddings(embeddings, y, Some(model.content_hash()), cfg)
}

/// Fits the ensemble on precomputed per-layer embeddings sharing `y`.
pub fn build_from_embeddings(
    embeddings: Vec<Matrix>,
    y: &[f64],
    model_hash: Option<String>,
    cfg: &BuildConfig,
) -> Result<FittedEnsemble, DveError> {
    let n = y.len();
    if embeddings.is_empty() {
        return Err(DveError::Config("no layers to fit".into()));
    }
    if n == 0 {
        return Err(DveError::Config("no training observations".into()));
    }
    if cfg.m == 0 {
        return Err(DveError::Config("m must be at least 1".into()));
    }
    cfg.ensemble.validate().map_err(DveError::Config)?;
    if cfg.optimizer.batch_size == 0 || !(cfg.optimizer.learning_rate > 0.0) {
        return Err(DveError::Config("batch size and learning rate must be positive".into()));
    }
    cfg.backend
        .validate(n)
        .map_err(|source| DveError::Neighbors { layer: 1, source })?;
    if n < 2 * cfg.m {
        log::warn!("n = {n} is below 2m = {}; conditioning sets cover most of the data", 2 * cfg.m);
    }

    let scaling = ResponseScaling::from_responses(y);
    let responses = Arc::new(scaling.standardize_all(y));
    let datasets = embeddings
        .into_iter()
        .enumerate()
        .map(|(k, e)| {
            EmbeddingDataset::new(Arc::new(e), responses.clone(), k + 1).map_err(|source| DveError::Layer { layer: k + 1, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ordering = Ordering::random(n, cfg.seed);

    let layers = datasets
        .into_par_iter()
        .map(|ds| fit_layer(ds, &ordering, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(FittedEnsemble {
        layers,
        config: cfg.ensemble,
        scaling,
        model_hash,
        ordering,
        m: cfg.m,
        backend: cfg.backend,
        optimizer: cfg.optimizer.clone(),
    })
}

fn fit_layer(ds: EmbeddingDataset, ordering: &Ordering, cfg: &BuildConfig) -> Result<FittedLayer, DveError> {
    let layer = ds.layer();
    let neighbors = |source| DveError::Neighbors { layer, source };
    let (sets, index) = match cfg.backend {
        NeighborBackend::Exact => (ordered_knn_exact(ds.embeddings(), ordering, cfg.m).map_err(neighbors)?, None),
        NeighborBackend::Ivf { n_list, n_probe } => {
            let seed = cfg.seed.wrapping_add(layer as u64);
            let index = IvfIndex::build(ds.embeddings_arc().clone(), n_list, seed, DEFAULT_KMEANS_ITERS).map_err(neighbors)?;
            (index.ordered_sets(ordering, cfg.m, n_probe).map_err(neighbors)?, Some(index))
        }
    };
    let init = vecchia::default_init(&ds);
    let fit = vecchia::fit(&ds, &sets, &init, &cfg.optimizer).map_err(|source| DveError::Layer { layer, source })?;
    log::info!(
        "layer {layer}: d = {}, NLL {:.4} -> {:.4}",
        ds.dim(),
        fit.loss_trace.first().copied().unwrap_or(f64::NAN),
        fit.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(FittedLayer {
        dataset: ds,
        sets,
        params: fit.params,
        index,
        loss_trace: fit.loss_trace,
    })
}

impl FittedEnsemble {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_train(&self) -> usize {
        self.ordering.len()
    }

    /// Fails if `model` is not the model this ensemble was built from.
    pub fn check_model(&self, model: &CompositeModel) -> Result<(), DveError> {
        if let Some(expected) = &self.model_hash {
            let found = model.content_hash();
            if &found != expected {
                return Err(DataIoError::ModelMismatch {
                    expected: expected.clone(),
                    found,
                }
                .into());
            }
        }
        if model.n_intermediate() != self.n_layers() {
            return Err(DveError::LayerCount {
                expected: self.n_layers(),
                found: model.n_intermediate(),
            });
        }
        Ok(())
    }

    /// `m` nearest training points of `q` in layer `k` (0-based) as
    /// `(index, distance)`.
    fn query_neighbors(&self, k: usize, q: &[f64]) -> Result<Vec<(usize, f64)>, DveError> {
        let layer = &self.layers[k];
        match (&layer.index, self.backend) {
            (Some(index), NeighborBackend::Ivf { n_probe, .. }) => index
                .query(q, self.m, n_probe, None)
                .map_err(|source| DveError::Neighbors { layer: k + 1, source }),
            _ => {
                let e = layer.dataset.embeddings();
                if q.len() != e.cols() {
                    return Err(DveError::Neighbors {
                        layer: k + 1,
                        source: NeighborError::Dimension {
                            expected: e.cols(),
                            found: q.len(),
                        },
                    });
                }
                Ok(knn_exact(e, q, self.m))
            }
        }
    }

    /// Standardized-scale per-layer predictions and the query sets used.
    fn layer_predictions(&self, queries: &[Matrix]) -> Result<(Vec<Vec<GaussianPrediction>>, Vec<Vec<Vec<(usize, f64)>>>), DveError> {
        if queries.len() != self.n_layers() {
            return Err(DveError::LayerCount {
                expected: self.n_layers(),
                found: queries.len(),
            });
        }
        let mut preds = Vec::with_capacity(self.n_layers());
        let mut neighbors = Vec::with_capacity(self.n_layers());
        for (k, (layer, q)) in self.layers.iter().zip(queries).enumerate() {
            let nn = (0..q.rows())
                .into_par_iter()
                .map(|i| self.query_neighbors(k, q.row(i)))
                .collect::<Result<Vec<_>, _>>()?;
            let sets: Vec<Vec<usize>> = nn.iter().map(|v| v.iter().map(|(j, _)| *j).collect()).collect();
            let p = vecchia::predict(&layer.dataset, &layer.params, q, &sets).map_err(|source| DveError::Layer { layer: k + 1, source })?;
            preds.push(p);
            neighbors.push(nn);
        }
        Ok((preds, neighbors))
    }

    fn combine_query(&self, per_layer: &[Vec<GaussianPrediction>], i: usize) -> CombinedPrediction {
        let members: Vec<GaussianPrediction> = per_layer.iter().map(|p| p[i]).collect();
        let output_vars: Vec<f64> = self.layers.iter().map(|l| l.params.output_var()).collect();
        let noise_vars: Vec<f64> = self.layers.iter().map(|l| l.params.noise_var()).collect();
        combine_with_config(&members, &output_vars, &noise_vars, &self.config).rescaled(self.scaling.mean, self.scaling.sd)
    }

    /// Combined predictions on the original response scale from per-layer
    /// query embeddings.
    pub fn predict_embeddings(&self, queries: &[Matrix]) -> Result<Vec<CombinedPrediction>, DveError> {
        let (per_layer, _) = self.layer_predictions(queries)?;
        let n = queries.first().map_or(0, Matrix::rows);
        Ok((0..n).map(|i| self.combine_query(&per_layer, i)).collect())
    }

    /// Forward pass through `model`, then [`predict_embeddings`](Self::predict_embeddings).
    pub fn predict_batch(&self, model: &CompositeModel, x: &Matrix) -> Result<Vec<CombinedPrediction>, DveError> {
        self.check_model(model)?;
        self.predict_embeddings(&model.embed(x)?)
    }

    /// Conditioning neighbors, their responses and the layer weights behind
    /// one query embedded per layer.
    pub fn explain_embeddings(&self, query: &[Vec<f64>]) -> Result<Explanation, DveError> {
        let queries = query
            .iter()
            .map(|q| Matrix::new(1, q.len(), q.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(CompositeError::from)?;
        let (per_layer, neighbors) = self.layer_predictions(&queries)?;
        let combined = self.combine_query(&per_layer, 0);
        let layers = neighbors
            .into_iter()
            .enumerate()
            .map(|(k, nn)| {
                let member = combined.members[k];
                let y = self.layers[k].dataset.responses();
                LayerExplanation {
                    layer: k + 1,
                    neighbors: nn[0].iter().map(|(j, _)| *j).collect(),
                    distances: nn[0].iter().map(|(_, d)| *d).collect(),
                    responses: nn[0].iter().map(|(j, _)| self.scaling.unstandardize(y[*j])).collect(),
                    weight: combined.weights[k],
                    mean: member.mean,
                    var_latent: member.var_latent,
                    var_observation: member.var_observation,
                }
            })
            .collect();
        Ok(Explanation {
            mean: combined.mean,
            variance: combined.variance,
            layers,
        })
    }

    pub fn explain(&self, model: &CompositeModel, x: &[f64]) -> Result<Explanation, DveError> {
        self.check_model(model)?;
        self.explain_embeddings(&model.forward(x)?.intermediates)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_hash: self.model_hash.clone(),
            ensemble: self.config,
            conditioning: ConditioningMeta {
                m: self.m,
                ordering_seed: self.ordering.seed(),
                backend: self.backend,
            },
            optimizer: self.optimizer.clone(),
            scaling: self.scaling,
            responses: self.layers.first().map_or_else(Vec::new, |l| l.dataset.responses().to_vec()),
            ordering: self.ordering.perm().to_vec(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    params: l.params.clone(),
                    embeddings: l.dataset.embeddings().clone(),
                    sets: l.sets.to_table(),
                    centroids: l.index.as_ref().map(|i| i.centroids().clone()),
                    loss_trace: l.loss_trace.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds an ensemble from stored sets and parameters; nothing is
    /// refitted and no conditioning set is recomputed.
    pub fn from_checkpoint(c: Checkpoint) -> Result<Self, DveError> {
        let invalid = |msg: String| DveError::DataIo(DataIoError::Inconsistent(msg));
        if c.layers.is_empty() {
            return Err(invalid("checkpoint has no layers".into()));
        }
        c.ensemble.validate().map_err(DveError::Config)?;
        let n = c.responses.len();
        c.conditioning
            .backend
            .validate(n)
            .map_err(|source| DveError::Neighbors { layer: 1, source })?;
        let ordering = Ordering::from_perm(c.ordering, c.conditioning.ordering_seed).map_err(|source| DveError::Neighbors { layer: 1, source })?;
        let responses = Arc::new(c.responses);
        let mut layers = Vec::with_capacity(c.layers.len());
        for (k, l) in c.layers.into_iter().enumerate() {
            let layer = k + 1;
            l.params
                .validate()
                .map_err(|e| DveError::Layer {
                    layer,
                    source: e.into(),
                })?;
            let dataset = EmbeddingDataset::new(Arc::new(l.embeddings), responses.clone(), layer).map_err(|source| DveError::Layer { layer, source })?;
            let sets = ConditioningSets::from_table(&l.sets).map_err(|source| DveError::Neighbors { layer, source })?;
            if sets.m != c.conditioning.m {
                return Err(invalid(format!("layer {layer} sets have width {}, expected m = {}", sets.m, c.conditioning.m)));
            }
            let index = match (c.conditioning.backend, l.centroids) {
                (NeighborBackend::Ivf { n_list, .. }, Some(centroids)) => {
                    if centroids.rows() != n_list {
                        return Err(invalid(format!("layer {layer} stores {} centroids, expected {n_list}", centroids.rows())));
                    }
                    let seed = c.conditioning.ordering_seed.wrapping_add(layer as u64);
                    Some(IvfIndex::from_centroids(dataset.embeddings_arc().clone(), centroids, seed).map_err(|source| DveError::Neighbors { layer, source })?)
                }
                (NeighborBackend::Ivf { .. }, None) => return Err(invalid(format!("layer {layer} is missing IVF centroids"))),
                (NeighborBackend::Exact, _) => None,
            };
            layers.push(FittedLayer {
                dataset,
                sets,
                params: l.params,
                index,
                loss_trace: l.loss_trace,
            });
        }
        Ok(Self {
            layers,
            config: c.ensemble,
            scaling: c.scaling,
            model_hash: c.model_hash,
            ordering,
            m: c.conditioning.m,
            backend: c.conditioning.backend,
            optimizer: c.optimizer,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DveError> {
        Ok(dataio::save_checkpoint(&self.to_checkpoint(), dir)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DveError> {
        Self::from_checkpoint(dataio::load_checkpoint(dir)?)
    }

    /// RMSE and NLL after mapping predictions and truth onto the
    /// standardized training scale.
    pub fn standardized_metrics(&self, preds: &[CombinedPrediction], y: &[f64]) -> Result<Metrics, DveError> {
        let s = self.scaling;
        let moments: Vec<(f64, f64)> = preds
            .iter()
            .map(|p| (s.standardize(p.mean), p.variance / (s.sd * s.sd)))
            .collect();
        metrics(&moments, &s.standardize_all(y))
    }

    /// `(epistemic, aleatoric)` for a prediction from this ensemble.
    pub fn uncertainty_split(&self, pred: &CombinedPrediction) -> UncertaintySplit {
        uncertainty_split(pred)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub nll: f64,
}

/// RMSE of the means and mean Gaussian negative log density of `y` under
/// `(mean, variance)` pairs.
pub fn metrics(moments: &[(f64, f64)], y: &[f64]) -> Result<Metrics, DveError> {
    if moments.len() != y.len() {
        return Err(DveError::LengthMismatch {
            predictions: moments.len(),
            truth: y.len(),
        });
    }
    if y.is_empty() {
        return Err(DveError::Config("metrics need at least one prediction".into()));
    }
    let n = y.len() as f64;
    let mut se = 0.0;
    let mut nll = 0.0;
    for (&(mu, var), &t) in moments.iter().zip(y) {
        let r = t - mu;
        se += r * r;
        nll += 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var);
    }
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        nll: nll / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySplit {
    pub epistemic: f64,
    pub aleatoric: f64,
}

/// Aleatoric part is the average noise variance, capped at the combined
/// variance; epistemic is the remainder.
pub fn uncertainty_split(pred: &CombinedPrediction) -> UncertaintySplit {
    let aleatoric = pred.mean_noise_var.min(pred.variance);
    UncertaintySplit {
        epistemic: pred.variance - aleatoric,
        aleatoric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::{Activation, LayerSpec};

    fn identity_model(d: usize) -> CompositeModel {
        CompositeModel::new(vec![
            LayerSpec::new(Matrix::identity(d), vec![0.0; d], Activation::Identity).unwrap(),
            LayerSpec::new(Matrix::new(d, 1, vec![1.0; d]).unwrap(), vec![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    fn data(n: usize) -> (Matrix, Vec<f64>) {
        let x: Vec<f64> = (0..n * 2).map(|v| ((v * 7919 % 101) as f64) / 50.0).collect();
        let x = Matrix::new(n, 2, x).unwrap();
        let y = x.row_iter().map(|r| (2.0 * r[0]).sin() + r[1]).collect();
        (x, y)
    }

    fn cfg() -> BuildConfig {
        BuildConfig {
            m: 8,
            seed: 3,
            optimizer: OptimizerConfig {
                batch_size: 32,
                steps: 20,
                learning_rate: 0.05,
                seed: 3,
            },
            ..Default::default()
        }
    }

    #[test]
    fn metrics_closed_forms() {
        let m = metrics(&[(1.0, 1.0), (2.0, 1.0)], &[1.0, 2.0]).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!((m.nll - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let m = metrics(&[(3.0, 1.0 / (2.0 * std::f64::consts::PI))], &[3.0]).unwrap();
        assert!(m.nll.abs() < 1e-15);
        assert!(matches!(metrics(&[(0.0, 1.0)], &[]), Err(DveError::LengthMismatch { .. })));
    }

    #[test]
    fn build_validates_config() {
        let (x, y) = data(20);
        let model = identity_model(2);
        let bad = BuildConfig { m: 0, ..cfg() };
        assert!(build(&model, &x, &y, &bad).is_err());
        let bad = BuildConfig {
            backend: NeighborBackend::Ivf { n_list: 4, n_probe: 5 },
            ..cfg()
        };
        assert!(build(&model, &x, &y, &bad).is_err());
        assert!(build(&model, &x, &y[..5], &cfg()).is_err());
    }

    #[test]
    fn model_mismatch_is_rejected() {
        let (x, y) = data(40);
        let fe = build(&identity_model(2), &x, &y, &cfg()).unwrap();
        let mut layers = identity_model(2).layers().to_vec();
        layers[1].bias[0] = 1.0;
        let other = CompositeModel::new(layers).unwrap();
        assert!(matches!(fe.predict_batch(&other, &x), Err(DveError::DataIo(DataIoError::ModelMismatch { .. }))));
    }

    #[test]
    fn checkpoint_conversion_round_trips() {
        let (x, y) = data(60);
        for backend in [NeighborBackend::Exact, NeighborBackend::Ivf { n_list: 6, n_probe: 3 }] {
            let fe = build(&identity_model(2), &x, &y, &BuildConfig { backend, ..cfg() }).unwrap();
            let back = FittedEnsemble::from_checkpoint(fe.to_checkpoint()).unwrap();
            assert_eq!(back.to_checkpoint(), fe.to_checkpoint());
            let a = fe.predict_batch(&identity_model(2), &x).unwrap();
            let b = back.predict_batch(&identity_model(2), &x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn explain_matches_predict() {
        let (x, y) = data(50);
        let model = identity_model(2);
        let fe = build(&model, &x, &y, &cfg()).unwrap();
        let q = [0.3, 1.1];
        let p = fe.predict_batch(&model, &Matrix::new(1, 2, q.to_vec()).unwrap()).unwrap();
        let e = fe.explain(&model, &q).unwrap();
        assert_eq!(e.mean, p[0].mean);
        assert_eq!(e.layers[0].weight, p[0].weights[0]);
        let nn: Vec<usize> = knn_exact(&x, &q, 8).into_iter().map(|(j, _)| j).collect();
        assert_eq!(e.layers[0].neighbors, nn);
        for (j, r) in nn.iter().zip(&e.layers[0].responses) {
            assert!((y[*j] - r).abs() < 1e-12);
        }
    }
}
