//! Deep Vecchia ensembles.
//!
//! Each hidden layer of a feed-forward network defines an intermediate
//! space. A Vecchia-approximated Gaussian process is fitted on every such
//! space, all sharing one random ordering of the training data, and their
//! predictions are merged by a generalized product of experts into one
//! Gaussian whose variance splits into aleatoric and epistemic parts.
//!
//! ```no_run
//! use dve::{composite, pipeline, matrix::Matrix};
//!
//! let (x, y) = composite::make_scurve(1000, 0.1, 7);
//! let cfg = composite::TrainConfig::new(&[2, 2, 2], composite::Activation::Selu, 300, 0.05, 7);
//! let net = composite::train_toy_mlp(&x, &y, &cfg).unwrap().model;
//! let fe = pipeline::build(&net, &x, &y, &pipeline::BuildConfig::default()).unwrap();
//! let preds = fe.predict_batch(&net, &Matrix::from_rows(&[[0.0, 1.0, -1.0]]).unwrap()).unwrap();
//! println!("{} ± {}", preds[0].mean, preds[0].variance.sqrt());
//! ```

pub mod composite;
pub mod dataio;
pub mod demo;
pub mod ensemble;
pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod neighbors;
pub mod pipeline;
pub mod vecchia;

pub use composite::{Activation, CompositeModel, LayerSpec};
pub use ensemble::{CombineSpace, CombinedPrediction, EnsembleConfig, WeightScheme};
pub use kernel::KernelParams;
pub use matrix::Matrix;
pub use neighbors::NeighborBackend;
pub use pipeline::{build, BuildConfig, FittedEnsemble};
pub use vecchia::{EmbeddingDataset, GaussianPrediction, OptimizerConfig};
