use std::fs;

use dve::composite::{Activation, CompositeModel, LayerSpec};
use dve::dataio::{self, DataIoError};
use dve::pipeline::{build, BuildConfig, FittedEnsemble};
use dve::ensemble::{CombineSpace, EnsembleConfig, WeightScheme};
use dve::matrix::Matrix;
use dve::vecchia::OptimizerConfig;
use dve::NeighborBackend;
use proptest::prelude::*;

fn small_model() -> CompositeModel {
    CompositeModel::new(vec![
        LayerSpec::new(Matrix::from_rows(&[[0.5, -1.0, 0.2], [0.3, 0.8, -0.4]]).unwrap(), vec![0.1, 0.0, -0.2], Activation::Selu).unwrap(),
        LayerSpec::new(Matrix::from_rows(&[[1.0, 0.2], [-0.5, 0.7], [0.3, 0.3]]).unwrap(), vec![0.0, 0.1], Activation::LeakyRelu { slope: 0.05 }).unwrap(),
        LayerSpec::new(Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(), vec![0.5], Activation::Identity).unwrap(),
    ])
    .unwrap()
}

fn data(n: usize) -> (Matrix, Vec<f64>) {
    let x = Matrix::new(n, 2, (0..2 * n).map(|v| ((v * 7919 % 211) as f64) / 70.0 - 1.5).collect()).unwrap();
    let y = x.row_iter().map(|r| r[0].sin() * 2.0 + r[1] * r[1]).collect();
    (x, y)
}

fn fitted(backend: NeighborBackend) -> FittedEnsemble {
    let (x, y) = data(80);
    let cfg = BuildConfig {
        m: 6,
        seed: 4,
        optimizer: OptimizerConfig {
            batch_size: 32,
            steps: 15,
            learning_rate: 0.05,
            seed: 4,
        },
        ensemble: EnsembleConfig {
            scheme: WeightScheme::DifferentialEntropy,
            space: CombineSpace::FSpace,
            use_softmax: true,
            temperature: 3.0,
        },
        backend,
    };
    build(&small_model(), &x, &y, &cfg).unwrap()
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn matrix_round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let mut state = seed;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                // arbitrary finite bit patterns, including subnormals and signed zeros
                loop {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let v = f64::from_bits(state);
                    if v.is_finite() {
                        break v;
                    }
                }
            })
            .collect();
        let m = Matrix::new(rows, cols, data).unwrap();
        let back = dataio::decode_matrix(&dataio::encode_matrix(&m).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn file_round_trip_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::from_rows(&[[1.5, -0.0, 3e-310], [f64::MAX, f64::MIN_POSITIVE, -7.25]]).unwrap();
    let p = dir.path().join("m.dveb");
    dataio::write_matrix(&m, &p).unwrap();
    assert_eq!(fs::metadata(&p).unwrap().len(), 17 + 48);
    assert_eq!(dataio::read_matrix(&p).unwrap(), m);

    let c = dir.path().join("m.csv");
    fs::write(&c, "1.5,2.0\n3.0,4.0").unwrap();
    assert_eq!(dataio::read_matrix(&c).unwrap(), Matrix::from_rows(&[[1.5, 2.0], [3.0, 4.0]]).unwrap());
    dataio::write_matrix(&m, &c).unwrap();
    let back = dataio::read_matrix(&c).unwrap();
    assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a == b));
}

#[test]
fn truncated_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.dveb");
    dataio::write_matrix(&Matrix::zeros(3, 3), &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(dataio::read_matrix(&p), Err(DataIoError::Truncated { .. })));
    assert!(matches!(dataio::read_matrix(dir.path().join("absent.dveb")), Err(DataIoError::Io { .. })));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    for backend in [NeighborBackend::Exact, NeighborBackend::Ivf { n_list: 5, n_probe: 2 }] {
        let fe = fitted(backend);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fe.save(a.path()).unwrap();
        let loaded = dataio::load_checkpoint(a.path()).unwrap();
        assert_eq!(loaded, fe.to_checkpoint());
        FittedEnsemble::load(a.path()).unwrap().save(b.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        // saving twice into the same place is stable too
        fe.save(a.path()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }
}

#[test]
fn checkpoint_errors() {
    let fe = fitted(NeighborBackend::Exact);
    let dir = tempfile::tempdir().unwrap();
    fe.save(dir.path()).unwrap();

    let meta = dir.path().join("meta.json");
    let text = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, text.replacen("\"format_version\": 1", "\"format_version\": 7", 1)).unwrap();
    assert!(matches!(
        dataio::load_checkpoint(dir.path()),
        Err(DataIoError::SchemaVersion { found: 7, expected: 1, .. })
    ));
    fs::write(&meta, &text).unwrap();

    fs::remove_file(dir.path().join("layer_2_sets.dveb")).unwrap();
    assert!(matches!(dataio::load_checkpoint(dir.path()), Err(DataIoError::MissingReference(_))));

    let other = CompositeModel::new(vec![
        LayerSpec::new(Matrix::identity(2), vec![0.0; 2], Activation::Identity).unwrap(),
        LayerSpec::new(Matrix::new(2, 1, vec![1.0; 2]).unwrap(), vec![0.0], Activation::Identity).unwrap(),
    ])
    .unwrap();
    assert!(matches!(dataio::verify_model(&fe.to_checkpoint(), &other), Err(DataIoError::ModelMismatch { .. })));
    dataio::verify_model(&fe.to_checkpoint(), &small_model()).unwrap();
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model();
    dataio::save_model(&model, dir.path()).unwrap();
    let back = dataio::load_model(dir.path()).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.content_hash(), model.content_hash());

    // tampering with a weight is caught by the stored hash
    let w = dir.path().join("layer_1_weight.dveb");
    let mut m = dataio::read_matrix(&w).unwrap();
    m[(0, 0)] += 1.0;
    dataio::write_matrix(&m, &w).unwrap();
    assert!(matches!(dataio::load_model(dir.path()), Err(DataIoError::ModelMismatch { .. })));
}

#[test]
fn export_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = data(30);
    let model = small_model();
    let layers = model.embed(&x).unwrap();
    let manifest = dataio::write_export(dir.path(), &layers, &y, &model.content_hash(), "train").unwrap();
    for name in ["layer_1.dveb", "layer_2.dveb", "y.dveb", "manifest.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert_eq!(manifest.layers.iter().map(|l| l.dim).collect::<Vec<_>>(), vec![3, 2]);
    let back = dataio::read_export(dir.path()).unwrap();
    assert_eq!(back.layers, layers);
    assert_eq!(back.responses, y);
    assert_eq!(back.manifest, manifest);

    // a layer whose row count disagrees with the manifest is rejected
    dataio::write_matrix(&Matrix::zeros(29, 3), dir.path().join("layer_1.dveb")).unwrap();
    assert!(matches!(dataio::read_export(dir.path()), Err(DataIoError::Inconsistent(_))));
}

#[test]
fn export_and_internal_extraction_fit_identically() {
    let (x, y) = data(60);
    let model = small_model();
    let cfg = BuildConfig {
        m: 5,
        optimizer: OptimizerConfig {
            steps: 10,
            batch_size: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let internal = build(&model, &x, &y, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    dataio::write_export(dir.path(), &model.embed(&x).unwrap(), &y, &model.content_hash(), "train").unwrap();
    let ex = dataio::read_export(dir.path()).unwrap();
    let external = dve::pipeline::build_from_embeddings(ex.layers, &ex.responses, Some(ex.manifest.source_model), &cfg).unwrap();
    assert_eq!(internal.to_checkpoint(), external.to_checkpoint());
}
