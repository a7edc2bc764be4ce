//! File formats: DVEB matrices, checkpoint directories, composite models
//! and embedding export directories.
//!
//! A DVEB file is a 17-byte header followed by the payload:
//!
//! | offset | size | content                         |
//! |--------|------|---------------------------------|
//! | 0      | 4    | magic `DVEB`                    |
//! | 4      | 4    | format version, u32 LE (= 1)    |
//! | 8      | 1    | dtype (2 = float64)             |
//! | 9      | 4    | rows, u32 LE                    |
//! | 13     | 4    | cols, u32 LE                    |
//! | 17     | 8·rc | row-major little-endian f64     |
//!
//! Structured artifacts are directories holding a JSON metadata file next
//! to the DVEB files it references by relative name.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composite::{Activation, CompositeError, CompositeModel, LayerSpec};
use crate::ensemble::EnsembleConfig;
use crate::kernel::KernelParams;
use crate::matrix::Matrix;
use crate::neighbors::NeighborBackend;
use crate::vecchia::{OptimizerConfig, ResponseScaling};

pub const MAGIC: &[u8; 4] = b"DVEB";
pub const DVEB_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 2;
pub const HEADER_LEN: usize = 17;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_VERSION: u32 = 1;
pub const EXPORT_VERSION: u32 = 1;

pub const CHECKPOINT_META: &str = "meta.json";
pub const MODEL_META: &str = "model.json";
pub const EXPORT_MANIFEST: &str = "manifest.json";
pub const EXPORT_RESPONSES: &str = "y.dveb";

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a DVEB file (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported DVEB version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported DVEB dtype {0} (only 2 = float64 is defined)")]
    UnsupportedDtype(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} unexpected bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{rows}×{cols} matrix exceeds the u32 dimension limit")]
    TooLarge { rows: usize, cols: usize },
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("expected a vector, found a {rows}×{cols} matrix")]
    NotAVector { rows: usize, cols: usize },
    #[error("JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{what} format version {found} is not supported (expected {expected})")]
    SchemaVersion { what: &'static str, found: u32, expected: u32 },
    #[error("missing referenced file {0}")]
    MissingReference(PathBuf),
    #[error("reference '{0}' must be a plain relative file name")]
    InvalidReference(String),
    #[error("composite model hash {found} does not match checkpoint hash {expected}")]
    ModelMismatch { expected: String, found: String },
    #[error("inconsistent artifact: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] CompositeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataIoError + '_ {
    move |source| DataIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes `m` to DVEB bytes.
pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>, DataIoError> {
    let too_large = || DataIoError::TooLarge {
        rows: m.rows(),
        cols: m.cols(),
    };
    let rows = u32::try_from(m.rows()).map_err(|_| too_large())?;
    let cols = u32::try_from(m.cols()).map_err(|_| too_large())?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DVEB_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

/// Parses DVEB bytes. Every failure is a distinct error; no partial matrix
/// is ever returned.
pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix, DataIoError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataIoError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataIoError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = le_u32(&bytes[4..8]);
    if version != DVEB_VERSION {
        return Err(DataIoError::UnsupportedVersion(version));
    }
    if bytes[8] != DTYPE_F64 {
        return Err(DataIoError::UnsupportedDtype(bytes[8]));
    }
    let rows = le_u32(&bytes[9..13]) as usize;
    let cols = le_u32(&bytes[13..17]) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or(DataIoError::TooLarge { rows, cols })?;
    if bytes.len() < expected {
        return Err(DataIoError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataIoError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let m = Matrix::new(rows, cols, data).expect("length checked");
    if let Some((row, col)) = m.first_non_finite() {
        return Err(DataIoError::NonFinite { row, col });
    }
    Ok(m)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Parses headerless CSV, one row per line. Blank lines are skipped.
pub fn parse_csv(text: &str) -> Result<Matrix, DataIoError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| DataIoError::Csv {
                    line: i + 1,
                    message: format!("'{}': {e}", f.trim()),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DataIoError::Csv {
                    line: i + 1,
                    message: format!("{} fields, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let m = Matrix::new(rows.len(), cols, rows.concat()).expect("rectangular");
    if let Some((row, col)) = m.first_non_finite() {
        return Err(DataIoError::NonFinite { row, col });
    }
    Ok(m)
}

fn format_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for r in m.row_iter() {
        let fields: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

/// Writes `m` as DVEB, or as CSV when the extension is `.csv`.
pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<(), DataIoError> {
    let path = path.as_ref();
    let bytes = if is_csv(path) {
        format_csv(m).into_bytes()
    } else {
        encode_matrix(m)?
    };
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a DVEB file, or headerless CSV when the extension is `.csv`.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix, DataIoError> {
    let path = path.as_ref();
    if is_csv(path) {
        parse_csv(&fs::read_to_string(path).map_err(io_err(path))?)
    } else {
        decode_matrix(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Reads a matrix that must be a single row or column.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>, DataIoError> {
    let m = read_matrix(path)?;
    match m.shape() {
        (_, 1) | (1, _) => Ok(m.into_vec()),
        (0, _) | (_, 0) => Ok(Vec::new()),
        (rows, cols) => Err(DataIoError::NotAVector { rows, cols }),
    }
}

pub fn write_vector(v: &[f64], path: impl AsRef<Path>) -> Result<(), DataIoError> {
    write_matrix(&Matrix::column(v), path)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DataIoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataIoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataIoError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataIoError::MissingReference(path.to_path_buf())
        } else {
            io_err(path)(e)
        }
    })?;
    serde_json::from_str(&text).map_err(|source| DataIoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Resolves a reference stored in metadata, which must be a bare file name
/// inside `dir`, and checks that it exists.
fn resolve(dir: &Path, name: &str) -> Result<PathBuf, DataIoError> {
    let rel = Path::new(name);
    let mut parts = rel.components();
    if !matches!((parts.next(), parts.next()), (Some(Component::Normal(_)), None)) {
        return Err(DataIoError::InvalidReference(name.to_string()));
    }
    let full = dir.join(rel);
    if !full.is_file() {
        return Err(DataIoError::MissingReference(full));
    }
    Ok(full)
}

fn read_ref(dir: &Path, name: &str) -> Result<Matrix, DataIoError> {
    read_matrix(resolve(dir, name)?)
}

fn create_dir(dir: &Path) -> Result<(), DataIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

// ---------------------------------------------------------------- checkpoint

/// Conditioning-set metadata shared by every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningMeta {
    pub m: usize,
    pub ordering_seed: u64,
    pub backend: NeighborBackend,
}

/// One fitted layer as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheckpoint {
    pub params: KernelParams,
    pub embeddings: Matrix,
    /// `n × m` neighbor table, `-1` padded.
    pub sets: Matrix,
    pub centroids: Option<Matrix>,
    pub loss_trace: Vec<f64>,
}

/// Everything needed to predict without refitting or recomputing sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_hash: Option<String>,
    pub ensemble: EnsembleConfig,
    pub conditioning: ConditioningMeta,
    pub optimizer: OptimizerConfig,
    pub scaling: ResponseScaling,
    /// Standardized training responses.
    pub responses: Vec<f64>,
    pub ordering: Vec<usize>,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerMeta {
    layer: usize,
    dim: usize,
    params: KernelParams,
    embeddings: String,
    sets: String,
    centroids: Option<String>,
    loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    model_hash: Option<String>,
    ensemble: EnsembleConfig,
    conditioning: ConditioningMeta,
    optimizer: OptimizerConfig,
    scaling: ResponseScaling,
    n: usize,
    responses: String,
    ordering: String,
    layers: Vec<LayerMeta>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn check_version(path: &Path, what: &'static str, expected: u32) -> Result<(), DataIoError> {
    let probe: VersionProbe = read_json(path)?;
    if probe.format_version != expected {
        return Err(DataIoError::SchemaVersion {
            what,
            found: probe.format_version,
            expected,
        });
    }
    Ok(())
}

/// Writes `dir/meta.json` and its sibling DVEB files. Saving the same
/// checkpoint twice produces byte-identical files.
pub fn save_checkpoint(c: &Checkpoint, dir: impl AsRef<Path>) -> Result<(), DataIoError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let n = c.responses.len();
    if c.ordering.len() != n {
        return Err(DataIoError::Inconsistent(format!("ordering has {} entries for {n} responses", c.ordering.len())));
    }
    let mut layers = Vec::with_capacity(c.layers.len());
    for (k, l) in c.layers.iter().enumerate() {
        let k = k + 1;
        if l.embeddings.rows() != n || l.sets.rows() != n {
            return Err(DataIoError::Inconsistent(format!("layer {k} row counts do not match {n} responses")));
        }
        let meta = LayerMeta {
            layer: k,
            dim: l.embeddings.cols(),
            params: l.params.clone(),
            embeddings: format!("layer_{k}_embeddings.dveb"),
            sets: format!("layer_{k}_sets.dveb"),
            centroids: l.centroids.as_ref().map(|_| format!("layer_{k}_centroids.dveb")),
            loss_trace: l.loss_trace.clone(),
        };
        write_matrix(&l.embeddings, dir.join(&meta.embeddings))?;
        write_matrix(&l.sets, dir.join(&meta.sets))?;
        if let (Some(m), Some(name)) = (&l.centroids, &meta.centroids) {
            write_matrix(m, dir.join(name))?;
        }
        layers.push(meta);
    }
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        model_hash: c.model_hash.clone(),
        ensemble: c.ensemble,
        conditioning: c.conditioning.clone(),
        optimizer: c.optimizer.clone(),
        scaling: c.scaling,
        n,
        responses: "responses.dveb".into(),
        ordering: "ordering.dveb".into(),
        layers,
    };
    write_vector(&c.responses, dir.join(&meta.responses))?;
    let ord: Vec<f64> = c.ordering.iter().map(|&i| i as f64).collect();
    write_vector(&ord, dir.join(&meta.ordering))?;
    write_json(&meta, &dir.join(CHECKPOINT_META))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint, DataIoError> {
    let dir = dir.as_ref();
    let meta_path = dir.join(CHECKPOINT_META);
    check_version(&meta_path, "checkpoint", CHECKPOINT_VERSION)?;
    let meta: CheckpointMeta = read_json(&meta_path)?;
    let responses = read_ref(dir, &meta.responses)?.into_vec();
    let ordering_raw = read_ref(dir, &meta.ordering)?.into_vec();
    if responses.len() != meta.n || ordering_raw.len() != meta.n {
        return Err(DataIoError::Inconsistent(format!(
            "expected {} responses and ordering entries, found {} and {}",
            meta.n,
            responses.len(),
            ordering_raw.len()
        )));
    }
    let ordering = ordering_raw
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < meta.n as f64 {
                Ok(v as usize)
            } else {
                Err(DataIoError::Inconsistent(format!("ordering entry {v} is not an index below {}", meta.n)))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for (k, l) in meta.layers.into_iter().enumerate() {
        if l.layer != k + 1 {
            return Err(DataIoError::Inconsistent(format!("layer entry {} listed at position {}", l.layer, k + 1)));
        }
        let embeddings = read_ref(dir, &l.embeddings)?;
        let sets = read_ref(dir, &l.sets)?;
        let centroids = l.centroids.as_deref().map(|c| read_ref(dir, c)).transpose()?;
        if embeddings.rows() != meta.n || embeddings.cols() != l.dim || sets.rows() != meta.n {
            return Err(DataIoError::Inconsistent(format!("layer {} matrices do not match the metadata", l.layer)));
        }
        if l.params.dim() != l.dim {
            return Err(DataIoError::Inconsistent(format!(
                "layer {} has {} lengthscales for dimension {}",
                l.layer,
                l.params.dim(),
                l.dim
            )));
        }
        layers.push(LayerCheckpoint {
            params: l.params,
            embeddings,
            sets,
            centroids,
            loss_trace: l.loss_trace,
        });
    }
    Ok(Checkpoint {
        model_hash: meta.model_hash,
        ensemble: meta.ensemble,
        conditioning: meta.conditioning,
        optimizer: meta.optimizer,
        scaling: meta.scaling,
        responses,
        ordering,
        layers,
    })
}

/// Fails unless the checkpoint was built from `model` (when it records a
/// model at all).
pub fn verify_model(c: &Checkpoint, model: &CompositeModel) -> Result<(), DataIoError> {
    match &c.model_hash {
        Some(expected) => {
            let found = model.content_hash();
            if &found != expected {
                return Err(DataIoError::ModelMismatch {
                    expected: expected.clone(),
                    found,
                });
            }
            Ok(())
        }
        None => Ok(()),
    }
}

// --------------------------------------------------------------------- model

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelLayerMeta {
    activation: Activation,
    d_in: usize,
    d_out: usize,
    weight: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    format_version: u32,
    hash: String,
    layers: Vec<ModelLayerMeta>,
}

/// Writes `dir/model.json` plus one weight and one bias DVEB per layer
/// (bias stored as a 1 × d_out row).
pub fn save_model(model: &CompositeModel, dir: impl AsRef<Path>) -> Result<(), DataIoError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut layers = Vec::new();
    for (k, l) in model.layers().iter().enumerate() {
        let k = k + 1;
        let meta = ModelLayerMeta {
            activation: l.activation,
            d_in: l.d_in(),
            d_out: l.d_out(),
            weight: format!("layer_{k}_weight.dveb"),
            bias: format!("layer_{k}_bias.dveb"),
        };
        write_matrix(&l.weight, dir.join(&meta.weight))?;
        write_matrix(&Matrix::new(1, l.d_out(), l.bias.clone()).expect("row"), dir.join(&meta.bias))?;
        layers.push(meta);
    }
    write_json(
        &ModelMeta {
            format_version: MODEL_VERSION,
            hash: model.content_hash(),
            layers,
        },
        &dir.join(MODEL_META),
    )
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<CompositeModel, DataIoError> {
    let dir = dir.as_ref();
    let path = dir.join(MODEL_META);
    check_version(&path, "model", MODEL_VERSION)?;
    let meta: ModelMeta = read_json(&path)?;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for (k, l) in meta.layers.iter().enumerate() {
        let weight = read_ref(dir, &l.weight)?;
        let bias = read_ref(dir, &l.bias)?;
        if weight.shape() != (l.d_in, l.d_out) || bias.shape() != (1, l.d_out) {
            return Err(DataIoError::Inconsistent(format!("layer {} parameter shapes do not match model.json", k + 1)));
        }
        layers.push(LayerSpec::new(weight, bias.into_vec(), l.activation)?);
    }
    let model = CompositeModel::new(layers)?;
    if model.content_hash() != meta.hash {
        return Err(DataIoError::ModelMismatch {
            expected: meta.hash,
            found: model.content_hash(),
        });
    }
    Ok(model)
}

// -------------------------------------------------------------------- export

/// One captured layer in an export directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub name: String,
    pub file: String,
    pub dim: usize,
}

/// `manifest.json` of an embedding export directory: `layer_<k>.dveb`
/// (k from 1), `y.dveb` and this manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportManifest {
    pub format_version: u32,
    pub layers: Vec<ManifestLayer>,
    pub rows: usize,
    pub source_model: String,
    pub split: String,
    pub responses: String,
}

/// Per-layer embeddings and responses read back from an export directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Export {
    pub manifest: ExportManifest,
    pub layers: Vec<Matrix>,
    pub responses: Vec<f64>,
}

pub fn write_export(
    dir: impl AsRef<Path>,
    layers: &[Matrix],
    responses: &[f64],
    source_model: &str,
    split: &str,
) -> Result<ExportManifest, DataIoError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut entries = Vec::with_capacity(layers.len());
    for (k, e) in layers.iter().enumerate() {
        if e.rows() != responses.len() {
            return Err(DataIoError::Inconsistent(format!(
                "layer {} has {} rows but there are {} responses",
                k + 1,
                e.rows(),
                responses.len()
            )));
        }
        let entry = ManifestLayer {
            name: format!("layer_{}", k + 1),
            file: format!("layer_{}.dveb", k + 1),
            dim: e.cols(),
        };
        write_matrix(e, dir.join(&entry.file))?;
        entries.push(entry);
    }
    write_vector(responses, dir.join(EXPORT_RESPONSES))?;
    let manifest = ExportManifest {
        format_version: EXPORT_VERSION,
        layers: entries,
        rows: responses.len(),
        source_model: source_model.to_string(),
        split: split.to_string(),
        responses: EXPORT_RESPONSES.to_string(),
    };
    write_json(&manifest, &dir.join(EXPORT_MANIFEST))?;
    Ok(manifest)
}

/// Reads an export directory, checking every file against the manifest.
pub fn read_export(dir: impl AsRef<Path>) -> Result<Export, DataIoError> {
    let dir = dir.as_ref();
    let path = dir.join(EXPORT_MANIFEST);
    check_version(&path, "export manifest", EXPORT_VERSION)?;
    let manifest: ExportManifest = read_json(&path)?;
    let y = read_ref(dir, &manifest.responses)?;
    if y.cols() != 1 || y.rows() != manifest.rows {
        return Err(DataIoError::Inconsistent(format!(
            "responses are {}×{}, manifest declares {} rows",
            y.rows(),
            y.cols(),
            manifest.rows
        )));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        let e = read_ref(dir, &l.file)?;
        if e.rows() != manifest.rows || e.cols() != l.dim {
            return Err(DataIoError::Inconsistent(format!(
                "{} is {}×{}, manifest declares {}×{}",
                l.file,
                e.rows(),
                e.cols(),
                manifest.rows,
                l.dim
            )));
        }
        layers.push(e);
    }
    Ok(Export {
        manifest,
        layers,
        responses: y.into_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_arithmetic() {
        let b = encode_matrix(&Matrix::zeros(1, 1)).unwrap();
        assert_eq!(b.len(), 25);
        assert_eq!(&b[..4], b"DVEB");
        assert_eq!(b[8], 2);
        let b = encode_matrix(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(b.len() - HEADER_LEN, 48);
    }

    #[test]
    fn distinct_decode_errors() {
        let good = encode_matrix(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix(&bad), Err(DataIoError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_matrix(&bad), Err(DataIoError::UnsupportedVersion(9))));
        let mut bad = good.clone();
        bad[8] = 1;
        assert!(matches!(decode_matrix(&bad), Err(DataIoError::UnsupportedDtype(1))));
        assert!(matches!(
            decode_matrix(&good[..good.len() - 1]),
            Err(DataIoError::Truncated { expected: 33, found: 32 })
        ));
        assert!(matches!(decode_matrix(&good[..10]), Err(DataIoError::Truncated { .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_matrix(&bad), Err(DataIoError::TrailingBytes { extra: 1 })));
        let mut bad = good.clone();
        bad[25..33].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_matrix(&bad), Err(DataIoError::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn csv_parsing() {
        let m = parse_csv("1.5,2.0\n3.0,4.0").unwrap();
        assert_eq!(m, Matrix::from_rows(&[[1.5, 2.0], [3.0, 4.0]]).unwrap());
        assert!(matches!(parse_csv("1,2\n3"), Err(DataIoError::Csv { line: 2, .. })));
        assert!(matches!(parse_csv("1,x"), Err(DataIoError::Csv { line: 1, .. })));
        assert!(matches!(parse_csv("1,inf"), Err(DataIoError::NonFinite { .. })));
        assert_eq!(parse_csv("").unwrap().shape(), (0, 0));
    }

    #[test]
    fn references_stay_inside_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(resolve(dir.path(), "../x.dveb"), Err(DataIoError::InvalidReference(_))));
        assert!(matches!(resolve(dir.path(), "/etc/passwd"), Err(DataIoError::InvalidReference(_))));
        assert!(matches!(resolve(dir.path(), "a.dveb"), Err(DataIoError::MissingReference(_))));
    }
}
