use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dve::dataio::{self, DataIoError};
use dve::demo::{run_scurve, ScurveConfig};
use dve::pipeline::{self, build_from_embeddings, BuildConfig, DveError, FittedEnsemble};
use dve::vecchia::{OptimizerConfig, ResponseScaling};
use dve::{CombineSpace, CompositeModel, EnsembleConfig, Matrix, NeighborBackend, WeightScheme};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataIoError),
    #[error(transparent)]
    Pipeline(#[from] DveError),
    #[error(transparent)]
    Composite(#[from] dve::composite::CompositeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Deep Vecchia ensembles: per-layer Gaussian processes on the hidden
/// representations of a feed-forward network.
#[derive(Debug, Parser)]
#[command(name = "dve", version, propagate_version = true)]
struct Cli {
    /// Worker threads (falls back to DVE_THREADS, then all cores)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write every layer's embeddings of X, plus y, to an export directory
    Extract(ExtractArgs),
    /// Fit an ensemble and write a checkpoint directory
    Fit(FitArgs),
    /// Predict from a checkpoint; CSV with header mean,var,epistemic,aleatoric
    Predict(PredictArgs),
    /// RMSE and NLL of a prediction CSV against the truth, as JSON
    Eval(EvalArgs),
    /// Per-layer neighbours, weights and moments behind one prediction, as JSON
    Explain(ExplainArgs),
    /// Train a small network on the S-curve and compare it with its ensemble
    DemoScurve(DemoArgs),
}

/// Where query or training inputs come from: a model directory plus raw
/// inputs, or a precomputed export directory.
#[derive(Debug, Args)]
struct Inputs {
    /// Model directory (model.json plus weight files)
    #[arg(long, value_name = "DIR", requires = "x", conflicts_with = "embeddings")]
    model: Option<PathBuf>,
    /// Inputs, one row per point (.dveb or headerless .csv)
    #[arg(long, value_name = "FILE")]
    x: Option<PathBuf>,
    /// Export directory of per-layer embeddings (layer_<k>.dveb, y.dveb, manifest.json)
    #[arg(long, value_name = "DIR")]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Model directory (model.json plus weight files)
    #[arg(long, value_name = "DIR")]
    model: PathBuf,
    /// Inputs, one row per point (.dveb or headerless .csv)
    #[arg(long, value_name = "FILE")]
    x: PathBuf,
    /// Responses, one per row of X
    #[arg(long, value_name = "FILE")]
    y: PathBuf,
    /// Output export directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Split label recorded in the manifest
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Training responses (required with --model; taken from the export otherwise)
    #[arg(long, value_name = "FILE")]
    y: Option<PathBuf>,
    /// Output checkpoint directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// TOML file with fit settings; explicit flags take precedence
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Conditioning-set size [default: 16]
    #[arg(long)]
    m: Option<usize>,
    /// Seed for the ordering, mini-batches and IVF training [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps per layer [default: 500]
    #[arg(long)]
    steps: Option<usize>,
    /// Mini-batch size [default: 256]
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 0.1]
    #[arg(long)]
    lr: Option<f64>,
    /// Weighting scheme: uniform, posterior-variance, differential-entropy, wasserstein [default: posterior-variance]
    #[arg(long)]
    scheme: Option<WeightScheme>,
    /// Combination space [default: y-space]
    #[arg(long)]
    space: Option<SpaceArg>,
    /// Pass raw weights through a temperature softmax
    #[arg(long)]
    softmax: bool,
    /// Softmax temperature [default: 1]
    #[arg(long)]
    temperature: Option<f64>,
    /// Neighbour search backend [default: exact]
    #[arg(long)]
    backend: Option<BackendArg>,
    /// IVF cluster count [default: sqrt(n)]
    #[arg(long)]
    n_list: Option<usize>,
    /// IVF clusters probed per query [default: max(1, n_list / 8)]
    #[arg(long)]
    n_probe: Option<usize>,
}

#[derive(Clone, Copy, Debug, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum SpaceArg {
    YSpace,
    FSpace,
}

#[derive(Clone, Copy, Debug, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum BackendArg {
    Exact,
    Ivf,
}

/// Fit settings read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FitFile {
    m: Option<usize>,
    seed: Option<u64>,
    steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    scheme: Option<String>,
    space: Option<SpaceArg>,
    softmax: Option<bool>,
    temperature: Option<f64>,
    backend: Option<BackendArg>,
    n_list: Option<usize>,
    n_probe: Option<usize>,
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint directory written by `fit`
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    #[command(flatten)]
    inputs: Inputs,
    /// Output CSV (standard output if omitted)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Prediction CSV with mean and var columns
    #[arg(long, value_name = "FILE")]
    predictions: PathBuf,
    /// True responses
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
    /// Report on the checkpoint's standardized response scale instead
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    /// Checkpoint directory written by `fit`
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    #[command(flatten)]
    inputs: Inputs,
    /// Row of the inputs to explain
    #[arg(long, default_value_t = 0)]
    row: usize,
}

#[derive(Debug, Args)]
struct DemoArgs {
    /// Seed for data, network initialization and ensemble fitting
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save model/, checkpoint/ and report.json here
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut threads = cli.threads;
    if threads.is_none() {
        if let Ok(v) = std::env::var("DVE_THREADS") {
            threads = Some(v.trim().parse().map_err(|_| CliError::Usage(format!("DVE_THREADS must be a positive integer, got '{v}'")))?);
        }
    }
    match cli.command {
        Command::Fit(args) => {
            let (cfg, file_threads) = fit_config(&args)?;
            with_threads(threads.or(file_threads), || fit(&args, &cfg))
        }
        Command::Extract(args) => with_threads(threads, || extract(&args)),
        Command::Predict(args) => with_threads(threads, || predict(&args)),
        Command::Eval(args) => eval(&args),
        Command::Explain(args) => with_threads(threads, || explain(&args)),
        Command::DemoScurve(args) => with_threads(threads, || demo(&args)),
    }
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(f)
}

fn fit_config(args: &FitArgs) -> Result<(BuildConfig, Option<usize>)> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
            toml::from_str::<FitFile>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => FitFile::default(),
    };
    let defaults = BuildConfig::default();
    let opt_defaults = OptimizerConfig::default();
    let ens_defaults = EnsembleConfig::default();

    let scheme = match (args.scheme, &file.scheme) {
        (Some(s), _) => s,
        (None, Some(s)) => s.parse().map_err(CliError::Usage)?,
        (None, None) => ens_defaults.scheme,
    };
    let space = match args.space.or(file.space) {
        Some(SpaceArg::YSpace) => CombineSpace::YSpace,
        Some(SpaceArg::FSpace) => CombineSpace::FSpace,
        None => ens_defaults.space,
    };
    let seed = args.seed.or(file.seed).unwrap_or(defaults.seed);
    let n_list = args.n_list.or(file.n_list);
    let n_probe = args.n_probe.or(file.n_probe);
    let backend = match args.backend.or(file.backend).unwrap_or(BackendArg::Exact) {
        BackendArg::Exact => {
            if n_list.is_some() || n_probe.is_some() {
                return Err(CliError::Usage("--n-list and --n-probe need --backend ivf".into()));
            }
            NeighborBackend::Exact
        }
        // zero marks "choose from n" and is resolved once the data is loaded
        BackendArg::Ivf => NeighborBackend::Ivf {
            n_list: n_list.unwrap_or(0),
            n_probe: n_probe.unwrap_or(0),
        },
    };
    let cfg = BuildConfig {
        m: args.m.or(file.m).unwrap_or(defaults.m),
        seed,
        optimizer: OptimizerConfig {
            batch_size: args.batch.or(file.batch).unwrap_or(opt_defaults.batch_size),
            steps: args.steps.or(file.steps).unwrap_or(opt_defaults.steps),
            learning_rate: args.lr.or(file.lr).unwrap_or(opt_defaults.learning_rate),
            seed,
        },
        ensemble: EnsembleConfig {
            scheme,
            space,
            use_softmax: args.softmax || file.softmax.unwrap_or(ens_defaults.use_softmax),
            temperature: args.temperature.or(file.temperature).unwrap_or(ens_defaults.temperature),
        },
        backend,
    };
    if cfg.m == 0 {
        return Err(CliError::Usage("--m must be at least 1".into()));
    }
    if cfg.optimizer.batch_size == 0 {
        return Err(CliError::Usage("--batch must be at least 1".into()));
    }
    if !(cfg.optimizer.learning_rate.is_finite() && cfg.optimizer.learning_rate > 0.0) {
        return Err(CliError::Usage("--lr must be positive".into()));
    }
    cfg.ensemble.validate().map_err(CliError::Usage)?;
    Ok((cfg, file.threads))
}

fn resolve_backend(backend: NeighborBackend, n: usize) -> Result<NeighborBackend> {
    match backend {
        NeighborBackend::Exact => Ok(backend),
        NeighborBackend::Ivf { n_list, n_probe } => {
            let n_list = if n_list == 0 { ((n as f64).sqrt().round() as usize).clamp(1, n.max(1)) } else { n_list };
            let n_probe = if n_probe == 0 { (n_list / 8).max(1) } else { n_probe };
            let b = NeighborBackend::Ivf { n_list, n_probe };
            b.validate(n).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(b)
        }
    }
}

fn read_matrix(p: &Path) -> Result<Matrix> {
    Ok(dataio::read_matrix(p)?)
}

fn load_model(p: &Path) -> Result<CompositeModel> {
    Ok(dataio::load_model(p)?)
}

/// Per-layer embeddings of the inputs, plus the source model's hash and
/// the export's responses when read from an export directory.
fn embeddings(inputs: &Inputs) -> Result<(Vec<Matrix>, String, Option<Vec<f64>>)> {
    match (&inputs.model, &inputs.x, &inputs.embeddings) {
        (Some(m), Some(x), None) => {
            let model = load_model(m)?;
            let x = read_matrix(x)?;
            Ok((model.embed(&x)?, model.content_hash(), None))
        }
        (None, None, Some(dir)) => {
            let ex = dataio::read_export(dir)?;
            Ok((ex.layers, ex.manifest.source_model, Some(ex.responses)))
        }
        _ => Err(CliError::Usage("give either --model with --x, or --embeddings".into())),
    }
}

fn extract(args: &ExtractArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let x = read_matrix(&args.x)?;
    let y = dataio::read_vector(&args.y)?;
    if y.len() != x.rows() {
        return Err(CliError::Runtime(format!("X has {} rows but y has {} values", x.rows(), y.len())));
    }
    let layers = model.embed(&x)?;
    let manifest = dataio::write_export(&args.out, &layers, &y, &model.content_hash(), &args.split)?;
    eprintln!("wrote {} layers × {} rows to {}", manifest.layers.len(), manifest.rows, args.out.display());
    Ok(())
}

fn fit(args: &FitArgs, cfg: &BuildConfig) -> Result<()> {
    let (layers, hash, export_y) = embeddings(&args.inputs)?;
    let y = match (&args.y, export_y) {
        (Some(p), _) => dataio::read_vector(p)?,
        (None, Some(y)) => y,
        (None, None) => return Err(CliError::Usage("--y is required with --model".into())),
    };
    let mut cfg = cfg.clone();
    cfg.backend = resolve_backend(cfg.backend, y.len())?;
    let fe = build_from_embeddings(layers, &y, Some(hash), &cfg)?;
    fe.save(&args.out)?;
    eprintln!("fitted {} layers on {} points; checkpoint in {}", fe.n_layers(), fe.n_train(), args.out.display());
    Ok(())
}

fn check_source(fe: &FittedEnsemble, hash: &str) -> Result<()> {
    match &fe.model_hash {
        Some(h) if h != hash => Err(CliError::Runtime(format!("checkpoint was fitted on model {h}, inputs come from {hash}"))),
        _ => Ok(()),
    }
}

fn predict(args: &PredictArgs) -> Result<()> {
    let fe = FittedEnsemble::load(&args.checkpoint)?;
    let (layers, hash, _) = embeddings(&args.inputs)?;
    check_source(&fe, &hash)?;
    let preds = fe.predict_embeddings(&layers)?;
    let mut out = String::from("mean,var,epistemic,aleatoric\n");
    for p in &preds {
        let s = fe.uncertainty_split(p);
        out.push_str(&format!("{:?},{:?},{:?},{:?}\n", p.mean, p.variance, s.epistemic, s.aleatoric));
    }
    match &args.out {
        Some(p) => fs::write(p, out).map_err(|source| CliError::Io { path: p.clone(), source }),
        None => io::stdout().write_all(out.as_bytes()).map_err(|source| CliError::Io { path: "<stdout>".into(), source }),
    }
}

/// `(mean, var)` columns of a prediction CSV, located by header name.
fn read_predictions(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, what: String| CliError::Runtime(format!("{}:{}: {what}", path.display(), line + 1));
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty prediction file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|c| *c == name).ok_or_else(|| bad(0, format!("no '{name}' column")));
    let (im, iv) = (find("mean")?, find("var")?);
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let get = |j: usize| -> Result<f64> {
                let s = f.get(j).ok_or_else(|| bad(i, format!("expected {} fields", cols.len())))?;
                s.parse().map_err(|_| bad(i, format!("'{s}' is not a number")))
            };
            Ok((get(im)?, get(iv)?))
        })
        .collect()
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut moments = read_predictions(&args.predictions)?;
    let mut truth = dataio::read_vector(&args.truth)?;
    if let Some(dir) = &args.checkpoint {
        let s: ResponseScaling = dataio::load_checkpoint(dir)?.scaling;
        moments = moments.iter().map(|&(m, v)| (s.standardize(m), v / (s.sd * s.sd))).collect();
        truth = s.standardize_all(&truth);
    }
    if moments.iter().any(|&(_, v)| !(v > 0.0)) {
        return Err(CliError::Runtime("every predictive variance must be positive".into()));
    }
    let m = pipeline::metrics(&moments, &truth)?;
    let json = serde_json::json!({ "rmse": m.rmse, "nll": m.nll, "n": truth.len() });
    println!("{}", serde_json::to_string_pretty(&json).expect("plain JSON value"));
    Ok(())
}

fn explain(args: &ExplainArgs) -> Result<()> {
    let fe = FittedEnsemble::load(&args.checkpoint)?;
    let (layers, hash, _) = embeddings(&args.inputs)?;
    check_source(&fe, &hash)?;
    let rows = layers.first().map_or(0, Matrix::rows);
    if args.row >= rows {
        return Err(CliError::Usage(format!("--row {} is out of range for {rows} inputs", args.row)));
    }
    let query: Vec<Vec<f64>> = layers.iter().map(|e| e.row(args.row).to_vec()).collect();
    let ex = fe.explain_embeddings(&query)?;
    println!("{}", serde_json::to_string_pretty(&ex).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(())
}

fn demo(args: &DemoArgs) -> Result<()> {
    let cfg = ScurveConfig {
        seed: args.seed,
        ..Default::default()
    };
    let run = run_scurve(&cfg)?;
    let r = &run.report;
    println!("seed {}: {} train / {} test points", r.seed, r.n_train, r.n_test);
    println!("network test MSE: {:.6}", r.network_mse);
    println!("DVE test MSE:     {:.6}", r.dve_mse);
    println!("DVE test NLL:     {:.6}", r.dve_nll);
    if let Some(out) = &args.out {
        dataio::save_model(&run.model, out.join("model"))?;
        run.ensemble.save(out.join("checkpoint"))?;
        let p = out.join("report.json");
        let text = serde_json::to_string_pretty(r).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
        fs::write(&p, text).map_err(|source| CliError::Io { path: p, source })?;
    }
    Ok(())
}
