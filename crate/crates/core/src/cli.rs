//! Command-line front end: configuration, subcommands, and artifact writing.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{apply_manifest, class_count, load_csv, make_split, CsvOptions, Split, SplitManifest, SplitSpec, Task};
use crate::error::{DkpError, Result};
use crate::inference::{complexity_probe, elbo_batch, predict, ComplexityReport, ElboOptions, PropagationMode};
use crate::kernels::{KernelFamily, KernelSpec, ReluScale};
use crate::linalg::Matrix;
use crate::model::{InitOptions, Likelihood, Model, ModelSpec};
use crate::prior::{grid_1d, sample_prior, sample_spectra, LayerNoise, SpectrumSource};
use crate::seeding::derive_seed;
use crate::training::{train, Schedule, TrainConfig, TrainerState, TrainingCheckpoint};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "dkp", version, about = "Deep inverse Wishart process models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train on a dataset split and write checkpoint, metrics, split manifest and summary.
    Train,
    /// Evaluate a saved checkpoint on the split recorded next to it.
    Evaluate,
    /// Emit Gram and kernel matrices and function draws from a prior rollout.
    SamplePrior,
    /// Emit eigenvalues of Wishart, inverse Wishart, or residual Wishart draws.
    EigenHist,
    /// Time ELBO gradients over batch and inducing sizes.
    ComplexityProbe,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::SamplePrior => "sample-prior",
            Command::EigenHist => "eigen-hist",
            Command::ComplexityProbe => "complexity-probe",
        }
    }
}

/// Flags that override configuration file keys.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct Flags {
    /// TOML file with flat keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Target column, negative counts from the end.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub target_col: Option<i64>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    #[arg(long, global = true)]
    pub bandwidth: Option<f64>,
    #[arg(long, global = true)]
    pub inducing: Option<usize>,
    #[arg(long, global = true)]
    pub delta_init: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub samples_train: Option<usize>,
    #[arg(long, global = true)]
    pub samples_eval: Option<usize>,
    #[arg(long, global = true)]
    pub nngp_limit: bool,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Any other configuration key, as `key=value` in TOML syntax.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset: Option<PathBuf>,
    pub target_col: i64,
    pub delimiter: String,
    pub header: bool,
    pub task: Task,
    pub split_index: usize,
    pub split_count: usize,
    pub test_fraction: f64,

    pub layers: usize,
    pub kernel: String,
    pub bandwidth: f64,
    pub relu_scale: String,
    pub inducing: usize,
    pub delta_init: Option<f64>,
    pub nngp_limit: bool,

    pub steps: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub batch: Option<usize>,
    pub samples_train: Option<usize>,
    pub samples_eval: usize,
    pub checkpoint_every: usize,
    pub resume: bool,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,

    pub prior_points: usize,
    pub prior_lo: f64,
    pub prior_hi: f64,
    pub prior_noise: String,
    pub prior_delta: f64,
    pub prior_width: usize,
    pub prior_functions: usize,

    pub eigen_dist: String,
    pub eigen_size: usize,
    pub eigen_draws: usize,
    pub eigen_n: Option<usize>,
    pub eigen_nu: Option<f64>,
    pub eigen_alpha: f64,

    pub probe_inducing: usize,
    pub probe_batch: usize,
    pub probe_batch_grid: Vec<usize>,
    pub probe_inducing_grid: Vec<usize>,
    pub probe_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: None,
            target_col: -1,
            delimiter: ",".into(),
            header: false,
            task: Task::Regression,
            split_index: 0,
            split_count: 20,
            test_fraction: 0.1,
            layers: 3,
            kernel: "arccos_relu".into(),
            bandwidth: 1.0,
            relu_scale: "doubled".into(),
            inducing: 100,
            delta_init: None,
            nngp_limit: false,
            steps: 8000,
            lr: 1e-2,
            lr_final: 1e-3,
            batch: None,
            samples_train: None,
            samples_eval: 100,
            checkpoint_every: 0,
            resume: false,
            checkpoint: None,
            manifest: None,
            prior_points: 100,
            prior_lo: -3.0,
            prior_hi: 3.0,
            prior_noise: "inverse_wishart".into(),
            prior_delta: 1.0,
            prior_width: 1,
            prior_functions: 5,
            eigen_dist: "wishart".into(),
            eigen_size: 200,
            eigen_draws: 50,
            eigen_n: None,
            eigen_nu: None,
            eigen_alpha: 1.0,
            probe_inducing: 16,
            probe_batch: 64,
            probe_batch_grid: vec![256, 512, 1024, 2048, 4096],
            probe_inducing_grid: vec![32, 64, 128, 256],
            probe_reps: 3,
        }
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| DkpError::Config(format!("override '{s}' is not of the form key=value")))?;
    let k = k.trim().to_string();
    let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(v.trim().to_string()),
    };
    Ok((k, value))
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

impl RunConfig {
    /// Merges the configuration file (if any) with command-line flags and validates the result.
    pub fn resolve(flags: &Flags) -> Result<RunConfig> {
        let mut table = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| DkpError::Io {
                    path: path.clone(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| DkpError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let mut set = |k: &str, v: toml::Value| {
            table.insert(k.to_string(), v);
        };
        if let Some(v) = flags.seed {
            set("seed", toml::Value::Integer(v as i64));
        }
        if let Some(v) = &flags.dataset {
            set("dataset", path_value(v));
        }
        if let Some(v) = flags.target_col {
            set("target_col", toml::Value::Integer(v));
        }
        if let Some(v) = flags.layers {
            set("layers", toml::Value::Integer(v as i64));
        }
        if let Some(v) = &flags.kernel {
            set("kernel", toml::Value::String(v.clone()));
        }
        if let Some(v) = flags.bandwidth {
            set("bandwidth", toml::Value::Float(v));
        }
        if let Some(v) = flags.inducing {
            set("inducing", toml::Value::Integer(v as i64));
        }
        if let Some(v) = flags.delta_init {
            set("delta_init", toml::Value::Float(v));
        }
        if let Some(v) = flags.steps {
            set("steps", toml::Value::Integer(v as i64));
        }
        if let Some(v) = flags.batch {
            set("batch", toml::Value::Integer(v as i64));
        }
        if let Some(v) = flags.samples_train {
            set("samples_train", toml::Value::Integer(v as i64));
        }
        if let Some(v) = flags.samples_eval {
            set("samples_eval", toml::Value::Integer(v as i64));
        }
        if flags.nngp_limit {
            set("nngp_limit", toml::Value::Boolean(true));
        }
        if let Some(v) = &flags.out_dir {
            set("out_dir", path_value(v));
        }
        for o in &flags.overrides {
            let (k, v) = parse_override(o)?;
            set(&k, v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DkpError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel_spec()?.validate()?;
        if self.delimiter.len() != 1 {
            return Err(DkpError::Config("delimiter must be a single byte".into()));
        }
        if self.layers == 0 || self.inducing == 0 {
            return Err(DkpError::Config("layers and inducing must be positive".into()));
        }
        if self.samples_eval == 0 || self.prior_points == 0 || self.eigen_size == 0 {
            return Err(DkpError::Config("sample and size counts must be positive".into()));
        }
        if let Some(d) = self.delta_init {
            if !(d > 0.0) {
                return Err(DkpError::Config("delta_init must be positive".into()));
            }
        }
        self.schedule().validate()
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let family: KernelFamily = self.kernel.parse()?;
        Ok(KernelSpec {
            family,
            bandwidth: self.bandwidth,
            relu_scale: self.relu_scale.parse::<ReluScale>()?,
        })
    }

    pub fn schedule(&self) -> Schedule {
        let switch = self.steps / 2 + 1;
        let mut segments = vec![(1, self.lr)];
        if switch <= self.steps && self.lr_final != self.lr {
            segments.push((switch, self.lr_final));
        }
        Schedule {
            total_steps: self.steps,
            segments,
        }
    }

    /// Hex SHA-256 of the canonical JSON form of this configuration, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            target_col: self.target_col,
            delimiter: self.delimiter.as_bytes()[0],
            has_header: self.header,
        }
    }

    fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| DkpError::Config("a dataset path is required (--dataset)".into()))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }

    fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out_dir.join("split.json"))
    }
}

/// Header placed at the start of every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl ArtifactMeta {
    pub fn new(command: Command, cfg: &RunConfig) -> Self {
        Self {
            command: command.name().into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: VERSION.into(),
        }
    }

    fn text_header(&self) -> String {
        format!(
            "# command: {}\n# config_hash: {}\n# seed: {}\n# version: {}\n",
            self.command, self.config_hash, self.seed, self.version
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Wrapped<T> {
    meta: ArtifactMeta,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    checkpoint: TrainingCheckpoint,
}

#[derive(Serialize, Deserialize)]
struct ManifestBody {
    manifest: SplitManifest,
}

#[derive(Serialize, Deserialize)]
struct SummaryBody {
    summary: EvalSummary,
}

#[derive(Serialize, Deserialize)]
struct ProbeBody {
    report: ComplexityReport,
}

/// Final evaluation numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub samples: usize,
    /// Mean test predictive log-likelihood per point, in original target units for regression.
    pub test_log_lik: f64,
    pub test_accuracy: Option<f64>,
    /// Root mean squared error of the predictive mean, original units (regression).
    pub test_rmse: Option<f64>,
    pub train_elbo: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DkpError + '_ {
    move |source| DkpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, meta: &ArtifactMeta, body: T) -> Result<()> {
    let w = Wrapped {
        meta: meta.clone(),
        body,
    };
    let text = serde_json::to_string_pretty(&w).map_err(|e| DkpError::Config(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Wrapped<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DkpError::Parse {
        line: e.line(),
        detail: format!("{}: {e}", path.display()),
    })
}

/// Plain numeric text: `#` header lines, then one row per line.
pub fn matrix_text(meta: &ArtifactMeta, note: &str, m: &Matrix) -> String {
    let mut s = meta.text_header();
    let _ = writeln!(s, "# {note}");
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Reads a matrix written by [`matrix_text`], skipping comment lines.
pub fn parse_matrix_text(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| DkpError::Parse {
                line: i + 1,
                detail: e.to_string(),
            })?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|_| DkpError::Parse {
        line: 0,
        detail: "ragged matrix".into(),
    })
}

/// Process exit code for an error.
pub fn exit_code(e: &DkpError) -> i32 {
    match e {
        DkpError::Config(_) | DkpError::Shape { .. } | DkpError::Domain { .. } | DkpError::UnsupportedDof { .. } => 2,
        DkpError::Io { .. } | DkpError::Parse { .. } => 4,
        _ => 3,
    }
}

/// Runs one subcommand with a resolved configuration, writing artifacts under `out_dir`.
pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Train => cmd_train(cfg).map(|s| print_summary(&s)),
        Command::Evaluate => cmd_evaluate(cfg).map(|s| print_summary(&s)),
        Command::SamplePrior => cmd_sample_prior(cfg),
        Command::EigenHist => cmd_eigen_hist(cfg),
        Command::ComplexityProbe => cmd_complexity_probe(cfg).map(|r| {
            println!(
                "batch exponent {:.3}, inducing exponent {:.3}, memory worst ratio {:.3}",
                r.batch_exponent, r.inducing_exponent, r.memory_worst_ratio
            );
        }),
    }
}

fn print_summary(s: &EvalSummary) {
    println!("{}", serde_json::to_string(s).expect("summary serializes"));
}

fn build_split(cfg: &RunConfig) -> Result<Split> {
    let ds = load_csv(cfg.dataset_path()?, &cfg.csv_options())?;
    let spec = SplitSpec {
        index: cfg.split_index,
        count: cfg.split_count,
        test_fraction: cfg.test_fraction,
        seed: cfg.seed,
    };
    make_split(&ds, &spec, cfg.task)
}

fn model_spec(cfg: &RunConfig, split: &Split) -> Result<ModelSpec> {
    let (output_dim, likelihood) = match cfg.task {
        Task::Regression => (1, Likelihood::Gaussian),
        Task::Classification => {
            let labels: Vec<f64> = match &split.train_y {
                crate::model::Targets::Classes(c) => c.iter().map(|&v| v as f64).collect(),
                crate::model::Targets::Regression(_) => unreachable!("classification split"),
            };
            (class_count(&labels).max(2), Likelihood::Categorical)
        }
    };
    Ok(ModelSpec::new(
        cfg.layers,
        cfg.inducing,
        split.train_x.cols(),
        output_dim,
        cfg.kernel_spec()?,
        likelihood,
    )
    .with_nngp_limit(cfg.nngp_limit))
}

/// Test predictive log-likelihood, accuracy, and training-set ELBO.
pub fn evaluate_split(model: &Model, split: &Split, samples: usize, seed: u64) -> Result<EvalSummary> {
    let pred = predict(model, &split.test_x, Some(&split.test_y), samples, derive_seed(&[seed, 0xE7A1]))?;
    let st = &split.manifest.standardization;
    let (test_log_lik, test_rmse) = match split.manifest.task {
        Task::Regression => {
            let rmse = match &split.test_y {
                crate::model::Targets::Regression(y) => {
                    let n = y.rows().max(1) as f64;
                    let se: f64 = (0..y.rows()).map(|i| (y[(i, 0)] - pred.mean[(i, 0)]).powi(2)).sum();
                    Some((se / n).sqrt() * st.target_std)
                }
                _ => None,
            };
            (st.destandardize_log_lik(pred.mean_log_lik()), rmse)
        }
        Task::Classification => (pred.mean_log_lik(), None),
    };
    let elbo = elbo_batch(
        model,
        &split.train_x,
        &split.train_y,
        &ElboOptions {
            dataset_size: split.train_x.rows(),
            n_samples: samples,
            seed: derive_seed(&[seed, 0xE7A2]),
            mode: PropagationMode::PerPoint,
            with_grad: false,
        },
    )?;
    Ok(EvalSummary {
        n_train: split.train_x.rows(),
        n_test: split.test_x.rows(),
        samples,
        test_log_lik,
        test_accuracy: pred.accuracy,
        test_rmse,
        train_elbo: elbo.report.total,
    })
}

/// Trains a model and writes `checkpoint.json`, `metrics.jsonl`, `split.json` and `summary.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<EvalSummary> {
    let meta = ArtifactMeta::new(Command::Train, cfg);
    let split = build_split(cfg)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(
        &out.join("split.json"),
        &meta,
        ManifestBody {
            manifest: split.manifest.clone(),
        },
    )?;
    let ck_path = out.join("checkpoint.json");
    let metrics_path = out.join("metrics.jsonl");
    let (mut model, state) = if cfg.resume && ck_path.exists() {
        let ck: Wrapped<CheckpointBody> = read_json(&ck_path)?;
        let c = ck.body.checkpoint;
        (Model::from_checkpoint(&c.model)?, Some(c.trainer))
    } else {
        let spec = model_spec(cfg, &split)?;
        let init = InitOptions {
            delta_init: cfg.delta_init,
            seed: derive_seed(&[cfg.seed, 0x1417]),
        };
        (Model::init(spec, &split.train_x, &split.train_y, init)?, None)
    };
    let mut metrics = if state.is_some() {
        fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(io_err(&metrics_path))?
    } else {
        let mut f = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        writeln!(f, "{}", serde_json::json!({ "meta": meta })).map_err(io_err(&metrics_path))?;
        f
    };
    let tcfg = TrainConfig {
        batch_size: cfg.batch,
        n_samples: cfg.samples_train,
        ..TrainConfig::new(cfg.schedule(), cfg.seed)
    };
    let save = |model: &Model, st: &TrainerState| -> Result<()> {
        write_json(
            &ck_path,
            &meta,
            CheckpointBody {
                checkpoint: TrainingCheckpoint {
                    model: model.to_checkpoint(),
                    trainer: st.clone(),
                },
            },
        )
    };
    let outcome = train(
        &mut model,
        &split.train_x,
        &split.train_y,
        &tcfg,
        state,
        cfg.checkpoint_every,
        |rec| {
            let line = serde_json::to_string(rec).map_err(|e| DkpError::Config(e.to_string()))?;
            writeln!(metrics, "{line}").map_err(io_err(&metrics_path))
        },
        save,
    )?;
    save(&model, &outcome.state)?;
    let summary = evaluate_split(&model, &split, cfg.samples_eval, cfg.seed)?;
    write_json(
        &out.join("summary.json"),
        &meta,
        SummaryBody {
            summary: summary.clone(),
        },
    )?;
    Ok(summary)
}

/// Evaluates a checkpoint on its recorded split and writes `evaluation.json`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalSummary> {
    let meta = ArtifactMeta::new(Command::Evaluate, cfg);
    let ck: Wrapped<CheckpointBody> = read_json(&cfg.checkpoint_path())?;
    let model = Model::from_checkpoint(&ck.body.checkpoint.model)?;
    let manifest: Wrapped<ManifestBody> = read_json(&cfg.manifest_path())?;
    let ds = load_csv(cfg.dataset_path()?, &cfg.csv_options())?;
    let split = apply_manifest(&ds, &manifest.body.manifest)?;
    if split.train_x.cols() != model.spec.input_dim {
        return Err(DkpError::Config(format!(
            "checkpoint expects {} features, dataset has {}",
            model.spec.input_dim,
            split.train_x.cols()
        )));
    }
    let summary = evaluate_split(&model, &split, cfg.samples_eval, ck.meta.seed)?;
    write_json(
        &cfg.out_dir.join("evaluation.json"),
        &meta,
        SummaryBody {
            summary: summary.clone(),
        },
    )?;
    Ok(summary)
}

/// Writes `inputs.txt`, `gram_{l}.txt`, `kernel_{l}.txt` and `functions.txt`.
pub fn cmd_sample_prior(cfg: &RunConfig) -> Result<()> {
    let meta = ArtifactMeta::new(Command::SamplePrior, cfg);
    let x = grid_1d(cfg.prior_points, cfg.prior_lo, cfg.prior_hi);
    let noise = match cfg.prior_noise.as_str() {
        "inverse_wishart" | "invwishart" => LayerNoise::InverseWishart {
            deltas: vec![cfg.prior_delta; cfg.layers],
        },
        "wishart" => LayerNoise::Wishart {
            widths: vec![cfg.prior_width; cfg.layers],
        },
        other => {
            return Err(DkpError::Config(format!(
                "unknown prior_noise '{other}'; valid values: inverse_wishart, wishart"
            )))
        }
    };
    let r = sample_prior(&x, &cfg.kernel_spec()?, &noise, cfg.prior_functions, cfg.seed)?;
    let out = &cfg.out_dir;
    write_file(&out.join("inputs.txt"), &matrix_text(&meta, "inputs, one row per point", &x))?;
    for (l, (g, k)) in r.grams.iter().zip(&r.kernels).enumerate() {
        write_file(&out.join(format!("gram_{l}.txt")), &matrix_text(&meta, &format!("G_{l}"), g))?;
        write_file(&out.join(format!("kernel_{l}.txt")), &matrix_text(&meta, &format!("K(G_{l})"), k))?;
    }
    write_file(
        &out.join("functions.txt"),
        &matrix_text(&meta, "function draws from N(0, K(G_L)), one column per draw", &r.functions),
    )
}

/// Writes `eigenvalues.txt` with one column per draw.
pub fn cmd_eigen_hist(cfg: &RunConfig) -> Result<()> {
    let meta = ArtifactMeta::new(Command::EigenHist, cfg);
    let p = cfg.eigen_size;
    let n = cfg.eigen_n.unwrap_or(p);
    let source = match cfg.eigen_dist.as_str() {
        "wishart" => SpectrumSource::Wishart { n },
        "invwishart" | "inverse_wishart" => SpectrumSource::InverseWishart {
            nu: cfg.eigen_nu.unwrap_or(2.0 * p as f64 + 2.0),
        },
        "resw" => SpectrumSource::ResWishart {
            n,
            alpha: cfg.eigen_alpha,
        },
        other => {
            return Err(DkpError::Config(format!(
                "unknown eigen_dist '{other}'; valid values: wishart, invwishart, resw"
            )))
        }
    };
    let spectra = sample_spectra(&source, p, cfg.eigen_draws, cfg.seed)?;
    let m = Matrix::from_fn(p, spectra.len(), |i, d| spectra[d][i]);
    let note = format!(
        "{} eigenvalues, ascending, one column per draw",
        serde_json::to_string(&source).expect("source serializes")
    );
    write_file(&cfg.out_dir.join("eigenvalues.txt"), &matrix_text(&meta, &note, &m))
}

/// Writes `complexity.json`.
pub fn cmd_complexity_probe(cfg: &RunConfig) -> Result<ComplexityReport> {
    let meta = ArtifactMeta::new(Command::ComplexityProbe, cfg);
    let report = complexity_probe(
        cfg.probe_inducing,
        &cfg.probe_batch_grid,
        cfg.probe_batch,
        &cfg.probe_inducing_grid,
        cfg.probe_reps.max(1),
        cfg.seed,
    )?;
    write_json(
        &cfg.out_dir.join("complexity.json"),
        &meta,
        ProbeBody { report: report.clone() },
    )?;
    Ok(report)
}

/// Loads the model stored in a `checkpoint.json` artifact.
pub fn load_model(path: &Path) -> Result<Model> {
    let w: Wrapped<CheckpointBody> = read_json(path)?;
    Model::from_checkpoint(&w.body.checkpoint.model)
}

/// Reads the summary body of a `summary.json` or `evaluation.json` artifact.
pub fn read_summary(path: &Path) -> Result<(ArtifactMeta, EvalSummary)> {
    let w: Wrapped<SummaryBody> = read_json(path)?;
    Ok((w.meta, w.body.summary))
}
