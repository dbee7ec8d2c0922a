//! Commands behind the `gppvae` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use gppvae::baselines::{eval_mse, method_name, predict, tune_lambda, PredictionSet};
use gppvae::checkpoint::{self, Meta};
use gppvae::config::{KernelKind, LambdaCriterion, LossMode, ModelKind, Precision, RunConfig};
use gppvae::datagen::{generate_glyphs, split, Dataset, Manifest, Split, SplitSpec};
use gppvae::error::Error;
use gppvae::ndtensor::{io, Tensor};
use gppvae::nnet::ArchKind;
use gppvae::scalar::Scalar;
use gppvae::training::{prediction_mse, schedule, train, EpochRecord, Model, TrainData, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;

/// Failure of a command, with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn incompatible(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INCOMPATIBLE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::NotPositiveDefinite(_) => EXIT_NUMERIC,
            Error::Incompatible(_) => EXIT_INCOMPATIBLE,
            Error::Invalid(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "gppvae", version, about = "Gaussian process prior VAE experiments")]
pub struct Cli {
    /// Worker threads (default: GPPVAE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the rotated-glyph dataset and its split.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(TrainArgs),
    /// Predict the images of a split with a trained checkpoint.
    Predict(PredictArgs),
    /// Summarise prediction directories into a CSV table.
    Eval(EvalArgs),
    /// Write the learned view and object covariances as CSV.
    InspectKernel(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 400)]
    pub objects: usize,
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.25)]
    pub drop_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub held_out_view: usize,
    /// Seed of the split (defaults to the generation seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of vae, gppvae-joint, gppvae-dis, cvae.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory. The log goes to `<out>.log.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Start the GP phases from this VAE checkpoint.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub loss_mode: Option<String>,
    #[arg(long)]
    pub vae_epochs: Option<usize>,
    #[arg(long)]
    pub gp_epochs: Option<usize>,
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub object_dim: Option<usize>,
    /// Stop (resumably) after this many epochs in this invocation.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Print nothing but errors.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split to predict: test or val.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Encoder samples averaged for GP predictions (overrides the config).
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction directories written by `predict`.
    #[arg(long, required = true, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Thread count from the flag, then `GPPVAE_THREADS`.
pub fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("GPPVAE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::usage(format!("GPPVAE_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        // Fails only if a pool already exists, as in repeated in-process calls.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::InspectKernel(a) => inspect_kernel(&a),
    }
}

/// SHA-256 of a file.
pub fn hash_file(path: &Path) -> CliResult<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// SHA-256 over the names and contents of the files in `dir`, in name order.
pub fn hash_dir(dir: &Path) -> CliResult<String> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()?;
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(&n))?);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<Manifest> {
    if a.objects < 1 || a.views < 2 || a.size < 16 {
        return Err(CliError::usage("need --objects ≥ 1, --views ≥ 2 and --size ≥ 16"));
    }
    let ds = generate_glyphs(a.objects, a.views, a.size, a.seed)?;
    let spec = SplitSpec {
        val_fraction: a.val_fraction,
        drop_fraction: a.drop_fraction,
        held_out_view: a.held_out_view,
        seed: a.split_seed.unwrap_or(a.seed),
    };
    let sp = split(&ds, &spec)?;
    ds.save(&a.out, Some((&spec, &sp)))?;
    let (_, manifest) = Dataset::load(&a.out)?;
    println!(
        "wrote {} samples ({} train, {} val, {} test) to {}; manifest sha256 {}",
        manifest.num_samples,
        sp.train.len(),
        sp.val.len(),
        sp.test.len(),
        a.out.display(),
        hash_file(&a.out.join("manifest.json"))?
    );
    Ok(manifest)
}

fn parse_kebab<T: serde::de::DeserializeOwned>(flag: &str, v: &str, choices: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| CliError::usage(format!("invalid --{flag} '{v}'; expected one of {{{choices}}}")))
}

/// The run configuration from `--config` with flag overrides applied.
pub fn resolve_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::usage(format!("bad config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = &a.model {
        c.model = m.parse::<ModelKind>().map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Some(k) = &a.kernel {
        c.kernel = parse_kebab::<KernelKind>("kernel", k, "periodic, full-rank")?;
    }
    if let Some(v) = &a.arch {
        c.arch = parse_kebab::<ArchKind>("arch", v, "conv, mlp")?;
    }
    if let Some(v) = &a.precision {
        c.precision = parse_kebab::<Precision>("precision", v, "f32, f64")?;
    }
    if let Some(v) = &a.loss_mode {
        c.loss_mode = parse_kebab::<LossMode>("loss-mode", v, "si-lambda, eq8")?;
    }
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { c.$f = v; })*};
    }
    set!(seed, period, vae_epochs, gp_epochs, joint_epochs, batch_size, latent_dim, object_dim);
    if a.lambda.is_some() {
        c.lambda = a.lambda;
    }
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    if a.out.is_some() {
        c.out = a.out.clone();
    }
    if a.init_from.is_some() {
        c.init_from = a.init_from.clone();
    }
    c.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(c)
}

/// Dataset plus its stored split.
pub fn load_dataset(dir: &Path) -> CliResult<(Dataset, Split)> {
    let (ds, manifest) = Dataset::load(dir)?;
    let sp = manifest
        .split
        .ok_or_else(|| CliError::incompatible(format!("dataset {} has no split", dir.display())))?;
    Ok((ds, sp))
}

/// Path of the per-epoch log of a checkpoint directory.
pub fn log_path(out: &Path) -> PathBuf {
    sibling_file(out, "log.csv")
}

/// Path of the λ-selection table of a checkpoint directory.
pub fn lambda_log_path(out: &Path) -> PathBuf {
    sibling_file(out, "lambda.csv")
}

fn sibling_file(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    out.with_file_name(name)
}

const LOG_HEADER: [&str; 9] = [
    "epoch", "phase", "recon", "gp_term", "reg_term", "total", "sigma_y2", "wall_ms", "val_mse",
];

fn log_row(r: &EpochRecord) -> Vec<String> {
    vec![
        r.epoch.to_string(),
        r.phase.name().to_string(),
        r.loss.recon.to_string(),
        r.loss.gp_term.to_string(),
        r.loss.reg_term.to_string(),
        r.loss.total.to_string(),
        r.loss.sigma_y2.to_string(),
        r.wall_ms.to_string(),
        r.val_mse.map_or(String::new(), |v| v.to_string()),
    ]
}

/// Keeps the log rows up to `epoch` (rows written after the last checkpoint
/// are dropped on resume) and returns a writer appending to it.
fn open_log(path: &Path, keep_until: Option<usize>) -> CliResult<csv::Writer<fs::File>> {
    let mut kept: Vec<csv::StringRecord> = Vec::new();
    if let Some(last) = keep_until {
        if path.exists() {
            let mut r = csv::Reader::from_path(path)?;
            for rec in r.records() {
                let rec = rec?;
                let epoch: usize = rec.get(0).and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
                if epoch <= last {
                    kept.push(rec);
                }
            }
        }
    }
    let mut w = csv::Writer::from_writer(fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?);
    w.write_record(LOG_HEADER)?;
    for rec in &kept {
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(w)
}

/// Summary of a finished `train` command.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub epochs: usize,
    pub lambda: f64,
    pub finished: bool,
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<TrainOutcome> {
    if a.max_epochs == Some(0) {
        return Err(CliError::usage("--max-epochs must be at least 1"));
    }
    let (cfg, resumed) = if a.resume {
        let out = a.out.as_ref().ok_or_else(|| CliError::usage("--resume needs --out"))?;
        let meta = checkpoint::read_meta(out)?;
        let mut cfg = meta.config.clone();
        if let Some(d) = &a.dataset {
            cfg.dataset = Some(d.clone());
        }
        if a.model.is_some() || a.config.is_some() {
            return Err(CliError::usage("--resume takes its settings from the checkpoint; drop --model/--config"));
        }
        cfg.out = Some(out.clone());
        (cfg, Some(meta))
    } else {
        (resolve_config(a)?, None)
    };
    let out = cfg.out.clone().ok_or_else(|| CliError::usage("missing --out"))?;
    let data_dir = cfg.dataset.clone().ok_or_else(|| CliError::usage("missing --dataset"))?;
    let (ds, sp) = load_dataset(&data_dir)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &ds, &sp, &out, resumed.is_some(), a),
        Precision::F64 => train_typed::<f64>(&cfg, &ds, &sp, &out, resumed.is_some(), a),
    }
}

fn check_dataset(meta_arch_size: usize, latent: usize, cfg: &RunConfig, ds: &Dataset) -> CliResult<()> {
    if meta_arch_size != ds.size {
        return Err(CliError::incompatible(format!(
            "checkpoint expects {meta_arch_size}px images, dataset has {}px",
            ds.size
        )));
    }
    if latent != cfg.latent_dim {
        return Err(CliError::incompatible(format!(
            "checkpoint latent size {latent} differs from configured {}",
            cfg.latent_dim
        )));
    }
    Ok(())
}

fn initial_state<T: Scalar>(cfg: &RunConfig, ds: &Dataset, sp: &Split, out: &Path, quiet: bool) -> CliResult<TrainState<T>> {
    let arch = cfg.architecture(ds.size);
    let mut model = Model::<T>::new(cfg, arch.clone(), ds.num_objects, &ds.angles)?;
    if let Some(init) = &cfg.init_from {
        if !cfg.model.has_gp() {
            return Err(CliError::usage("--init-from applies to gppvae-joint and gppvae-dis"));
        }
        let ck = checkpoint::load::<T>(init)?;
        if ck.meta.config.model != ModelKind::Vae {
            return Err(CliError::incompatible(format!(
                "--init-from needs a vae checkpoint, got {}",
                ck.meta.config.model
            )));
        }
        if ck.meta.arch != arch {
            return Err(CliError::incompatible("--init-from checkpoint has a different architecture"));
        }
        model.encoder = ck.state.model.encoder;
        model.decoder = ck.state.model.decoder;
        model.log_sigma_y2 = ck.state.model.log_sigma_y2;
        let mut state = TrainState::new(model, schedule(cfg, true), ck.state.lambda);
        state.sigma_y2 = ck.state.sigma_y2;
        return Ok(state);
    }
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => select_lambda_logged::<T>(cfg, ds, sp, out, quiet)?,
    };
    Ok(TrainState::new(model, schedule(cfg, false), lambda))
}

fn select_lambda_logged<T: Scalar>(cfg: &RunConfig, ds: &Dataset, sp: &Split, out: &Path, quiet: bool) -> CliResult<f64> {
    let sel = tune_lambda::<T>(cfg, ds, sp, |l, r| {
        if !quiet && r.epoch % 10 == 0 {
            eprintln!("λ={l}: epoch {} total {:.6}", r.epoch, r.loss.total);
        }
    })?;
    let path = lambda_log_path(out);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(&path)?;
    let score_name = match cfg.lambda_criterion {
        LambdaCriterion::Elbo => "val_elbo",
        LambdaCriterion::PredictionMse => "neg_val_mse",
    };
    w.write_record(["lambda", score_name, "status"])?;
    for r in &sel.results {
        let (score, status) = match r.score {
            Some(s) => (s.to_string(), "ok"),
            None => (String::new(), "failed"),
        };
        w.write_record([r.lambda.to_string(), score, status.to_string()])?;
    }
    w.flush()?;
    if !quiet {
        eprintln!("selected λ = {}", sel.best);
    }
    Ok(sel.best)
}

fn train_typed<T: Scalar>(cfg: &RunConfig, ds: &Dataset, sp: &Split, out: &Path, resume: bool, a: &TrainArgs) -> CliResult<TrainOutcome> {
    let quiet = a.quiet;
    let mut budget = a.max_epochs;
    let mut state = if resume {
        let ck = checkpoint::load::<T>(out)?;
        check_dataset(ck.meta.arch.size, ck.meta.arch.latent_dim, cfg, ds)?;
        ck.state
    } else {
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        initial_state::<T>(cfg, ds, sp, out, quiet)?
    };
    if let Some(gp) = &state.model.gp {
        if gp.x.count() != ds.num_objects || gp.angles != ds.angles {
            return Err(CliError::incompatible("checkpoint GP does not match the dataset objects or views"));
        }
    }
    let data = TrainData::<T>::from_split(ds, sp, cfg.model == ModelKind::Cvae)?;
    let mut log = open_log(&log_path(out), resume.then_some(state.global_epoch))?;
    if !resume {
        checkpoint::save(out, cfg, &state)?;
    }
    let result = train(cfg, &data, &mut state, |s, r| {
        log.write_record(log_row(r)).map_err(|e| Error::Invalid(e.to_string()))?;
        log.flush().map_err(|e| Error::Invalid(e.to_string()))?;
        checkpoint::save(out, cfg, s)?;
        if !quiet {
            let val = r.val_mse.map_or(String::new(), |v| format!(" val_mse {v:.6}"));
            eprintln!("[{}] epoch {} total {:.6}{val}", r.phase.name(), r.epoch, r.loss.total);
        }
        if let Some(b) = budget.as_mut() {
            *b = b.saturating_sub(1);
            if *b == 0 {
                return Err(Error::Interrupted(r.epoch));
            }
        }
        Ok(())
    });
    let finished = !matches!(result, Err(Error::Interrupted(_)));
    if let Err(e) = result.or_else(|e| if finished { Err(e) } else { Ok(()) }) {
        return Err(match e {
            Error::NonFinite(_) | Error::NotPositiveDefinite(_) => CliError {
                code: EXIT_NUMERIC,
                message: format!("{e}; last good checkpoint kept at {}", out.display()),
            },
            other => other.into(),
        });
    }
    if finished {
        // Records the finished cursor and any restored best model.
        checkpoint::save(out, cfg, &state)?;
    }
    let hash = hash_dir(out)?;
    if !quiet {
        let status = if finished { "finished" } else { "paused; continue with --resume" };
        println!("checkpoint {} sha256 {hash} ({status})", out.display());
    }
    Ok(TrainOutcome {
        checkpoint: out.to_path_buf(),
        hash,
        epochs: state.global_epoch,
        lambda: state.lambda,
        finished,
    })
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PredictionInfo {
    pub method: String,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub split: String,
    pub n: usize,
    pub skipped: usize,
}

pub const PREDICTION_INFO: &str = "prediction.json";

pub fn cmd_predict(a: &PredictArgs) -> CliResult<PredictionInfo> {
    let meta = checkpoint::read_meta(&a.checkpoint)?;
    let (ds, sp) = load_dataset(&a.dataset)?;
    check_dataset(meta.arch.size, meta.arch.latent_dim, &meta.config, &ds)?;
    let targets = match a.split.as_str() {
        "test" => sp.test.clone(),
        "val" => sp.val.clone(),
        other => return Err(CliError::usage(format!("invalid --split '{other}'; expected one of {{test, val}}"))),
    };
    match meta.dtype.as_str() {
        "f64" => predict_typed::<f64>(a, &meta, &ds, &sp, &targets),
        _ => predict_typed::<f32>(a, &meta, &ds, &sp, &targets),
    }
}

fn predict_typed<T: Scalar>(a: &PredictArgs, meta: &Meta, ds: &Dataset, sp: &Split, targets: &[usize]) -> CliResult<PredictionInfo> {
    let ck = checkpoint::load::<T>(&a.checkpoint)?;
    let model = &ck.state.model;
    if let Some(gp) = &model.gp {
        if gp.x.count() != ds.num_objects || gp.angles.len() != ds.num_views() {
            return Err(CliError::incompatible(format!(
                "checkpoint GP covers {} objects and {} views, dataset has {} and {}",
                gp.x.count(),
                gp.angles.len(),
                ds.num_objects,
                ds.num_views()
            )));
        }
    }
    let cfg = &meta.config;
    let samples = a.samples.unwrap_or(cfg.predict_samples);
    let set = predict(cfg.model, model, ds, &sp.train, targets, samples, cfg.seed)?;
    write_predictions(&a.out, &set)?;
    let info = PredictionInfo {
        method: method_name(cfg.model).to_string(),
        checkpoint: a.checkpoint.clone(),
        dataset: a.dataset.clone(),
        split: a.split.clone(),
        n: set.len(),
        skipped: set.skipped.len(),
    };
    fs::write(a.out.join(PREDICTION_INFO), serde_json::to_string_pretty(&info)? + "\n")?;
    if !set.is_empty() {
        let s = eval_mse(&set.per_sample_mse)?;
        println!("{}: mse {:.6} ± {:.6} over {} samples", info.method, s.mean, s.std_error, s.n);
    }
    if !set.skipped.is_empty() {
        eprintln!("{} samples skipped (see skipped.csv)", set.skipped.len());
    }
    Ok(info)
}

fn write_predictions<T: Scalar>(dir: &Path, set: &PredictionSet<T>) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    io::write(dir.join("predictions.gpt"), &set.predicted)?;
    io::write(dir.join("truth.gpt"), &set.truth)?;
    let mut w = csv::Writer::from_path(dir.join("per_sample_mse.csv"))?;
    w.write_record(["index", "object", "view", "mse"])?;
    for i in 0..set.len() {
        w.write_record([
            set.indices[i].to_string(),
            set.objects[i].to_string(),
            set.views[i].to_string(),
            set.per_sample_mse[i].to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("skipped.csv"))?;
    w.write_record(["index", "object", "reason"])?;
    for s in &set.skipped {
        w.write_record([s.index.to_string(), s.object.to_string(), s.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub mean_mse: f64,
    pub std_error: f64,
    pub n: usize,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(a.predictions.len());
    for dir in &a.predictions {
        let pred: Tensor<f64> = io::read(dir.join("predictions.gpt"))?;
        let truth: Tensor<f64> = io::read(dir.join("truth.gpt"))?;
        let per = prediction_mse(&pred, &truth).map_err(|e| CliError::incompatible(e.to_string()))?;
        let s = eval_mse(&per)?;
        let method = match fs::read_to_string(dir.join(PREDICTION_INFO)) {
            Ok(text) => serde_json::from_str::<PredictionInfo>(&text)?.method,
            Err(_) => dir.file_name().map_or("unknown".into(), |n| n.to_string_lossy().into_owned()),
        };
        rows.push(SummaryRow {
            method,
            mean_mse: s.mean,
            std_error: s.std_error,
            n: s.n,
        });
    }
    if let Some(parent) = a.out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["method", "mean_mse", "std_error", "n"])?;
    for r in &rows {
        w.write_record([r.method.clone(), r.mean_mse.to_string(), r.std_error.to_string(), r.n.to_string()])?;
        println!("{:<14} {:.6} ± {:.6} (n={})", r.method, r.mean_mse, r.std_error, r.n);
    }
    w.flush()?;
    Ok(rows)
}

fn write_matrix(path: &Path, m: &Tensor<f64>) -> CliResult<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn inspect_kernel(a: &InspectArgs) -> CliResult<()> {
    let ck = checkpoint::load::<f64>(&a.checkpoint)?;
    let gp = ck
        .state
        .model
        .gp
        .as_ref()
        .ok_or_else(|| CliError::incompatible(format!("{} has no GP prior", a.checkpoint.display())))?;
    fs::create_dir_all(&a.out)?;
    write_matrix(&a.out.join("view_cov.csv"), &gp.view_cov()?)?;
    write_matrix(&a.out.join("object_cov.csv"), &gp.object_cov())?;
    println!(
        "wrote {}x{} view and {}x{} object covariances to {} (alpha {:.6})",
        gp.num_views(),
        gp.num_views(),
        gp.x.count(),
        gp.x.count(),
        a.out.display(),
        gp.alpha()
    );
    Ok(())
}
