//! `dsno` command-line front end.
//!
//! Every subcommand reads one JSON experiment config, applies the optional
//! `--seed`, `--steps` and `--out` overrides, writes its tables under the
//! output directory and appends its effective settings to `summary.tsv`.

pub mod config;

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dsno_core::dsno::{forward_batch, Checkpoint};
use dsno_core::spectrum::trajectory_spectrum_report;
use dsno_core::train::{eval_trajectory_rmse, sliced_wasserstein, write_loss_tsv, StepRecord, Trainer};
use dsno_core::trajectories::{generate_dataset, record_noise};
use dsno_core::TrajectoryDataset;

pub use config::{parse_config, parse_config_str, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] dsno_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dsno", version, about = "Distill a probability-flow ODE into a one-call temporal operator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed override for this subcommand's random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Override for training.steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Override for the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve training and held-out trajectories and write the dataset files.
    GenData(Common),
    /// Train the operator on the training dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode trajectory endpoints for fresh noise.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long)]
        n: usize,
    },
    /// Held-out trajectory RMSE and sliced Wasserstein against oracle data.
    Eval(Common),
    /// Power spectrum of solver trajectories.
    Spectrum(Common),
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dsno: {e}");
            e.exit_code()
        }
    }
}

fn load(common: &Common, seed_target: impl FnOnce(&mut ExperimentConfig) -> &mut u64) -> Result<ExperimentConfig, CliError> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        *seed_target(&mut cfg) = seed;
    }
    if let Some(steps) = common.steps {
        cfg.training.steps = steps;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(c) => gen_data(&load(&c, |cfg| &mut cfg.dataset.seed)?),
        Command::Train { common, resume } => train(&load(&common, |cfg| &mut cfg.training.seed)?, resume.as_deref()),
        Command::Sample { common, n } => {
            if n == 0 {
                return Err(CliError::Usage("--n must be positive".into()));
            }
            sample(&load(&common, |cfg| &mut cfg.eval.seed)?, n)
        }
        Command::Eval(c) => eval(&load(&c, |cfg| &mut cfg.eval.seed)?),
        Command::Spectrum(c) => spectrum(&load(&c, |cfg| &mut cfg.spectrum.seed)?),
    }
}

fn output_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cfg.output)?;
    Ok(&cfg.output)
}

/// Appends `command\tkey\tvalue` rows: every effective setting, then results.
fn append_summary(cfg: &ExperimentConfig, command: &str, results: &[(&str, String)]) -> Result<(), CliError> {
    let path = cfg.output.join("summary.tsv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "command\tkey\tvalue")?;
    }
    for (k, v) in cfg.flattened() {
        writeln!(f, "{command}\t{k}\t{v}")?;
    }
    for (k, v) in results {
        writeln!(f, "{command}\tresult.{k}\t{v}")?;
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let gm = cfg.mixture()?;
    let grid = cfg.time_grid()?;
    let d = &cfg.dataset;
    for (path, size, seed) in [(&d.path, d.size, d.seed), (&d.heldout_path, d.heldout_size, d.heldout_seed)] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        eprintln!("generating {size} trajectories -> {}", path.display());
        generate_dataset(&gm, &cfg.schedule, &grid, size, seed, d.solver, d.substeps, path)?;
    }
    output_dir(cfg)?;
    append_summary(
        cfg,
        "gen-data",
        &[("train_records", d.size.to_string()), ("heldout_records", d.heldout_size.to_string())],
    )
}

fn load_dataset(path: &Path, cfg: &ExperimentConfig) -> Result<TrajectoryDataset, CliError> {
    let data = TrajectoryDataset::load(path)?;
    let grid = cfg.time_grid()?;
    if data.grid().times() != grid.times() || data.header.schedule != cfg.schedule {
        return Err(CliError::Config(format!(
            "dataset {} was generated with a different grid or schedule; rerun gen-data",
            path.display()
        )));
    }
    Ok(data)
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join("model.ckpt")
}

fn train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let data = load_dataset(&cfg.dataset.path, cfg)?;
    let out = output_dir(cfg)?.to_path_buf();
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.params.config != cfg.model_config() {
                return Err(CliError::Config("resume checkpoint does not match the model section".into()));
            }
            Trainer::resume(&data, cfg.training.clone(), ck)?
        }
        None => Trainer::new(&data, cfg.training.clone(), cfg.model_config())?,
    };
    let every = cfg.training.checkpoint_every;
    let log_every = (cfg.training.steps / 20).max(1);
    let log: Vec<StepRecord> = trainer.run(|t, rec| {
        if rec.step % log_every == 0 {
            eprintln!("step {:>7}  lr {:.3e}  loss {:.6e}", rec.step, rec.lr, rec.loss);
        }
        if every > 0 && rec.step % every == 0 {
            t.checkpoint().save(&out.join(format!("checkpoint-{}.ckpt", rec.step)))?;
        }
        Ok(())
    })?;
    write_loss_tsv(&out.join("loss.tsv"), &log)?;
    let mut ck = trainer.checkpoint();
    ck.metadata = serde_json::to_value(cfg).expect("config serializes");
    ck.save(&checkpoint_path(cfg))?;
    let final_loss = log.last().map_or(f64::NAN, |r| r.loss);
    append_summary(
        cfg,
        "train",
        &[
            ("final_step", trainer.step_count().to_string()),
            ("final_loss", format!("{final_loss:.9e}")),
            ("parameters", cfg.model_config().param_count().to_string()),
        ],
    )
}

fn load_model(cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let path = checkpoint_path(cfg);
    if !path.exists() {
        return Err(CliError::Config(format!("no trained model at {}; run train first", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.params.config != cfg.model_config() {
        return Err(CliError::Config(format!("{} does not match the model section", path.display())));
    }
    Ok(ck)
}

/// Endpoints (last grid time) decoded for `n` seeded initial conditions.
fn endpoints(cfg: &ExperimentConfig, ck: &Checkpoint, n: usize) -> Result<Vec<f64>, CliError> {
    let grid = cfg.time_grid()?;
    let d = ck.params.config.dim;
    let xs: Vec<f64> = (0..n as u64).flat_map(|j| record_noise(cfg.eval.seed, j, d)).collect();
    let pred = forward_batch(&ck.params, &xs, &grid)?;
    let m = grid.len();
    Ok(pred.chunks_exact(m * d).flat_map(|r| r[(m - 1) * d..].to_vec()).collect())
}

fn sample(cfg: &ExperimentConfig, n: usize) -> Result<(), CliError> {
    let ck = load_model(cfg)?;
    let out = output_dir(cfg)?;
    let d = ck.params.config.dim;
    let samples = endpoints(cfg, &ck, n)?;
    let path = out.join("samples.tsv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    writeln!(f, "{}", header.join("\t"))?;
    for row in samples.chunks_exact(d) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(f, "{}", cells.join("\t"))?;
    }
    f.flush()?;
    append_summary(cfg, "sample", &[("samples", n.to_string())])
}

fn eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ck = load_model(cfg)?;
    let held = load_dataset(&cfg.dataset.heldout_path, cfg)?;
    let out = output_dir(cfg)?;
    let report = eval_trajectory_rmse(&ck.params, &held)?;
    report.write_tsv(&out.join("eval.tsv"))?;
    let gm = cfg.mixture()?;
    let samples = endpoints(cfg, &ck, cfg.eval.samples)?;
    let data = gm.sample_data(cfg.eval.samples, cfg.eval.seed.wrapping_add(1));
    let sw = sliced_wasserstein(&samples, &data, gm.dim(), cfg.eval.projections, cfg.eval.seed)?;
    eprintln!("pooled RMSE {:.6e}  sliced Wasserstein {sw:.6e}", report.pooled);
    append_summary(
        cfg,
        "eval",
        &[
            ("pooled_rmse", format!("{:.9e}", report.pooled)),
            ("endpoint_rmse", format!("{:.9e}", report.per_time.last().copied().unwrap_or(f64::NAN))),
            ("sliced_wasserstein", format!("{sw:.9e}")),
        ],
    )
}

fn spectrum(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let s = &cfg.spectrum;
    let report = trajectory_spectrum_report(
        &cfg.mixture()?,
        &cfg.schedule,
        s.trajectories,
        s.samples,
        s.seed,
        s.solver,
        s.substeps,
    )?;
    let out = output_dir(cfg)?;
    report.write_tsv(&out.join("spectrum.tsv"))?;
    eprintln!("non-DC energy in j <= {}: {:.6}", report.band_limit, report.band_fraction);
    append_summary(
        cfg,
        "spectrum",
        &[
            ("band_fraction_non_dc", format!("{:.9}", report.band_fraction)),
            ("band_fraction_with_dc", format!("{:.9}", report.band_fraction_with_dc)),
        ],
    )
}
