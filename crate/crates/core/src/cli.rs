//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or model errors.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{Dataset, EventSequence};
use crate::encoder::{EncoderConfig, TemporalMode};
use crate::error::{Error, Result};
use crate::experiments::{evaluate, future_split_experiment, noise_sweep, translation_sweep, EvalReport};
use crate::model::{loss_and_grad, ModelParams};
use crate::numerics::{grad_check, CoordinateSample, GradientReport, Tensor};
use crate::simulator::{make_synthetic_dataset, oracle_loglik, ExpHawkesParams, SyntheticRecipe};
use crate::tpp_head::{IntegrationMethod, IntegratorSpec, LossWeights};
use crate::trainer::{fingerprint, load_checkpoint, save_checkpoint, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "rothp", version, about = "Rotary temporal Hawkes process toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a length-windowed multivariate Hawkes dataset.
    Simulate(SimulateArgs),
    /// Train a model and write a checkpoint plus a history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Evaluate frozen checkpoints on translated copies of a dataset.
    SweepTranslation(SweepTranslationArgs),
    /// Train on clean and noise-perturbed data and compare on clean test data.
    SweepNoise(SweepNoiseArgs),
    /// Train on sequence prefixes and evaluate on the suffixes.
    FutureSplitEval(FutureSplitArgs),
    /// Compare analytic gradients of a small model with finite differences.
    GradCheck(GradCheckArgs),
    /// Closed-form Hawkes log-likelihood of every sequence in a dataset.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON file with `mu`, `a` and `beta_decay`; the default five-type process otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    num_sequences: usize,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Trapezoid,
    MonteCarlo,
}

#[derive(Args, Debug, Clone)]
struct IntegArgs {
    /// Integration rule for the compensator; defaults to the config's.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    integ_seed: Option<u64>,
}

impl IntegArgs {
    fn apply(&self, mut spec: IntegratorSpec) -> IntegratorSpec {
        if let Some(m) = self.method {
            spec.method = match m {
                MethodArg::Trapezoid => IntegrationMethod::Trapezoid,
                MethodArg::MonteCarlo => IntegrationMethod::MonteCarlo,
            };
        }
        if let Some(s) = self.samples {
            spec.samples_per_interval = s;
        }
        if let Some(s) = self.integ_seed {
            spec.seed = s;
        }
        spec
    }
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON file with training config fields; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[command(flatten)]
    integ: IntegArgs,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut c: TrainConfig = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(lr) = self.learning_rate {
            c.learning_rate = lr;
        }
        c.integrator = self.integ.apply(c.integrator);
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Rotary,
    Absolute,
}

impl From<ModeArg> for TemporalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rotary => TemporalMode::Rotary,
            ModeArg::Absolute => TemporalMode::Absolute,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV path; `<out>.history.csv` by default.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Record real epoch durations in the history (otherwise written as 0).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    integ: IntegArgs,
    /// Report path; standard output by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepTranslationArgs {
    #[arg(long)]
    rotary: Option<PathBuf>,
    #[arg(long)]
    absolute: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated, strictly increasing, non-negative shifts.
    #[arg(long, value_delimiter = ',', default_value = "0,0.4,0.8,1,2,5,10")]
    sigmas: Vec<f64>,
    #[command(flatten)]
    integ: IntegArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepNoiseArgs {
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    /// Comma-separated noise variances.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "rotary,absolute")]
    modes: Vec<ModeArg>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FutureSplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    /// Keep raw timestamps instead of shifting each part to start at 0.
    #[arg(long)]
    no_rebase: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "rotary,absolute")]
    modes: Vec<ModeArg>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value = "rotary")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Exit with status 2 when the worst relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// JSON file with `mu`, `a` and `beta_decay`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    mode: TemporalMode,
    integrator: &'a IntegratorSpec,
    config_fingerprint: String,
}

#[derive(Serialize)]
struct SplitReportFile {
    ratio: f64,
    rebase: bool,
    skipped_sequences: usize,
    config_fingerprint: String,
    results: Vec<ModeReport>,
}

#[derive(Serialize)]
struct ModeReport {
    mode: TemporalMode,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Serialize)]
struct GradCheckFile {
    #[serde(flatten)]
    report: GradientReport,
    mode: TemporalMode,
    epsilon: f64,
    threshold: f64,
    passed: bool,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => {
            let mut recipe = SyntheticRecipe::default();
            if let Some(p) = &a.params {
                recipe.params = serde_json::from_str::<ExpHawkesParams>(&fs::read_to_string(p)?)?;
                recipe.params.validate()?;
            }
            if let Some(h) = a.horizon {
                recipe.horizon = h;
            }
            if let Some(m) = a.min_len {
                recipe.min_len = m;
            }
            if let Some(m) = a.max_len {
                recipe.max_len = m;
            }
            make_synthetic_dataset(a.num_sequences, &recipe, a.seed)?.save(&a.out)
        }
        Command::Train(a) => {
            let mut config = a.cfg.load()?;
            if let Some(m) = a.mode {
                config.encoder.mode = m.into();
            }
            let data = Dataset::load(&a.data)?;
            config.encoder.num_types = data.num_types();
            let (params, history) = train(&data, &config)?;
            save_checkpoint(&params, &a.out)?;
            let history_path = a.history.unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".history.csv");
                p.into()
            });
            let mut w = BufWriter::new(File::create(history_path)?);
            history.write_csv(&mut w, a.wall_clock)?;
            w.flush()?;
            Ok(())
        }
        Command::Eval(a) => {
            let params = load_checkpoint(&a.checkpoint)?;
            let data = Dataset::load(&a.data)?;
            let integ = a.integ.apply(IntegratorSpec::default());
            let report = evaluate(&params, &data, &integ)?;
            let file = ReportFile {
                report: &report,
                mode: params.config.mode,
                integrator: &integ,
                config_fingerprint: fingerprint(&params.config)?,
            };
            write_json(&file, a.out.as_deref())
        }
        Command::SweepTranslation(a) => {
            let mut models = Vec::new();
            for (path, mode) in [(&a.rotary, TemporalMode::Rotary), (&a.absolute, TemporalMode::Absolute)] {
                if let Some(p) = path {
                    let m = load_checkpoint(p)?;
                    if m.config.mode != mode {
                        return Err(Error::Checkpoint(format!(
                            "{} holds a model in {} mode",
                            p.display(),
                            m.config.mode.name()
                        )));
                    }
                    models.push(m);
                }
            }
            if models.is_empty() {
                return Err(Error::Parameter("give --rotary and/or --absolute checkpoints".into()));
            }
            let data = Dataset::load(&a.data)?;
            let refs: Vec<&ModelParams> = models.iter().collect();
            let integ = a.integ.apply(IntegratorSpec::default());
            let table = translation_sweep(&refs, &data, &a.sigmas, &integ)?;
            let mut w = output(a.out.as_deref())?;
            table.write_csv(&mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::SweepNoise(a) => {
            let train_set = Dataset::load(&a.train_data)?;
            let test_set = Dataset::load(&a.test_data)?;
            let mut config = a.cfg.load()?;
            config.encoder.num_types = train_set.num_types();
            let modes: Vec<TemporalMode> = a.modes.iter().map(|&m| m.into()).collect();
            let table = noise_sweep(&train_set, &test_set, &a.epsilons, &config, &modes, a.noise_seed)?;
            let mut w = output(a.out.as_deref())?;
            table.write_csv(&mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::FutureSplitEval(a) => {
            let data = Dataset::load(&a.data)?;
            let mut config = a.cfg.load()?;
            config.encoder.num_types = data.num_types();
            let modes: Vec<TemporalMode> = a.modes.iter().map(|&m| m.into()).collect();
            let (results, skipped) = future_split_experiment(&data, a.ratio, !a.no_rebase, &config, &modes)?;
            let file = SplitReportFile {
                ratio: a.ratio,
                rebase: !a.no_rebase,
                skipped_sequences: skipped,
                config_fingerprint: fingerprint(&config)?,
                results: results
                    .into_iter()
                    .map(|(mode, report)| ModeReport { mode, report })
                    .collect(),
            };
            write_json(&file, a.out.as_deref())
        }
        Command::GradCheck(a) => {
            let report = small_grad_check(a.mode.into(), a.seed, a.epsilon)?;
            let passed = report.max_relative_error < a.threshold;
            let file = GradCheckFile {
                report,
                mode: a.mode.into(),
                epsilon: a.epsilon,
                threshold: a.threshold,
                passed,
            };
            write_json(&file, a.out.as_deref())?;
            if passed {
                Ok(())
            } else {
                Err(Error::GradientMismatch {
                    coordinate: file.report.worst_parameter,
                    relative_error: file.report.max_relative_error,
                })
            }
        }
        Command::Oracle(a) => {
            let params: ExpHawkesParams = serde_json::from_str(&fs::read_to_string(&a.params)?)?;
            let data = Dataset::load(&a.data)?;
            let mut w = output(a.out.as_deref())?;
            writeln!(w, "seq_id,events,log_likelihood")?;
            for (id, s) in data.ids.iter().zip(&data.sequences) {
                let ll = oracle_loglik(&params, s)?;
                writeln!(w, "{id},{},{ll:.8e}", s.len())?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

/// Encoder settings of the gradient check model: one layer, `d_model = 8`, two types.
pub fn grad_check_config(mode: TemporalMode) -> EncoderConfig {
    EncoderConfig {
        num_types: 2,
        d_model: 8,
        num_heads: 2,
        head_dim: 4,
        d_v: 4,
        d_ff: 16,
        num_layers: 1,
        mode,
        time_scale: 1.0,
    }
}

/// Full-coordinate gradient check of the composite loss on a fixed
/// five-event sequence.
pub fn small_grad_check(mode: TemporalMode, seed: u64, epsilon: f64) -> Result<GradientReport> {
    let params = ModelParams::init(&grad_check_config(mode), seed)?;
    let seq = EventSequence::new(vec![0.3, 0.9, 1.4, 2.6, 3.1], vec![0, 1, 1, 0, 1])?;
    let integ = IntegratorSpec::trapezoid(10);
    let weights = LossWeights::default();
    let objective = |p: &ModelParams| {
        let (loss, grads) = loss_and_grad(&seq, p, &integ, 0, weights)?;
        Ok((loss.total, grads.into_iter().flat_map(Tensor::into_data).collect()))
    };
    grad_check(objective, &params, epsilon, &CoordinateSample::All)
}
