//! Command-line surface. `run` parses arguments, dispatches, and maps errors
//! to a single `error: <module>: <message>` line and an exit code.

mod config;

pub use config::RunConfig;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_jsonl, split_811, synth_generate, write_jsonl, write_labels, NormStats, Observation, Sequence, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, kalman_filter_oracle, pca_latents, LgssmParams};
use crate::forecast::{filter, filter_trajectory, rollout, rollout_with_text};
use crate::training::{fit, load_checkpoint, EpochLog};

#[derive(Parser, Debug)]
#[command(name = "lbs", version, about = "Multimodal Bayesian state space forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multimodal dataset and its labels file.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Forecast from the end of a series.
    Forecast(ForecastArgs),
    /// Rolling-origin evaluation over the test split.
    Eval(EvalArgs),
    /// Filter a series and export PCA projections of the latent path.
    ExportLatents(ExportArgs),
    /// Exact Kalman filter for a linear-Gaussian model.
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().period)]
    pub period: usize,
    #[arg(long, default_value_t = SynthConfig::default().amplitude)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.0)]
    pub slope: f64,
    #[arg(long, default_value_t = SynthConfig::default().event_rate)]
    pub event_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().event_shift)]
    pub event_shift: f64,
    #[arg(long, default_value_t = SynthConfig::default().event_lead)]
    pub event_lead: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_lo)]
    pub noise_lo: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise_hi)]
    pub noise_hi: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Ignore text: zero text weight and null summaries everywhere.
    #[arg(long)]
    pub unimodal: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct ForecastArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 7, allow_negative_numbers = true)]
    pub horizon: i64,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long)]
    pub with_text: bool,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Emit::Csv)]
    pub emit: Emit,
    /// Output file; standard output if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 96)]
    pub text_max_len: usize,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "1..7")]
    pub horizons: String,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix; writes `<report>.csv` and `<report>.json`.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OracleArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn usage(message: impl Into<String>) -> Error {
    Error::config("cli", message)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// `"1..3"`, `"1,3,7"` or mixtures such as `"1..3,7"`; sorted, deduplicated.
pub fn parse_horizons(spec: &str) -> Result<Vec<usize>> {
    let bad = || usage(format!("invalid horizons `{spec}`"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() || out[0] == 0 {
        return Err(bad());
    }
    Ok(out)
}

/// Labels file written next to a synthetic dataset: `x.jsonl` gives
/// `x.labels.csv`.
pub fn labels_path(out: &Path) -> PathBuf {
    out.with_extension("labels.csv")
}

pub fn cmd_synth(args: &SynthArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig {
        steps: args.steps,
        period: args.period,
        amplitude: args.amplitude,
        slope: args.slope,
        noise_lo: args.noise_lo,
        noise_hi: args.noise_hi,
        event_rate: args.event_rate,
        event_shift: args.event_shift,
        event_lead: args.event_lead,
        seed: args.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (obs, labels) = synth_generate(&cfg)?;
    write_jsonl(&args.out, &obs)?;
    write_labels(labels_path(&args.out), &labels)?;
    let events = labels.iter().filter(|l| l.event_fired).count();
    let boundaries = labels.windows(2).filter(|w| w[0].high_noise != w[1].high_noise).count();
    writeln!(
        stdout,
        "T={}\tevents={events}\tregime_boundaries={boundaries}\tregime_half_period={}",
        obs.len(),
        cfg.period as f64 / 2.0
    )
    .map_err(stdout_err)
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        rc.set(k.trim(), v.trim())?;
    }
    if args.unimodal {
        rc.train.unimodal = true;
    }
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    if let Some(e) = args.max_epochs {
        rc.train.max_epochs = e;
    }
    if let Some(d) = &args.data {
        rc.data = Some(d.display().to_string());
    }
    let data = rc.data.clone().ok_or_else(|| usage("no dataset: pass --data or set `data` in the config"))?;
    for (k, v) in rc.entries() {
        writeln!(stderr, "# {k} = {v}").map_err(stdout_err)?;
    }
    let obs = load_jsonl(&data)?;
    let (train, val, _) = split_811(&obs)?;
    let stats = NormStats::from_observations(train);
    let seq = Sequence::new(&obs, &stats);
    let train_seq = seq.slice(0, train.len());
    let val_seq = seq.slice(train.len(), train.len() + val.len());
    writeln!(stdout, "{}", EpochLog::TSV_HEADER).map_err(stdout_err)?;
    let mut io_err = None;
    let result = fit(&train_seq, &val_seq, &rc.train, stats, &mut |log| {
        if let Err(e) = writeln!(stdout, "{}", log.tsv()).and_then(|_| stdout.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(stdout_err(e));
    }
    let mut ck = result.checkpoint;
    ck.meta.run_config = rc.entries();
    ck.save(&args.out)?;
    writeln!(stderr, "# best epoch {} (validation loss {:.6})", result.best_epoch, ck.meta.best_val_loss).map_err(stdout_err)
}

pub fn cmd_forecast(args: &ForecastArgs, stdout: &mut dyn Write) -> Result<()> {
    if args.horizon < 1 {
        return Err(usage(format!("--horizon must be >= 1, got {}", args.horizon)));
    }
    if args.samples < 1 {
        return Err(usage("--samples must be >= 1"));
    }
    let horizon = args.horizon as usize;
    let ck = load_checkpoint(&args.ckpt)?;
    let obs = load_jsonl(&args.data)?;
    let stats = ck.meta.stats;
    let use_text = ck.meta.config.use_text();
    let seq = Sequence::new(&obs, &stats);
    let state = filter(&ck.model, &ck.registry, &seq, use_text)?;
    let result = if args.with_text {
        let last_date = obs.last().map_or("", |o: &Observation| o.date.as_str());
        rollout_with_text(
            &ck.model,
            &ck.registry,
            &state,
            horizon,
            args.samples,
            args.seed,
            &stats,
            last_date,
            args.text_max_len,
            args.temperature,
        )?
    } else {
        rollout(&ck.model, &ck.registry, &state, horizon, args.samples, args.seed, &stats)?
    };
    let emit = |w: &mut dyn Write| -> std::io::Result<()> {
        match args.emit {
            Emit::Csv => result.write_csv(w),
            Emit::Json => writeln!(w, "{}", result.to_json()),
        }
    };
    match &args.out {
        Some(p) => {
            write_with(p, |w| emit(w))?;
            if args.with_text {
                write_with(&p.with_extension("text.jsonl"), |w| result.write_text_jsonl(w))?;
            }
        }
        None => {
            emit(stdout).map_err(stdout_err)?;
            if args.with_text {
                result.write_text_jsonl(stdout).map_err(stdout_err)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let horizons = parse_horizons(&args.horizons)?;
    if args.samples < 1 {
        return Err(usage("--samples must be >= 1"));
    }
    let ck = load_checkpoint(&args.ckpt)?;
    let obs = load_jsonl(&args.data)?;
    let (train, val, _) = split_811(&obs)?;
    let stats = ck.meta.stats;
    let seq = Sequence::new(&obs, &stats);
    let raw: Vec<f64> = obs.iter().map(|o| o.value).collect();
    let report = evaluate(
        &ck.model,
        &ck.registry,
        &seq,
        &raw,
        train.len() + val.len(),
        &horizons,
        args.samples,
        args.seed,
        &stats,
        ck.meta.config.use_text(),
    )?;
    write_with(&args.report.with_extension("csv"), |w| report.write_csv(w))?;
    write_with(&args.report.with_extension("json"), |w| writeln!(w, "{}", report.to_json()))?;
    report.write_csv(stdout).map_err(stdout_err)
}

pub fn cmd_export_latents(args: &ExportArgs, stdout: &mut dyn Write) -> Result<()> {
    if args.components < 1 {
        return Err(usage("--components must be >= 1"));
    }
    let ck = load_checkpoint(&args.ckpt)?;
    let obs = load_jsonl(&args.data)?;
    let seq = Sequence::new(&obs, &ck.meta.stats);
    let states = filter_trajectory(&ck.model, &ck.registry, &seq, ck.meta.config.use_text())?;
    let pts: Vec<Vec<f64>> = states.iter().map(|s| s.x_hat.iter().map(|&v| v as f64).collect()).collect();
    let pca = pca_latents(&pts, args.components)?;
    write_with(&args.out, |w| {
        let cols: Vec<String> = (1..=args.components).map(|k| format!("c{k}")).collect();
        writeln!(w, "t,{}", cols.join(","))?;
        for (o, p) in obs.iter().zip(&pca.projections) {
            let vals: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", o.t, vals.join(","))?;
        }
        Ok(())
    })?;
    let vars: Vec<String> = pca.variances.iter().map(|v| format!("{v:.6}")).collect();
    writeln!(stdout, "rows={}\tcomponent_variances={}", obs.len(), vars.join(",")).map_err(stdout_err)
}

pub fn cmd_oracle(args: &OracleArgs, stdout: &mut dyn Write) -> Result<()> {
    let params = LgssmParams::load(&args.params)?;
    let obs = load_jsonl(&args.data)?;
    if params.obs_dim() != 1 {
        return Err(Error::config("eval", "datasets carry scalar values; the oracle needs M = 1"));
    }
    let ys: Vec<Vec<f64>> = obs.iter().map(|o| vec![o.value]).collect();
    let k = kalman_filter_oracle(&params, &ys)?;
    let n = params.state_dim();
    write_with(&args.out, |w| {
        let mut header = vec!["t".to_string(), "y".to_string()];
        header.extend((0..n).map(|i| format!("mean_{i}")));
        header.extend((0..n).map(|i| format!("var_{i}")));
        header.push("pred_mean".into());
        header.push("pred_var".into());
        writeln!(w, "{}", header.join(","))?;
        for (i, o) in obs.iter().enumerate() {
            let mut row = vec![o.t.to_string(), o.value.to_string()];
            row.extend(k.means[i].iter().map(|v| v.to_string()));
            row.extend((0..n).map(|j| k.covs[i][j][j].to_string()));
            row.push(k.pred_means[i][0].to_string());
            row.push(k.pred_covs[i][0][0].to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })?;
    writeln!(stdout, "log_likelihood\t{}", k.log_likelihood).map_err(stdout_err)
}

pub fn dispatch(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, stdout),
        Command::Train(a) => cmd_train(a, stdout, stderr),
        Command::Forecast(a) => cmd_forecast(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::ExportLatents(a) => cmd_export_latents(a, stdout),
        Command::Oracle(a) => cmd_oracle(a, stdout),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", usage(first).report_line());
            return 1;
        }
    };
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    match dispatch(&cli, &mut stdout.lock(), &mut stderr.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.report_line());
            e.exit_code()
        }
    }
}
