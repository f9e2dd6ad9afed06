//! Command-line front end: `train`, `simulate`, `project` and
//! `rebalance-demo`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use num_rational::Ratio;
use unitasks::cluster::{
    microtask_hetero_time, microtask_iteration_time, microtask_time_for_speeds,
    unitask_balanced_time, InProcessTransport, SocketTransport, Transport,
};
use unitasks::ingest::{
    write_metrics, Algorithm, DatasetSource, Preset, RunConfig, ScenarioSpec, SyntheticSpec,
    TrainerSection,
};
use unitasks::trainer::{ConvergenceTarget, ExecutionMode, IterationRecord, Trainer};
use unitasks::{Error, Rational};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "unitasks", version, about = "Elastic training with uni-tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TransportKind {
    InProcess,
    Socket,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a training job described by a TOML config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "in-process")]
        transport: TransportKind,
    },
    /// Run a preset scenario in virtual time and write metrics.
    Simulate {
        #[arg(long, default_value = "static")]
        preset: String,
        #[arg(long, default_value = "cocoa")]
        algo: String,
        /// Synthetic dataset, e.g. `n=20000,d=50,margin=1,noise=0,seed=0`.
        #[arg(long, conflicts_with = "dataset")]
        synthetic: Option<String>,
        /// Sparse text dataset file.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Emulate micro-tasks with this many tasks instead of uni-tasks.
        #[arg(long)]
        microtasks: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        max_epochs: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        chunk_bytes: Option<usize>,
        #[arg(long)]
        rebalance: bool,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Print projected iteration times of micro-tasks and uni-tasks.
    Project {
        #[arg(long = "K")]
        tasks: usize,
        /// Number of reference-speed nodes.
        #[arg(long = "N")]
        nodes: Option<usize>,
        /// Fast nodes of a two-speed cluster.
        #[arg(long, requires = "slow")]
        fast: Option<usize>,
        /// Slow nodes of a two-speed cluster.
        #[arg(long, requires = "fast")]
        slow: Option<usize>,
        /// How many times longer a slow node takes, e.g. `1.5` or `13/6`.
        #[arg(long, default_value = "1.5")]
        slow_factor: String,
        /// Comma-separated node speeds, e.g. `1,1,2/3`.
        #[arg(long)]
        speeds: Option<String>,
        #[arg(long, default_value = "16")]
        work: String,
    },
    /// Train on a heterogeneous preset with rebalancing enabled and write the
    /// per-iteration runtimes and chunk counts of every worker.
    RebalanceDemo {
        #[arg(long, default_value = "hetero-12x4")]
        preset: String,
        #[arg(long, default_value = "n=20000,d=50,noise=0.05")]
        synthetic: String,
        #[arg(long, default_value_t = 30)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 16 << 10)]
        chunk_bytes: usize,
        #[arg(long, default_value = "rebalance.csv")]
        out: PathBuf,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::InvalidScenario(_)
            | Error::InvalidHyperParams(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses `3`, `1.5`, `-0.25` or `13/6` into an exact rational.
pub fn parse_ratio(text: &str) -> Result<Rational, String> {
    let text = text.trim();
    let bad = || format!("not a rational number: {text:?}");
    if let Some((n, d)) = text.split_once('/') {
        let n: i64 = n.trim().parse().map_err(|_| bad())?;
        let d: i64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if frac.len() > 15 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let negative = int.starts_with('-');
    let int_part: i64 = match int.trim_start_matches(['-', '+']) {
        "" if !frac.is_empty() => 0,
        digits => digits.parse().map_err(|_| bad())?,
    };
    let den = 10i64.pow(frac.len() as u32);
    let frac_part: i64 = if frac.is_empty() {
        0
    } else {
        frac.parse().map_err(|_| bad())?
    };
    let magnitude = Ratio::new(int_part * den + frac_part, den);
    Ok(if negative { -magnitude } else { magnitude })
}

/// Exact decimal when the expansion terminates, otherwise twelve places.
pub fn format_ratio(r: &Rational) -> String {
    let mut den = *r.denom();
    while den % 2 == 0 {
        den /= 2;
    }
    while den % 5 == 0 {
        den /= 5;
    }
    let value = *r.numer() as f64 / *r.denom() as f64;
    if den == 1 {
        format!("{value}")
    } else {
        format!("{value:.12}")
    }
}

fn resolve_against(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn transport(kind: TransportKind) -> Box<dyn Transport<f64>> {
    match kind {
        TransportKind::InProcess => Box::new(InProcessTransport::new()),
        TransportKind::Socket => Box::new(SocketTransport::new()),
    }
}

/// Runs a resolved config end to end and writes its metrics.
pub fn execute(
    config: &RunConfig,
    transport_kind: TransportKind,
) -> Result<Vec<IterationRecord>, Failure> {
    let trainer_config = config.trainer_config()?;
    let scenario = config.scenario.resolve()?;
    let dataset = config.dataset.load()?;
    let mut trainer = Trainer::new(
        trainer_config,
        scenario,
        &dataset,
        transport(transport_kind),
    )?;
    let records = trainer.run()?;
    write_metrics(&records, &config.output, config)?;
    Ok(records)
}

fn summarize(out: &mut dyn Write, records: &[IterationRecord], path: &Path) -> std::io::Result<()> {
    match records.last() {
        Some(r) => writeln!(
            out,
            "{} iterations, {:.3} epochs, metric {:.6e}, virtual time {:.6}; metrics in {}",
            records.len(),
            r.epoch_progress,
            r.metric,
            r.virtual_time,
            path.display()
        ),
        None => writeln!(out, "no iterations run; metrics in {}", path.display()),
    }
}

fn project(
    out: &mut dyn Write,
    tasks: usize,
    nodes: Option<usize>,
    two_speed: Option<(usize, usize)>,
    slow_factor: &str,
    speeds: Option<&str>,
    work: &str,
) -> Result<(), Failure> {
    if tasks == 0 {
        return Err(Failure::config("--K must be positive"));
    }
    let work = parse_ratio(work).map_err(Failure::config)?;
    if work <= Ratio::from_integer(0) {
        return Err(Failure::config("--work must be positive"));
    }
    let slow_factor = parse_ratio(slow_factor).map_err(Failure::config)?;
    let io = |e: std::io::Error| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    };
    let one = Ratio::from_integer(1);
    writeln!(
        out,
        "{:<11} {:>4} {:>20} {:>16} {:>10}",
        "model", "K", "nodes", "time", "exact"
    )
    .map_err(io)?;
    let mut row = |model: &str, k: String, cluster: String, t: Rational| {
        writeln!(
            out,
            "{:<11} {:>4} {:>20} {:>16} {:>10}",
            model,
            k,
            cluster,
            format_ratio(&t),
            t.to_string()
        )
        .map_err(io)
    };
    let mut any = false;
    if let Some(n) = nodes {
        if n == 0 {
            return Err(Failure::config("--N must be positive"));
        }
        any = true;
        row(
            "micro-task",
            tasks.to_string(),
            n.to_string(),
            microtask_iteration_time(tasks, n, work),
        )?;
        row(
            "uni-task",
            "-".into(),
            n.to_string(),
            unitask_balanced_time(&vec![one; n], work),
        )?;
    }
    if let Some((fast, slow)) = two_speed {
        if fast + slow == 0 {
            return Err(Failure::config("need at least one node"));
        }
        if slow_factor < one {
            return Err(Failure::config("--slow-factor must be at least 1"));
        }
        any = true;
        let cluster = format!("{fast}+{slow}@{slow_factor}x");
        row(
            "micro-task",
            tasks.to_string(),
            cluster.clone(),
            microtask_hetero_time(tasks, fast, slow, slow_factor, work),
        )?;
        let mut speeds = vec![one; fast];
        speeds.extend(std::iter::repeat_n(one / slow_factor, slow));
        row(
            "uni-task",
            "-".into(),
            cluster,
            unitask_balanced_time(&speeds, work),
        )?;
    }
    if let Some(text) = speeds {
        let speeds: Vec<Rational> = text
            .split(',')
            .map(parse_ratio)
            .collect::<Result<_, _>>()
            .map_err(Failure::config)?;
        if speeds.is_empty() || speeds.iter().any(|s| *s <= Ratio::from_integer(0)) {
            return Err(Failure::config("speeds must be positive"));
        }
        any = true;
        let cluster = format!("{} custom", speeds.len());
        row(
            "micro-task",
            tasks.to_string(),
            cluster.clone(),
            microtask_time_for_speeds(tasks, &speeds, work),
        )?;
        row(
            "uni-task",
            "-".into(),
            cluster,
            unitask_balanced_time(&speeds, work),
        )?;
    }
    if !any {
        return Err(Failure::config("give --N, --fast/--slow or --speeds"));
    }
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    };
    match cli.command {
        Command::Train { config, transport } => {
            let mut cfg = RunConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            if let DatasetSource::Path(p) = &cfg.dataset {
                cfg.dataset = DatasetSource::Path(resolve_against(base, p));
            }
            cfg.output = resolve_against(base, &cfg.output);
            let records = execute(&cfg, transport)?;
            summarize(out, &records, &cfg.output).map_err(io)
        }
        Command::Simulate {
            preset,
            algo,
            synthetic,
            dataset,
            microtasks,
            lambda,
            max_epochs,
            seed,
            chunk_bytes,
            rebalance,
            out: path,
        } => {
            let algorithm = match algo.as_str() {
                "cocoa" => Algorithm::Cocoa,
                "local-sgd" => Algorithm::LocalSgd,
                other => return Err(Failure::config(format!("unknown algorithm {other:?}"))),
            };
            let preset = Preset::from_name(&preset)?;
            let dataset = match (synthetic, dataset) {
                (Some(s), None) => DatasetSource::Synthetic(SyntheticSpec::parse(&s)?),
                (None, Some(p)) => DatasetSource::Path(p),
                (None, None) => DatasetSource::Synthetic(SyntheticSpec::new(20000, 50)),
                (Some(_), Some(_)) => {
                    return Err(Failure::config("give either --synthetic or --dataset"))
                }
            };
            let cfg = RunConfig {
                algorithm,
                dataset,
                chunk_capacity_bytes: chunk_bytes,
                trainer: TrainerSection {
                    mode: microtasks.map(|tasks| ExecutionMode::MicroTasks { tasks }),
                    lambda,
                    max_epochs,
                    seed,
                    rebalance: Some(rebalance),
                    ..TrainerSection::default()
                },
                scenario: ScenarioSpec::Preset(preset),
                output: path,
            };
            let records = execute(&cfg, TransportKind::InProcess)?;
            summarize(out, &records, &cfg.output).map_err(io)
        }
        Command::Project {
            tasks,
            nodes,
            fast,
            slow,
            slow_factor,
            speeds,
            work,
        } => project(
            out,
            tasks,
            nodes,
            fast.zip(slow),
            &slow_factor,
            speeds.as_deref(),
            &work,
        ),
        Command::RebalanceDemo {
            preset,
            synthetic,
            iterations,
            window,
            chunk_bytes,
            out: path,
        } => {
            let preset = Preset::from_name(&preset)?;
            let cfg = RunConfig {
                algorithm: Algorithm::Cocoa,
                dataset: DatasetSource::Synthetic(SyntheticSpec::parse(&synthetic)?),
                chunk_capacity_bytes: Some(chunk_bytes),
                trainer: TrainerSection {
                    target: Some(ConvergenceTarget::DualityGap(0.0)),
                    max_epochs: Some(iterations as f64),
                    rebalance: Some(true),
                    history_window: Some(window),
                    ..TrainerSection::default()
                },
                scenario: ScenarioSpec::Preset(preset),
                output: path,
            };
            let records = execute(&cfg, TransportKind::InProcess)?;
            summarize(out, &records, &cfg.output).map_err(io)
        }
    }
}

/// Entry point shared by the binary and the tests. Returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}
