use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncmht::experiment::{
    simulate_replica, write_outputs, ConfigError, ExperimentResults, Mode, RunConfig, RunError, TrackerFactory,
};
use ncmht::sim::{read_stream, write_stream, Preset, StreamError, Variant};

#[derive(Parser)]
#[command(name = "ncmht", version, about = "Road-network constrained multiple hypothesis tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Monte Carlo replicas of a scenario and write metric files.
    Run(RunArgs),
    /// Write the simulated scan stream of one replica as JSON lines.
    Simulate(SimulateArgs),
    /// Run the trackers over a recorded scan stream.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario preset: 1, 2, 3a or 3b.
    #[arg(long, conflicts_with = "config")]
    scenario: Option<String>,
    /// Run configuration file (for example a previous manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trackers to run: nc, freespace or both.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sensor count (preset scenarios only).
    #[arg(long, requires = "scenario")]
    sensors: Option<usize>,
    /// Fraction of empty scans reported (preset scenarios only).
    #[arg(long, requires = "scenario")]
    empty_fraction: Option<f64>,
    /// Override any configuration entry, e.g. `nc.p_d=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Monte Carlo replicas.
    #[arg(long)]
    mc: Option<usize>,
    /// Output directory.
    #[arg(long, env = "NCMHT_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Replica index.
    #[arg(long, default_value_t = 0)]
    replica: usize,
    /// Output file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Recorded stream.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, env = "NCMHT_OUT", default_value = "out")]
    out: PathBuf,
}

/// Configuration problems exit with 2, runtime failures with 1.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<StreamError> for Failure {
    fn from(e: StreamError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match (&args.scenario, &args.config) {
        (Some(s), _) => {
            let preset: Preset = s.parse().map_err(|e: ncmht::sim::SimError| Failure::Config(e.to_string()))?;
            RunConfig::preset(
                preset,
                Variant {
                    sensors: args.sensors,
                    empty_scan_fraction: args.empty_fraction,
                },
            )?
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        (None, None) => return Err(Failure::Config("one of --scenario or --config is required".into())),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&args.config)?;
    if let Some(mc) = args.mc {
        cfg.mc_runs = mc;
    }
    cfg.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(Failure::Config("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.to_string()))?;
    let results = pool.install(|| ncmht::experiment::run_experiment(&cfg))?;
    for r in results.trackers() {
        let s = &r.summary;
        eprintln!(
            "{} {}: runs {} gospa_sum {:.1} nle_sum {:.1} missed_sum {:.0} false_sum {:.0} track_length {:.2}",
            cfg.label,
            r.kind.tag(),
            s.runs,
            s.gospa.sum,
            s.localization.sum,
            s.missed.sum,
            s.false_targets.sum,
            s.track_length
        );
    }
    let paths = write_outputs(&results, &args.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    report(&paths);
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let cfg = resolve(&args.config)?;
    let net = cfg.validate()?;
    let steps = simulate_replica(&cfg, &net, args.replica);
    let io = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", args.output.display()));
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let file = File::create(&args.output).map_err(io)?;
    write_stream(BufWriter::new(file), cfg.scenario.duration, &cfg.label, &steps).map_err(io)?;
    println!("{}", args.output.display());
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&args.config)?;
    cfg.mc_runs = 1;
    let factory = TrackerFactory::new(&cfg)?;
    let stream = read_input(&args.input)?;
    let replica = factory.run_replica(&stream.steps, stream.has_truth)?;
    let results = ExperimentResults::from_runs(cfg, vec![replica]);
    let paths = write_outputs(&results, &args.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    report(&paths);
    Ok(())
}

fn read_input(path: &Path) -> Result<ncmht::sim::Stream, Failure> {
    let file = File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    read_stream(BufReader::new(file)).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Simulate(a) => simulate(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
