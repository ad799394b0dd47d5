use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capguard::featdiag::GroupingSpec;
use capguard::pipeline::{Pipeline, PipelineConfig, SelectOn};
use capguard::vehiclesim::DegradationState;

#[derive(Parser)]
#[command(name = "capguard", version, about = "Calibrated lateral deviation bounds for degraded maneuvers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; unset fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Simulation threads for gen-data; defaults to all cores.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[arg(long, global = true, value_name = "F")]
    alpha: Option<f64>,
    /// none | curvature:K | dummy:N,L
    #[arg(long, global = true, value_parser = parse_grouping)]
    grouping: Option<GroupingSpec>,
    #[arg(long, global = true, value_parser = parse_select_on)]
    select_on: Option<SelectOn>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate road segments.
    GenRoads,
    /// Simulate every scenario into the labelled dataset.
    GenData,
    /// Feature relevance and heteroscedasticity diagnostics.
    Diagnose,
    /// Train one quantile network per grid point.
    Train,
    /// Conformal offsets for every trained candidate.
    Calibrate,
    /// Coverage and interval length reports.
    Evaluate,
    /// Pick the candidate by coverage tolerance and interval length.
    Select,
    /// Accept or reject candidate lane changes.
    Gate(GateArgs),
    /// Markdown summary, histograms and the gate table.
    Report,
    /// All stages in order.
    Run,
    /// Print the effective config as JSON.
    Config,
}

#[derive(Args)]
struct GateArgs {
    /// Comma-separated maximum lateral accelerations, m/s².
    #[arg(long, value_delimiter = ',')]
    accels: Option<Vec<f64>>,
    /// Road segment index; default is a straight lane.
    #[arg(long)]
    segment: Option<usize>,
    #[arg(long, value_name = "KMH")]
    speed: Option<f64>,
    /// +1 left, -1 right.
    #[arg(long, allow_hyphen_values = true)]
    direction: Option<i8>,
    /// Uniform remaining fraction of every actuator limit.
    #[arg(long, value_name = "F")]
    degradation: Option<f64>,
}

fn parse_grouping(s: &str) -> Result<GroupingSpec, String> {
    s.parse().map_err(|e: capguard::Error| e.to_string())
}

fn parse_select_on(s: &str) -> Result<SelectOn, String> {
    s.parse().map_err(|e: capguard::Error| e.to_string())
}

fn effective_config(cli: &Cli) -> capguard::Result<PipelineConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(a) = c.alpha {
        cfg.alpha = a;
    }
    if let Some(g) = c.grouping {
        cfg.grouping = g;
    }
    if let Some(s) = c.select_on {
        cfg.select_on = s;
    }
    if let Command::Gate(g) = &cli.command {
        if let Some(a) = &g.accels {
            cfg.gate.accels = a.clone();
        }
        if g.segment.is_some() {
            cfg.gate.segment = g.segment;
        }
        if let Some(v) = g.speed {
            cfg.gate.speed_kmh = v;
        }
        if let Some(d) = g.direction {
            cfg.gate.direction = d;
        }
        if let Some(f) = g.degradation {
            cfg.gate.degradation = DegradationState::uniform(f);
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> capguard::Result<()> {
    let cfg = effective_config(cli)?;
    if let Command::Config = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let threads = match cli.command {
        Command::GenData | Command::Run => cli.common.workers.unwrap_or(0),
        _ => 1,
    };
    // Ignored when a pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let p = Pipeline::new(cfg)?;
    match &cli.command {
        Command::GenRoads => p.gen_roads().map(drop),
        Command::GenData => p.gen_data().map(drop),
        Command::Diagnose => p.diagnose().map(drop),
        Command::Train => p.train().map(drop),
        Command::Calibrate => p.calibrate().map(drop),
        Command::Evaluate => p.evaluate().map(drop),
        Command::Select => p.select().map(drop),
        Command::Gate(_) => {
            p.gate()?;
            print!("{}", std::fs::read_to_string(p.path(capguard::pipeline::DECISION_CSV))?);
            Ok(())
        }
        Command::Report => {
            p.report()?;
            print!("{}", std::fs::read_to_string(p.path(capguard::pipeline::REPORT_FILE))?);
            Ok(())
        }
        Command::Run => {
            p.gen_roads()?;
            p.gen_data()?;
            p.diagnose()?;
            p.train()?;
            p.calibrate()?;
            p.evaluate()?;
            p.select()?;
            p.gate()?;
            p.report().map(drop)
        }
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
