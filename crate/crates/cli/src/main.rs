mod artifacts;
mod error;
mod output;
mod phases;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use coed::config::ExperimentConfig;
use coed::problem::{Experiment, Stream};
use log::{error, info};
use serde_json::{json, Map, Value};

use error::CliError;
use output::{Manifest, PhaseRecord};
use phases::Run;

#[derive(Parser)]
#[command(name = "coed", version, about = "Control-oriented sensor placement for a heat control problem")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Configuration file with `key = value` lines. Defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed, overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use dense reference operators. Small meshes only.
    #[arg(long, global = true)]
    exact_mode: bool,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Synthetic data, MAP point and pointwise variances with all sensors.
    Invert,
    /// Classical and control-oriented greedy designs plus the random baseline.
    Oed,
    /// Optimal control at the MAP point of a design.
    Control {
        /// Which design's MAP point drives the control.
        #[arg(long, default_value = "coed")]
        design: String,
    },
    /// Moments and concentration bounds of the control objective.
    Uq,
    /// Singular values of the parameter-to-goal map and Hessian eigenvalues.
    Spectra,
    /// invert, oed, control, uq and spectra in sequence.
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Invert => "invert",
            Command::Oed => "oed",
            Command::Control { .. } => "control",
            Command::Uq => "uq",
            Command::Spectra => "spectra",
            Command::All => "all",
        }
    }
}

fn load_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn header(args: &Args, exp: &Experiment, threads: usize) -> Map<String, Value> {
    let config: Map<String, Value> = exp
        .config
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    let streams: Map<String, Value> = Stream::ALL
        .iter()
        .map(|s| (s.name().to_string(), json!({"id": s.id(), "seed": exp.seed_for(*s)})))
        .collect();
    let mut h = Map::new();
    h.insert("tool".into(), json!("coed"));
    h.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    h.insert("command".into(), json!(args.command.name()));
    h.insert("config".into(), Value::Object(config));
    h.insert("seed".into(), json!(exp.config.seed));
    h.insert("streams".into(), Value::Object(streams));
    h.insert("threads".into(), json!(threads));
    h.insert("exact_mode".into(), json!(args.exact_mode));
    h
}

fn run(args: &Args) -> Result<(), CliError> {
    let config = load_config(args)?;
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let root = config.output_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
    let exp = Experiment::build(config)?;
    info!("{} nodes, {} candidate sensors", exp.ip.dim(), exp.num_sensors());
    let run = Run::new(exp, args.exact_mode, root.clone())?;
    let mut manifest = Manifest::open(&root, header(args, &run.exp, rayon::current_num_threads()));

    let steps: Vec<&str> = match &args.command {
        Command::All => vec!["invert", "oed", "control", "uq", "spectra"],
        c => vec![c.name()],
    };
    let design = match &args.command {
        Command::Control { design } => design.as_str(),
        _ => "coed",
    };
    for phase in steps {
        info!("phase {phase}");
        let t = Instant::now();
        let result: Result<PhaseRecord, CliError> = match phase {
            "invert" => phases::invert(&run),
            "oed" => phases::oed(&run),
            "control" => phases::control(&run, design),
            "uq" => phases::uq(&run),
            _ => phases::spectra(&run),
        };
        let rec = result.map_err(|e| e.in_phase(phase))?;
        let secs = t.elapsed().as_secs_f64();
        info!("phase {phase} done in {secs:.2} s");
        manifest.record(rec, secs);
        manifest.save(&root)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("coed: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
