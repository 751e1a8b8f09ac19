use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use metagrad::experiments::{self, AblationMode, ExperimentConfig, ProbeSetup, SEED_ENV};
use metagrad::models::Checkpoint;
use metagrad::{verify, Error};

#[derive(Parser)]
#[command(
    name = "metagrad",
    version,
    about = "Meta-learning experiments with differentiable inner loops"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train one run per seed and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Freeze-only / adapt-only layer ablations of a checkpoint.
    Ablate(AblateArgs),
    /// Perturb one layer before adaptation over a sigma sweep.
    Perturb(PerturbArgs),
    /// Compare a linear checkpoint with its single-layer collapse.
    Collapse(ProbeArgs),
    /// Closed-form meta-loss grid of the two-weight regression model.
    Landscape(LandscapeArgs),
    /// Run the property suites and print a JSON report.
    Verify(VerifyArgs),
    /// Export checkpoint parameters, task episodes or a resolved config.
    Export(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, short, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped config by name (see `export presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Dotted-path override, e.g. `outer.beta=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<ExperimentConfig, Error> {
        let base = match (&self.config, &self.preset, fallback) {
            (Some(p), _, _) => ExperimentConfig::load(p)?,
            (None, Some(name), _) => experiments::preset(name)?,
            (None, None, Some(p)) if p.exists() => ExperimentConfig::load(p)?,
            _ => return Err(Error::Config("a --config or --preset is required".into())),
        };
        let cfg = base
            .with_overrides(&self.overrides)?
            .with_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task config; defaults to `config.toml` in the run directory.
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed of the held-out task set (default: first config seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON table here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    FreezeOnly,
    AdaptOnly,
    Both,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Layer name; repeatable. All layers when omitted.
    #[arg(long)]
    layer: Vec<String>,
}

#[derive(Args)]
struct PerturbArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    /// Layer to perturb.
    #[arg(long)]
    layer: String,
    /// Comma-separated sigma grid.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2,4")]
    sigma: Vec<f64>,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// `lo,hi` bounds of both axes.
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 1,
        default_value = "-4,4",
        allow_hyphen_values = true
    )]
    range: Vec<f64>,
    #[arg(long, default_value_t = 41)]
    resolution: usize,
    /// `trajectory.csv` of a deep1d run to overlay.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long, default_value = "landscape")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Skip the meta-gradient finite-difference grid.
    #[arg(long)]
    quick: bool,
    /// Swap in a custom op with a broken second derivative.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum ExportWhat {
    /// Checkpoint parameters as `layer,tensor,row,col,value` rows.
    Params,
    /// Held-out episodes of a config as CSV.
    Episodes,
    /// The resolved config (after overrides) as TOML.
    Config,
    /// Names of the shipped configs.
    Presets,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(value_enum)]
    what: ExportWhat,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of episodes.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a command, mapped to the process exit code.
enum Failure {
    Usage(String),
    Run(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Contract(_) | Error::Serde(_) => Failure::Usage(e.to_string()),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn emit(json: &str, out: Option<&Path>) -> Result<(), Failure> {
    println!("{json}");
    if let Some(p) = out {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, json)?;
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Run(e.to_string()))
}

fn probe_setup(args: &ProbeArgs) -> Result<(Checkpoint, ProbeSetup), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let fallback = args
        .checkpoint
        .parent()
        .and_then(|p| p.parent())
        .map(|run| run.join("config.toml"));
    let cfg = args.config.resolve(fallback.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    Ok((ckpt, ProbeSetup::from_config(&cfg, seed)))
}

fn train(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = args.config.resolve(None)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = experiments::run_train(&cfg)?;
    experiments::write_train_outputs(&cfg, &outcome, &dir)?;
    for s in &outcome.summary.seeds {
        let acc = s.mean_accuracy.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default();
        let loss = s.mean_loss.map(|l| format!(" loss {l:.5}")).unwrap_or_default();
        let flag = if s.divergence.is_some() { " DIVERGED" } else { "" };
        eprintln!(
            "seed {}: {} iterations{acc}{loss}{flag}",
            s.seed, s.iterations_completed
        );
    }
    eprintln!("wrote {}", dir.display());
    println!("{}", to_json(&outcome.summary)?);
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<(), Failure> {
    let (ckpt, setup) = probe_setup(&args.probe)?;
    let modes = match args.mode {
        ModeArg::FreezeOnly => vec![AblationMode::FreezeOnly],
        ModeArg::AdaptOnly => vec![AblationMode::AdaptOnly],
        ModeArg::Both => vec![AblationMode::FreezeOnly, AblationMode::AdaptOnly],
    };
    let table = experiments::ablate(&ckpt, &setup, &args.layer, &modes)?;
    for l in table.critical_layers(0.03, 0.10) {
        eprintln!("adaptation-critical layer: {l}");
    }
    emit(&to_json(&table)?, args.probe.out.as_deref())
}

fn perturb(args: &PerturbArgs) -> Result<(), Failure> {
    let (ckpt, setup) = probe_setup(&args.probe)?;
    let table = experiments::perturb(&ckpt, &setup, &args.layer, &args.sigma)?;
    emit(&to_json(&table)?, args.probe.out.as_deref())
}

fn collapse(args: &ProbeArgs) -> Result<(), Failure> {
    let (ckpt, setup) = probe_setup(args)?;
    let report = experiments::collapse(&ckpt, &setup)?;
    emit(&to_json(&report)?, args.out.as_deref())
}

fn landscape(args: &LandscapeArgs) -> Result<(), Failure> {
    let [lo, hi] = args.range[..] else {
        return Err(Failure::Usage(format!(
            "--range takes `lo,hi`, got {} values",
            args.range.len()
        )));
    };
    let (cells, report) = experiments::landscape(args.alpha, lo, hi, args.resolution)?;
    std::fs::create_dir_all(&args.out)?;
    experiments::landscape::write_cells_csv(&cells, &args.out.join("landscape.csv"))?;
    std::fs::write(args.out.join("stationary.json"), to_json(&report)?)?;
    if let Some(t) = &args.trajectories {
        let pts = experiments::overlay_trajectories(t, args.alpha)?;
        let mut w = csv::Writer::from_path(args.out.join("trajectory_overlay.csv")).map_err(Error::from)?;
        for p in &pts {
            w.serialize(p).map_err(Error::from)?;
        }
        w.flush()?;
    }
    eprintln!("wrote {}", args.out.display());
    println!("{}", to_json(&report)?);
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let report = verify::run_all(args.inject_fault, !args.quick)?;
    emit(&to_json(&report)?, args.report.as_deref())?;
    match report.first_failure {
        Some(f) => Err(Failure::Verify(format!("verification failed: {f}"))),
        None => Ok(()),
    }
}

fn export(args: &ExportArgs) -> Result<(), Failure> {
    let mut buf: Vec<u8> = Vec::new();
    match args.what {
        ExportWhat::Presets => {
            for (name, _) in experiments::PRESETS {
                buf.extend_from_slice(format!("{name}\n").as_bytes());
            }
        }
        ExportWhat::Config => buf = args.config.resolve(None)?.to_toml_string()?.into_bytes(),
        ExportWhat::Params => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| Failure::Usage("export params needs --checkpoint".into()))?;
            let ckpt = Checkpoint::load(path)?;
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["layer", "tensor", "row", "col", "value"])
                .map_err(Error::from)?;
            for layer in &ckpt.model.layers {
                let mut tensors = vec![("weight", &layer.weight)];
                if let Some(b) = &layer.bias {
                    tensors.push(("bias", b));
                }
                for (kind, t) in tensors {
                    let cols = if t.rank() == 2 { t.cols() } else { 1 };
                    for (k, v) in t.data().iter().enumerate() {
                        w.write_record([
                            layer.name.clone(),
                            kind.to_string(),
                            (k / cols).to_string(),
                            (k % cols).to_string(),
                            v.to_string(),
                        ])
                        .map_err(Error::from)?;
                    }
                }
            }
            w.flush()?;
        }
        ExportWhat::Episodes => {
            let cfg = args.config.resolve(None)?;
            if cfg.tasks.population {
                return Err(Failure::Usage("population tasks have no samples to export".into()));
            }
            let base = metagrad::maml::eval_base(cfg.seeds[0]);
            for i in 0..args.count as u64 {
                let (_, data) = cfg.tasks.episode(base, i)?;
                if let metagrad::tasks::TaskData::Samples(ds) = data {
                    let mut part = Vec::new();
                    metagrad::tasks::write_dataset_csv(&ds, &mut part)?;
                    let text = String::from_utf8_lossy(&part);
                    for (k, line) in text.lines().enumerate() {
                        match (k, i) {
                            (0, 0) => buf.extend_from_slice(format!("episode,{line}\n").as_bytes()),
                            (0, _) => {}
                            _ => buf.extend_from_slice(format!("{i},{line}\n").as_bytes()),
                        }
                    }
                }
            }
        }
    }
    match &args.out {
        Some(p) => std::fs::write(p, &buf)?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Train(a) => train(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::Perturb(a) => perturb(a),
        Cmd::Collapse(a) => collapse(a),
        Cmd::Landscape(a) => landscape(a),
        Cmd::Verify(a) => run_verify(a),
        Cmd::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
