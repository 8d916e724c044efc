use std::path::PathBuf;
use std::process::ExitCode;

use adl_core::config::RunConfig;
use adl_core::pipeline::{Run, Stage};
use adl_core::Result;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "adl", version, about = "Diffusion synthesis of aortic-dissection CT phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (`[section]` / `key = value`); a stage manifest also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Run identifier; defaults to `run-<seed>`.
    #[arg(long, global = true)]
    run: Option<String>,
    /// Storage precision of checkpoints and sample tensors.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    sampler: Option<SamplerArg>,
    #[arg(long, global = true)]
    guidance: Option<f64>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=5))]
    class: Option<u8>,
    #[arg(long = "neg-class", global = true, value_parser = clap::value_parser!(u8).range(0..=5))]
    neg_class: Option<u8>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the phantom dataset and its split manifest.
    GenData,
    /// Train the class-conditioned base denoiser.
    TrainBase,
    /// Fine-tune low-rank adapters on the subject class with prior preservation.
    FinetuneLora,
    /// Draw synthetic images per class.
    Sample,
    /// MS-SSIM, FID and per-class classification of the samples.
    Evaluate,
    /// t-SNE embedding of real and synthetic features, with nearest-real matches.
    Embed,
    /// Train the segmentation network and probe synthetic samples.
    Segcheck,
    /// Render the metric table.
    Report,
    /// Run every stage in order.
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Precision {
    Fp32,
    Fp64,
    #[value(name = "fp16-store")]
    Fp16Store,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SamplerArg {
    Ddpm,
    Euler,
    #[value(name = "euler_a")]
    EulerA,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::GenData => vec![Stage::GenData],
            Command::TrainBase => vec![Stage::TrainBase],
            Command::FinetuneLora => vec![Stage::FinetuneLora],
            Command::Sample => vec![Stage::Sample],
            Command::Evaluate => vec![Stage::Evaluate],
            Command::Embed => vec![Stage::Embed],
            Command::Segcheck => vec![Stage::Segcheck],
            Command::Report => vec![Stage::Report],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set("run", "seed", s)?;
    }
    if let Some(p) = cli.precision {
        let v = match p {
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
            Precision::Fp16Store => "fp16-store",
        };
        cfg.set("run", "precision", v)?;
    }
    if let Some(m) = cli.sampler {
        let v = match m {
            SamplerArg::Ddpm => "ddpm",
            SamplerArg::Euler => "euler",
            SamplerArg::EulerA => "euler_a",
        };
        cfg.set("sample", "method", v)?;
    }
    if let Some(n) = cli.steps {
        cfg.set("sample", "steps", n)?;
    }
    if let Some(g) = cli.guidance {
        cfg.set("sample", "guidance", g)?;
    }
    if let Some(c) = cli.class {
        cfg.set("sample", "class", c)?;
    }
    if let Some(c) = cli.neg_class {
        cfg.set("sample", "neg_class", c)?;
    }
    Ok(cfg)
}

fn threads() -> Option<usize> {
    let raw = std::env::var("ADL_THREADS").ok()?;
    match raw.parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring ADL_THREADS={raw:?}: expected a positive integer");
            None
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let run_id = cli.run.clone().unwrap_or_else(|| format!("run-{}", cfg.raw("run", "seed")));
    let run = Run::new(cli.out.join(run_id), cfg);
    for stage in cli.command.stages() {
        let manifest = run.run_stage(stage)?;
        println!("{}: {}", stage.name(), manifest.display());
    }
    if matches!(cli.command, Command::Report | Command::All) {
        let text = std::fs::read_to_string(run.stage_dir(Stage::Report).join("report.txt"))
            .map_err(|e| adl_core::Error::Io { path: run.stage_dir(Stage::Report), source: e })?;
        print!("{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = threads() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.category() as i32;
            eprintln!("error [{:?}]: {e}", e.category());
            ExitCode::from(code as u8)
        }
    }
}
