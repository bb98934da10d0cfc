use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ect_core::pipeline::{render_layer, run_stages, write_atomic, Manifest, PipelineConfig, PipelineError, Stage};
use ect_core::recon::Layer;
use ect_core::render::Mapping;

/// Synthetic coplanar capacitive imaging pipeline.
#[derive(Debug, Parser)]
#[command(name = "ect", version)]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, last wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize and condition the electrode weights.
    Weights,
    /// Parse the phantom and rasterize it to a voxel file.
    Phantom,
    /// Simulate the rotating sweep into a sinogram file.
    Forward,
    /// Reconstruct one layer per gap by filtered backprojection.
    Recon,
    /// Render layers to 16-bit PGM. With --input, renders a single file.
    Render {
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long, requires = "input")]
        output: Option<PathBuf>,
        /// minmax | symmetric | fixed:LO:HI; overrides render_mapping.
        #[arg(long)]
        mapping: Option<String>,
    },
    /// Run every stage, reusing cached outputs.
    Pipeline,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn report(m: &Manifest, stages: &[Stage]) {
    for r in m.stages.iter().filter(|r| stages.iter().any(|s| s.name() == r.stage)) {
        let state = if r.cached { "cached".to_string() } else { format!("ran in {:.3} s", r.seconds) };
        println!("{:<8} {state}", r.stage);
        for (name, hash) in &r.outputs {
            println!("  {name} {}", &hash[..16]);
        }
    }
}

fn render_single(input: &Path, output: &Path, mapping: Mapping) -> Result<(), PipelineError> {
    let fail = |e: ect_core::Error| PipelineError::Stage { stage: "render", source: e };
    let layer = Layer::<f64>::load(input).map_err(|e| fail(e.into()))?;
    write_atomic(output, &render_layer(&layer, mapping)).map_err(|e| fail(e.into()))?;
    println!("{} -> {} ({mapping})", input.display(), output.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(cli)?;
    let stages: Vec<Stage> = match &cli.command {
        Command::Weights => vec![Stage::Weights],
        Command::Phantom => vec![Stage::Phantom],
        Command::Forward => vec![Stage::Forward],
        Command::Recon => vec![Stage::Recon],
        Command::Render { input, output, mapping } => {
            if let Some(m) = mapping {
                cfg.render_mapping = m.parse().map_err(PipelineError::Config)?;
            }
            if let (Some(i), Some(o)) = (input, output) {
                return render_single(i, o, cfg.render_mapping);
            }
            vec![Stage::Render]
        }
        Command::Pipeline => Stage::ALL.to_vec(),
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_text());
            return Ok(());
        }
    };
    let manifest = run_stages(&cfg, &stages)?;
    report(&manifest, &stages);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let msg = s.to_string();
                if !e.to_string().contains(&msg) {
                    eprintln!("  caused by: {msg}");
                }
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
