//! `magtkd`: corpus generation, two-stage training, evaluation, ablation,
//! coefficient sweeps, the complexity benchmark and embedding export.
//!
//! Exit codes: 0 ok, 2 missing upstream artifact, 3 bad config or
//! invocation, 4 runtime failure.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use magtkd_core::trainer::{RunConfig, PRESETS};
use magtkd_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "magtkd",
    version,
    about = "Multimodal emotion recognition in conversation: distillation and gated fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file, or a preset name (desk, iemocap, meld). Default: desk.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Run directory; every command reads and writes under it.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Dotted override, e.g. `stage2.alpha=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic corpus: manifest, three feature stores, spec echo.
    Synth,
    /// Train the text teacher and the four audio/video students.
    Stage1,
    /// Train the fusion model on stage-1 features.
    Stage2,
    /// Score stage-1 heads and the fusion model on dev and test.
    Eval,
    /// The 13-row modality and fusion ablation table.
    Ablate,
    /// Stage-2 runs over the configured (alpha, beta) grid.
    Sweep,
    /// Frame-level versus utterance-level attention timing.
    Bench,
    /// Embedding matrices and label files for external plotting.
    Export,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Stage1 => "stage1",
            Command::Stage2 => "stage2",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::Bench => "bench",
            Command::Export => "export",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact(_) => 2,
        Error::Config(_) | Error::Validation(_) => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli) -> magtkd_core::Result<RunConfig> {
    let mut cfg = match cli.config.as_deref() {
        None => RunConfig::desk(),
        Some(p) if PRESETS.contains(&p) && !std::path::Path::new(p).exists() => {
            RunConfig::preset(p).expect("listed preset")
        }
        Some(p) => {
            let path = std::path::Path::new(p);
            if !path.exists() {
                return Err(Error::Config(format!("config file {p} does not exist")));
            }
            RunConfig::load(path)?
        }
    };
    for o in &cli.set {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = load_config(&cli).and_then(|cfg| {
        let argv: Vec<String> = std::env::args().collect();
        let ctx = commands::Context {
            command: cli.command.name(),
            argv,
            overrides: cli.set.clone(),
            layout: artifacts::Layout::new(&cli.out),
            cfg,
        };
        match cli.command {
            Command::Synth => commands::synth(&ctx),
            Command::Stage1 => commands::stage1(&ctx),
            Command::Stage2 => commands::stage2(&ctx),
            Command::Eval => commands::eval(&ctx),
            Command::Ablate => commands::ablate(&ctx),
            Command::Sweep => commands::sweep(&ctx),
            Command::Bench => commands::bench(&ctx),
            Command::Export => commands::export(&ctx),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                2 => "missing dependency",
                3 => "bad config",
                _ => "runtime failure",
            };
            eprintln!("magtkd {}: {kind}: {e}", cli.command.name());
            ExitCode::from(code)
        }
    }
}
