use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use subnet_cli::config::Command;

#[derive(Debug, Parser)]
#[command(name = "subnet", version, about = "Train and analyse continuous-time subspace-encoder state-space models")]
struct Cli {
    /// generate | train | eval | sweep-tau | probe-smoothness | reconstruct | ensemble
    command: String,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweep-tau and ensemble.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let requested: Command = serde_json::from_value(serde_json::Value::String(cli.command.clone()))
        .map_err(|_| anyhow::anyhow!("unknown command `{}`", cli.command))?;
    let mut cfg = subnet_cli::parse_config(&cli.config)?;
    if cfg.command != requested {
        anyhow::bail!(
            "command `{}` does not match the config's `command` ({:?})",
            cli.command,
            cfg.command
        );
    }
    if cli.threads == 0 {
        anyhow::bail!("--threads must be at least 1");
    }
    cfg.apply_overrides(cli.out.as_deref(), cli.seed)?;
    subnet_cli::run(&cfg, cli.threads)
}
