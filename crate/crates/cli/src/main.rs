use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use otrecon::{run, CliError, Command, Config};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Generate,
    Train,
    Eval,
    Prop1,
    Prop2,
    MetricCheck,
    Selftest,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Generate => Command::Generate,
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Prop1 => Command::Prop1,
            Cmd::Prop2 => Command::Prop2,
            Cmd::MetricCheck => Command::MetricCheck,
            Cmd::Selftest => Command::Selftest,
        }
    }
}

/// Learned tomographic reconstruction with an entropic Wasserstein loss.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    command: Cmd,
    /// Flat key = value config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: otrecon-<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to resume (train), evaluate (eval) or verify (selftest).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides the seed key of the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cmd = Command::from(args.command);
    let result = (|| {
        let mut config = match &args.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = args.seed {
            config.set("seed", &s.to_string()).map_err(CliError::Config)?;
        }
        if let Some(p) = &args.checkpoint {
            let p = p.to_str().ok_or_else(|| CliError::Config("checkpoint path is not UTF-8".into()))?;
            config.set("checkpoint", p).map_err(CliError::Config)?;
        }
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("otrecon-{}", cmd.name())));
        run(cmd, &config, &out)
    })();
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("otrecon {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
