use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use peract_cli::commands;
use peract_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "peract", version, about = "Voxel behavior-cloning pipeline on a toy tabletop world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations to a dataset directory.
    Generate(Common),
    /// Train a policy on a dataset; writes checkpoints and loss.log.
    Train(Common),
    /// Run closed-loop episodes and write eval_report.json.
    Eval(Common),
    /// Greedy action for a freshly reset scene.
    Predict(Common),
    /// Q-value heatmaps and argmax-versus-label summary for one tuple.
    Inspect(Common),
}

#[derive(Args)]
struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Comma-separated task names.
    #[arg(long)]
    tasks: Option<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, String> {
        let mut kv = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| format!("--set {s}: expected KEY=VALUE"))?;
            kv.push((k.trim().to_string(), v.to_string()));
        }
        let named = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("dataset", self.dataset.clone()),
            ("checkpoint", self.checkpoint.clone()),
            ("tasks", self.tasks.clone()),
        ];
        kv.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(kv)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig, &std::path::Path) -> peract_core::Result<String>) = match &cli.command {
        Command::Generate(c) => (c, commands::generate),
        Command::Train(c) => (c, commands::train_cmd),
        Command::Eval(c) => (c, commands::eval_cmd),
        Command::Predict(c) => (c, commands::predict_cmd),
        Command::Inspect(c) => (c, commands::inspect_cmd),
    };
    let overrides = match common.overrides() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = RunConfig::load(common.config.as_deref(), &overrides).and_then(|cfg| run(&cfg, &common.out));
    match result {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(peract_core::Error::Config(errs)) => {
            eprintln!("error: invalid configuration");
            for e in errs {
                eprintln!("  {e}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
