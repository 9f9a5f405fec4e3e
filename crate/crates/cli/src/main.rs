use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trc_core::commands::{cmd_attribute, cmd_ingest, cmd_predict, cmd_run, cmd_train, RunConfig, RunOverrides};

#[derive(Parser)]
#[command(name = "trc", version, about = "Temporal relation classification harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and write its statistics.
    Ingest(Common),
    /// Prompt a generative backend over the test split.
    Run(Common),
    /// Train the encoder classifier head.
    Train(Common),
    /// Predict the test split with a trained head.
    Predict(Common),
    /// KernelShap attributions and positional analysis.
    Attribute(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// matres, tbdense or timeline.
    #[arg(long)]
    scheme: Option<String>,
    /// p, qa1 or qa2.
    #[arg(long)]
    protocol: Option<String>,
    /// mock or http.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Number of few-shot sets; 0 runs zero-shot.
    #[arg(long)]
    sets: Option<usize>,
    /// Seed for every seeded section without its own.
    #[arg(long)]
    seed: Option<u64>,
    /// frozen, full or adapter.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Top tokens kept per attribution (default 5).
    #[arg(long)]
    k: Option<usize>,
    /// KernelShap coalition samples.
    #[arg(long)]
    samples: Option<usize>,
    /// encoder, backend, last-token or uniform.
    #[arg(long)]
    attr_model: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> RunOverrides {
        RunOverrides {
            corpus: self.corpus.clone(),
            scheme: self.scheme.clone(),
            protocol: self.protocol.clone(),
            backend: self.backend.clone(),
            mock_script: self.mock_script.clone(),
            sets: self.sets,
            seed: self.seed,
            mode: self.mode.clone(),
            k: self.k,
            samples: self.samples,
            out: self.out.clone(),
            attr_model: self.attr_model.clone(),
            epochs: self.epochs,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig) -> _) = match &cli.command {
        Command::Ingest(c) => (c, cmd_ingest),
        Command::Run(c) => (c, cmd_run),
        Command::Train(c) => (c, cmd_train),
        Command::Predict(c) => (c, cmd_predict),
        Command::Attribute(c) => (c, cmd_attribute),
    };
    let result = RunConfig::load(common.config.as_deref(), &common.overrides()).and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
