use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedpoison::config::{parse_config, parse_pairs};
use fedpoison::output::emit_plotdata;
use fedpoison::scenario::{run_scenario, run_to_dir, Scenario};
use fedpoison::Error;

#[derive(Parser)]
#[command(
    name = "fedpoison",
    version,
    about = "Federated-learning poisoning lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a key=value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a named preset.
    Scenario {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra config override, repeatable: --set rounds=10
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write fig4_data.csv and fig5_data.csv for a finished run.
    Plotdata { run_dir: PathBuf },
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_config() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            println!("{}", run_to_dir(&cfg, &out)?);
        }
        Command::Scenario { name, out, set } => {
            let scenario = Scenario::named(&name)?;
            let base = parse_pairs(&set.join("\n"))?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&name));
            for summary in run_scenario(&scenario, &out, &base)? {
                println!("{summary}");
            }
        }
        Command::Plotdata { run_dir } => {
            let (a, b) = emit_plotdata(&run_dir)?;
            println!("wrote {} and {}", a.display(), b.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
