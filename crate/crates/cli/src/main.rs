use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lfam_cli::{dispatch, resolve_config, Category, Command, Format, OUTPUT_DIR_ENV, VERSION};

/// Windowed encoder-decoder attention U-Net: training, evaluation,
/// gradient checks, attention cost reports and synthetic data.
#[derive(Parser)]
#[command(name = "lfam", version = VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// key=value config file; missing keys take their defaults.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lfam.local_range=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides the config and LFAM_OUTPUT_DIR).
    #[arg(short, long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write the log, checkpoints and summary.
    Train(Common),
    /// Score a checkpoint on the held-out split.
    Eval(Common),
    /// Run the double-precision gradient suite.
    Gradcheck(Common),
    /// Attention flop report for the reference or configured geometry.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "table")]
        format: FormatArg,
    },
    /// Write a synthetic dataset as PGM images and masks.
    GenData(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Category::Usage.code() as u8) } else { ExitCode::SUCCESS };
        }
    };
    let (command, common, format) = match cli.command {
        Cmd::Train(c) => (Command::Train, c, Format::Table),
        Cmd::Eval(c) => (Command::Eval, c, Format::Table),
        Cmd::Gradcheck(c) => (Command::Gradcheck, c, Format::Table),
        Cmd::Cost { common, format } => (
            Command::Cost,
            common,
            match format {
                FormatArg::Table => Format::Table,
                FormatArg::Json => Format::Json,
            },
        ),
        Cmd::GenData(c) => (Command::GenData, c, Format::Table),
    };
    let env_output = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    let result = resolve_config(common.config.as_deref(), &common.set, env_output, common.output)
        .and_then(|cfg| dispatch(command, &cfg, format, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lfam {}: {e}", command.name());
            ExitCode::from(e.category.code() as u8)
        }
    }
}
