mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use multiblade::corpus::Split;

use crate::config::{CliConfig, Preset};

#[derive(Debug, Parser)]
#[command(name = "multiblade", version, about = "Multi-label CNN with exemplar auditing")]
struct Cli {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, global = true, default_value_t = Preset::Top50)]
    preset: Preset,
    /// Override one key, e.g. `--set base.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Corpus directory with train.tsv, dev.tsv and test.tsv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted-trigger corpus and its trigger map.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the vocabulary and train the base model.
    Train(TrainArgs),
    /// Fine-tune the base model with the min/max losses.
    Finetune(TrainArgs),
    /// Index the training split with the fine-tuned model.
    BuildDb,
    /// Rank labels for a split, a text, or a file of texts.
    Predict(PredictArgs),
    /// Exemplar audits of predicted labels.
    Audit(AuditArgs),
    /// Metrics of the model and the exemplar decision rules.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    split: Option<Split>,
    /// Free text, tokenized like corpus documents.
    #[arg(long)]
    text: Option<String>,
    /// One document per line; `doc_id<TAB>text` or bare text.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TableFormat {
    Tsv,
    Json,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    offset: f64,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TableFormat::Tsv)]
    format: TableFormat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AuditFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[command(flatten)]
    source: Source,
    /// Restrict to these documents. Repeatable.
    #[arg(long = "doc")]
    docs: Vec<String>,
    /// Label codes to audit; every predicted label when omitted.
    #[arg(long = "label")]
    labels: Vec<String>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    offset: f64,
    /// Audit named labels even when they are not predicted.
    #[arg(long)]
    force: bool,
    #[arg(long, value_enum, default_value_t = AuditFormat::Text)]
    format: AuditFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Rule {
    Model,
    Exa,
    Onlydb,
    Exadr,
    #[value(name = "exadr_t")]
    ExadrT,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Rule::Model, Rule::Exa, Rule::Onlydb, Rule::Exadr, Rule::ExadrT])]
    rules: Vec<Rule>,
    /// Thresholds for exadr_t; defaults to eval.taus.
    #[arg(long = "tau", value_delimiter = ',', allow_negative_numbers = true)]
    taus: Vec<f64>,
    /// Score an existing prediction file instead of running the model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    /// Append-only annotation log.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Preload a corpus split so its documents can be audited with gold labels.
    #[arg(long)]
    split: Option<Split>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = CliConfig::load(cli.preset, cli.config.as_deref(), &cli.overrides)?;
    if let Some(d) = cli.run_dir {
        cfg.run_dir = d;
    }
    if let Some(d) = cli.data {
        cfg.data.dir = d;
    }
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        Cli::command()
            .error(clap::error::ErrorKind::MissingSubcommand, "a subcommand is required")
            .exit();
    };
    match command {
        Command::Synth { out, seed } => commands::synth(&cfg, out, seed),
        Command::Train(a) => commands::train(&mut cfg, a.epochs, a.seed),
        Command::Finetune(a) => commands::finetune(&mut cfg, a.epochs, a.seed),
        Command::BuildDb => commands::build_db(&cfg),
        Command::Predict(a) => commands::predict(&cfg, a),
        Command::Audit(a) => commands::audit(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::Serve(a) => commands::serve(&mut cfg, a),
    }
}
