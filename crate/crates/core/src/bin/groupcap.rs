use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use groupcap::attention::AggregationVariant;
use groupcap::cli::{self, EvalSource};
use groupcap::config::RunConfig;
use groupcap::contrast::ContrastVariant;
use groupcap::datagen::Split;

#[derive(Parser)]
#[command(name = "groupcap", version, about = "Context-aware group captioning on synthetic scene-graph groups")]
struct Cli {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for this command; falls back to $GROUPCAP_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    agg: Option<AggregationVariant>,
    #[arg(long, global = true)]
    contrast: Option<ContrastVariant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// Directory written by `datagen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split.
    Train {
        #[command(flatten)]
        io: Data,
    },
    /// Score a checkpoint or a predictions file.
    Eval {
        #[command(flatten)]
        io: Data,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        ckpt: Option<PathBuf>,
        /// One caption per line, in split order.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Caption one sample.
    Caption {
        #[command(flatten)]
        io: Data,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        /// Beam width; 1 decodes greedily.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Dump the attention matrices for one sample as JSON.
    Attention {
        #[command(flatten)]
        io: Data,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
    },
    /// Retrain and evaluate over target/reference counts.
    Ablate {
        #[command(flatten)]
        io: Data,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = cli::ABLATION_TARGETS)]
        targets: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = cli::ABLATION_REFERENCES)]
        refs: Vec<usize>,
    },
    /// Train and test with unrelated images injected into the target group.
    Noise {
        #[command(flatten)]
        io: Data,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        k_train: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        k_test: Vec<usize>,
    },
}

fn run(cli: Cli) -> groupcap::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&cli.overrides)?;
    if let Some(agg) = cli.agg {
        config.agg = agg;
    }
    if let Some(contrast) = cli.contrast {
        config.contrast = contrast;
    }
    let seed = cli::resolve_seed(cli.seed)?;
    if let Some(seed) = seed {
        match cli.command {
            Command::Datagen { .. } => config.gen.seed = seed,
            _ => config.train.seed = seed,
        }
    }

    match cli.command {
        Command::Datagen { out } => {
            let report = cli::cmd_datagen(&config, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Train { io } => {
            let log = cli::cmd_train(&config, &io.data, &io.out, |e| {
                let val = e.val_wordacc.map(|v| format!("  val WordAcc {v:.2}")).unwrap_or_default();
                eprintln!("epoch {:>3}  loss {:.4}{val}", e.epoch, e.mean_loss);
            })?;
            println!("final loss {:.6}", log.final_loss().unwrap_or(f64::NAN));
        }
        Command::Eval { io, ckpt, predictions, split } => {
            let source = match (ckpt, predictions) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                (None, None) => unreachable!("clap requires one source"),
            };
            let report = cli::cmd_eval(&config, &io.data, &source, split, &io.out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("{report}");
        }
        Command::Caption { io, ckpt, sample, beam } => {
            let mut decode = config.decode;
            if let Some(w) = beam {
                decode.beam_width = w;
            }
            println!("{}", cli::cmd_caption(&ckpt, &io.data, sample, &decode, &io.out)?);
        }
        Command::Attention { io, ckpt, sample } => {
            print!("{}", cli::cmd_attention(&ckpt, &io.data, sample, &io.out)?);
        }
        Command::Ablate { io, ckpt_dir, targets, refs } => {
            let cells: Vec<(usize, usize)> = targets
                .iter()
                .flat_map(|&t| refs.iter().map(move |&r| (t, r)))
                .filter(|&(t, r)| t + r > 0)
                .collect();
            print!("{}", cli::cmd_ablate(&config, &io.data, &ckpt_dir, &cells, &io.out)?);
        }
        Command::Noise { io, ckpt_dir, k_train, k_test } => {
            print!("{}", cli::cmd_noise(&config, &io.data, &ckpt_dir, &k_train, &k_test, &io.out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
