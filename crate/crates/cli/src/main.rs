use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dsaa_cli::commands::{self, CmdError, EvalOptions};
use dsaa_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "dsaa",
    about = "Attribute-aware text encoding on a synthetic detection benchmark",
    version
)]
struct Cli {
    /// TOML run config; defaults to ./dsaa.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_dir: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<String>,
    /// Remote extraction endpoint URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark into the data directory.
    GenData,
    /// Train the adapters on the generated train split.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        nms_iou: Option<f64>,
        /// Restrict the table to one column label.
        #[arg(long)]
        subset: Option<String>,
        /// Truncate each record's negative captions.
        #[arg(long)]
        max_negatives: Option<usize>,
    },
    /// Suppression and separation reports for one or more checkpoints.
    Analyze {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Annotate a line-delimited captions file with attribute spans.
    Extract {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Extraction mode override: lexicon or remote.
        #[arg(long)]
        mode: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CmdError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())
        .map_err(|e| CmdError::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &cli.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &cli.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    if let Some(e) = &cli.endpoint {
        cfg.extraction.endpoint = e.clone();
    }
    match &cli.cmd {
        Cmd::Train { steps: Some(s) } => cfg.training.steps = *s,
        Cmd::Eval {
            nms_iou: Some(v), ..
        } => cfg.eval.nms_iou = *v,
        Cmd::Extract { mode: Some(m), .. } => cfg.extraction.mode = m.clone(),
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CmdError> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::GenData => {
            let out = commands::cmd_gen_data(&cfg)?;
            println!(
                "wrote {} train and {} eval records under {}",
                out.train_records,
                out.eval_records,
                cfg.paths.data_dir
            );
            println!("config digest {}", out.config_digest);
            println!("data digest   {}", out.data_digest);
        }
        Cmd::Train { .. } => {
            let out = commands::cmd_train(&cfg)?;
            let last = out.steps.last();
            println!(
                "trained {} steps; final loss {}",
                out.steps.len(),
                last.map_or(String::from("-"), |s| format!("{:.4}", s.total))
            );
            println!("checkpoint {}", out.final_ckpt.display());
            println!("step log   {}", out.step_log.display());
        }
        Cmd::Eval {
            checkpoint,
            subset,
            max_negatives,
            ..
        } => {
            let opts = EvalOptions {
                subset: subset.as_deref(),
                max_negatives: *max_negatives,
            };
            let out = commands::cmd_eval(&cfg, checkpoint, opts)?;
            print!("{}", out.table_text);
            println!("table {}", out.csv_path.display());
        }
        Cmd::Analyze { checkpoints } => {
            let out = commands::cmd_analyze(&cfg, checkpoints)?;
            for (i, name) in out.names.iter().enumerate() {
                let sup = &out.suppression[i];
                let sep = &out.separation[i];
                println!(
                    "{name}: neutral mean {} explicit mean {} separation gap {:.4}",
                    sup.neutral_mean
                        .map_or(String::from("-"), |v| format!("{v:.4}")),
                    sup.explicit_mean
                        .map_or(String::from("-"), |v| format!("{v:.4}")),
                    sep.gap
                );
            }
            println!("suppression table {}", out.suppression_csv.display());
        }
        Cmd::Extract {
            captions, output, ..
        } => {
            let out = commands::cmd_extract(&cfg, captions, output.as_deref())?;
            println!(
                "annotated {} captions ({} lexicon fallbacks) into {}",
                out.captions,
                out.fallbacks,
                out.output.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
