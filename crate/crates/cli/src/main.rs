use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ml2::Regime;
use ml2_cli::commands::default_probe_train;
use ml2_cli::{cmd_embed, cmd_eval, cmd_gen_data, cmd_project, cmd_train, CliError, DataArgs, EvalArgs, RunConfig, RUN_DIR_ENV};

const PRECEDENCE: &str = "\
Settings are resolved as: command-line flag, then the --config file, then \
built-in defaults. Without --run-dir or paths.run_dir, training writes to \
$ML2_RUN_DIR/<regime>-seed<seed>, or runs/<regime>-seed<seed> when the \
variable is unset.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.";

#[derive(Parser)]
#[command(name = "ml2", version, about = "Multi-label metric learning on tabular features", after_help = PRECEDENCE)]
struct Cli {
    /// Worker threads for per-example work; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test JSONL splits and a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed (data.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an encoder and keep the checkpoint with the best validation NMI.
    Train(TrainArgs),
    /// Print clustering, retrieval and probe metrics as JSON.
    Eval {
        #[command(flatten)]
        data: DataFlags,
        /// Split the normal-vs-abnormal probe is fitted on
        /// [default: train.jsonl beside --data].
        #[arg(long)]
        probe_train: Option<PathBuf>,
        /// Skip the classification probe.
        #[arg(long, conflicts_with = "probe_train")]
        no_probe: bool,
        /// k-means seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write embeddings as CSV (id,e0,e1,...).
    Embed {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a 2-D principal-component projection as CSV (id,x,y,labels).
    Project {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.jsonl and val.jsonl (paths.data_dir).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (paths.run_dir).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Loss: contrastive, triplet, ml2 or ml2plus (train.regime).
    #[arg(long)]
    loss: Option<Regime>,
    /// Enable classification pre-training (train.pretrain).
    #[arg(long)]
    pretrain: bool,
    #[arg(long)]
    pretrain_iterations: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Keep only the k hardest labels per group.
    #[arg(long)]
    hard_class_k: Option<usize>,
    /// Sampling seed; also seeds initialization unless encoder.seed is set.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Number of labels [default: from manifest.json beside --data].
    #[arg(long)]
    label_count: Option<usize>,
}

impl DataFlags {
    fn into_args(self) -> DataArgs {
        DataArgs {
            checkpoint: self.checkpoint,
            data: self.data,
            label_count: self.label_count,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn resolve_train(args: TrainArgs, threads: Option<usize>) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(regime) = args.loss {
        if regime.uses_groups() != t.regime.uses_groups() && args.batch_size.is_none() {
            t.batch_size = ml2::TrainConfig::desk_default(regime).batch_size;
        }
        t.regime = regime;
    }
    t.pretrain |= args.pretrain;
    macro_rules! set {
        ($($flag:ident => $field:expr),*) => {$(if let Some(v) = args.$flag { $field = v; })*};
    }
    set!(pretrain_iterations => t.pretrain_iterations, iterations => t.iterations,
         batch_size => t.batch_size, lr => t.learning_rate, eval_every => t.eval_every,
         seed => t.seed);
    if let Some(k) = args.hard_class_k {
        t.hard_class_k = Some(k);
    }
    if let Some(n) = threads {
        t.threads = n;
    }
    if let Some(d) = args.data {
        cfg.paths.data_dir = Some(d);
    }
    if let Some(r) = args.run_dir {
        cfg.paths.run_dir = Some(r);
    }
    if cfg.paths.run_dir.is_none() {
        let parent = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        cfg.paths.run_dir = Some(parent.join(format!("{}-seed{}", cfg.train.regime, cfg.train.seed)));
    }
    Ok(cfg)
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    let n = threads.unwrap_or(1);
    if n == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let o = cmd_gen_data(&cfg, &out)?;
            for (split, n) in &o.manifest.counts {
                eprintln!("{split}: {n} examples");
            }
        }
        Command::Train(args) => {
            let cfg = resolve_train(args, cli.threads)?;
            let run = cmd_train(&cfg)?;
            match (run.report.best_iteration, run.report.best_val_nmi) {
                (Some(it), Some(nmi)) => eprintln!("best validation NMI {nmi:.4} at iteration {it}"),
                _ => eprintln!("no evaluation points; saved the initial model"),
            }
            eprintln!("wrote {} ({:.1}s)", run.run_dir.display(), run.report.wall_clock_secs);
        }
        Command::Eval {
            data,
            probe_train,
            no_probe,
            seed,
            out,
        } => {
            init_threads(cli.threads)?;
            let probe_train = if no_probe {
                None
            } else {
                probe_train.or_else(|| default_probe_train(&data.data))
            };
            let report = cmd_eval(&EvalArgs {
                data: data.into_args(),
                probe_train,
                seed,
            })?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
            match out {
                Some(path) => std::fs::write(&path, text + "\n")
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
                None => println!("{text}"),
            }
        }
        Command::Embed { data, out } => {
            init_threads(cli.threads)?;
            let n = cmd_embed(&data.into_args(), &out)?;
            eprintln!("wrote {n} rows to {}", out.display());
        }
        Command::Project { data, out } => {
            init_threads(cli.threads)?;
            let n = cmd_project(&data.into_args(), &out)?;
            eprintln!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ml2: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
