use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tabret_cli::config::ConfigFile;
use tabret_cli::{CliError, RankScope, RunConfig};
use tabret_core::eval::GainKind;
use tabret_core::toy::ToyConfig;
use tabret_core::training::Objective;

#[derive(Parser)]
#[command(name = "tabret", version, about = "Graph-based table retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build table graphs and corpus statistics.
    Convert {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the graph branch by matching tables to their context.
    Pretrain(Common),
    /// Fine-tune the ranker, optionally with k-fold cross-validation.
    Train(Common),
    /// Rank tables for each query and write a TREC run.
    Rank {
        #[command(flatten)]
        common: Common,
        /// Rank with BM25 over flattened table text instead of a checkpoint.
        #[arg(long)]
        bm25: bool,
    },
    /// Score a TREC run against qrels.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value = "exponential", value_parser = parse_gain)]
        gain: GainKind,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write pooling attribution CSVs.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Query text; without it every query in --queries is used.
        #[arg(long)]
        query: Option<String>,
        /// Table id; without it every table is used.
        #[arg(long)]
        table: Option<String>,
    },
    /// Generate the synthetic toy corpus.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        tables: usize,
        #[arg(long, default_value_t = 32)]
        queries: usize,
        #[arg(long, default_value_t = 300)]
        dim: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        echo_captions: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key = value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    /// train: pre-train the graph branch first when no checkpoint is given.
    #[arg(long)]
    pretrain: bool,
    /// auto, candidates or corpus.
    #[arg(long)]
    rank_scope: Option<RankScope>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_parser = parse_gain)]
    gain: Option<GainKind>,
}

fn parse_gain(s: &str) -> Result<GainKind, String> {
    match s {
        "exponential" | "exp" => Ok(GainKind::Exponential),
        "linear" => Ok(GainKind::Linear),
        _ => Err(format!("unknown gain {s:?} (exponential or linear)")),
    }
}

impl Common {
    /// Merges flags over the config file. `pretraining` routes epochs and
    /// batch size to the pre-training fields.
    fn resolve(self, pretraining: bool) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let mut cfg = RunConfig {
            corpus: file.path(self.corpus, "corpus"),
            queries: file.path(self.queries, "queries"),
            qrels: file.path(self.qrels, "qrels"),
            embeddings: file.path(self.embeddings, "embeddings"),
            checkpoint: file.path(self.checkpoint, "checkpoint"),
            out: file.path(self.out, "out"),
            folds: file.pick(self.folds, "folds")?,
            layers: file.pick(self.layers, "layers")?,
            heads: file.pick(self.heads, "heads")?,
            ..RunConfig::default()
        };
        let t = &mut cfg.train;
        if let Some(v) = file.pick(self.objective, "objective")? {
            t.objective = v;
        }
        let epochs = file.pick(self.epochs, "epochs")?;
        let batch = file.pick(self.batch_size, "batch_size")?;
        if pretraining {
            t.pretrain_epochs = epochs.unwrap_or(t.pretrain_epochs);
            t.pretrain_batch = batch.unwrap_or(t.pretrain_batch);
        } else {
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch.unwrap_or(t.batch_size);
        }
        t.lr = file.pick(self.lr, "lr")?.unwrap_or(t.lr);
        t.warmup_steps = file.pick(self.warmup, "warmup")?.unwrap_or(t.warmup_steps);
        t.seed = file.pick(self.seed, "seed")?.unwrap_or(t.seed);
        t.dropout = file.pick(self.dropout, "dropout")?.unwrap_or(t.dropout);
        t.negatives = file.pick(self.negatives, "negatives")?.unwrap_or(t.negatives);
        t.pretrain = self.pretrain || file.pick::<bool>(None, "pretrain")?.unwrap_or(false);
        t.validate()?;
        cfg.workers = file.pick(self.workers, "workers")?.unwrap_or(1).max(1);
        cfg.rank_scope = file.pick(self.rank_scope, "rank_scope")?.unwrap_or_default();
        if let Some(g) = self.gain {
            cfg.gain = g;
        } else if let Some(g) = file.get("gain") {
            cfg.gain = parse_gain(g).map_err(CliError::Config)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Convert { corpus, out } => {
            let stats = tabret_cli::cmd_convert(&corpus, &out)?;
            println!(
                "{} table(s), {} with merged cells, {} nodes, {} edges",
                stats.table_count, stats.merged_table_count, stats.node_total, stats.edge_total
            );
        }
        Command::Pretrain(common) => {
            let path = tabret_cli::cmd_pretrain(&common.resolve(true)?)?;
            println!("{}", path.display());
        }
        Command::Train(common) => {
            let outcome = tabret_cli::cmd_train(&common.resolve(false)?)?;
            print!("{}", outcome.report.to_text());
        }
        Command::Rank { common, bm25 } => {
            let cfg = common.resolve(false)?;
            tabret_cli::cmd_rank(&cfg, bm25)?;
        }
        Command::Evaluate { run, qrels, gain, out } => {
            let report = tabret_cli::cmd_evaluate(&run, &qrels, gain, out.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::Inspect { common, query, table } => {
            let cfg = common.resolve(false)?;
            let results = tabret_cli::cmd_inspect(&cfg, query.as_deref(), table.as_deref())?;
            if cfg.out.is_none() {
                for r in &results {
                    println!("# query {} table {}", r.query_id, r.table_id);
                    print!("{}", r.csv);
                }
            }
        }
        Command::Toy { out, tables, queries, dim, seed, echo_captions } => {
            if queries > tables {
                return Err(CliError::Config(format!("{queries} queries need at least as many tables")));
            }
            let config = ToyConfig { tables, queries, dim, seed, echo_captions };
            let paths = tabret_cli::cmd_toy(&out, &config)?;
            println!("{}", paths.corpus.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
