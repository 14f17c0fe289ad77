//! Command-line surface. Flags override the matching config fields; stage
//! directories default to fixed locations under `--data`.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use txn_foundry::eval::ScalingAxis;
use txn_foundry::objective::{AggregationMode, NegativeSamplingPlan, NegativeStrategy};
use txn_foundry::trainer::TaskMode;

use crate::config::PipelineConfig;
use crate::{stages, CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "txn-foundry", version, about = "Transaction foundation model pipeline")]
struct Cli {
    /// Pipeline config (TOML). The bundled tiny config is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root of the stage directories.
    #[arg(long, global = true, env = "TXN_FOUNDRY_DATA", default_value = "data")]
    data: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic transaction stream.
    Generate(GenerateArgs),
    /// Build vocabularies, split by time and write corpus shards.
    BuildCorpus(BuildCorpusArgs),
    /// Pre-train the sequential model.
    Train(TrainArgs),
    /// Score a trained model on one corpus partition.
    Eval(EvalArgs),
    /// Memory and time of the negative sampling strategies.
    BenchNegatives(BenchArgs),
    /// Train over a grid of corpus or model sizes.
    Scaling(ScalingArgs),
    /// Write embedding tables for the service.
    ExportEmbeddings(ExportArgs),
    /// Two-tower comparison of pretrained and scratch embeddings.
    Rec(RecArgs),
    /// Serve exported embeddings over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    cards: Option<usize>,
    #[arg(long)]
    merchants: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildCorpusArgs {
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// `treasure` or `simple`.
    #[arg(long)]
    mode: Option<AggregationMode>,
    /// `multi`, `merchant_only` or `abnormal_only`.
    #[arg(long)]
    task_mode: Option<TaskMode>,
    /// `shared:N`, `independent:N` or `exhaustive`.
    #[arg(long, value_parser = parse_negatives)]
    negatives: Option<(NegativeStrategy, usize)>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Report analytic counts only.
    #[arg(long)]
    no_execute: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScalingArgs {
    #[arg(long, value_parser = parse_axis)]
    axis: Option<ScalingAxis>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RecArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    /// Cutoffs reported for HR@K and NDCG@K.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Cutoff at which the two arms are compared.
    #[arg(long, default_value_t = 10)]
    compare_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Directory of exported tables.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Built explorer served under `/ui`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    allowed_origin: Option<String>,
    #[arg(long, default_value_t = 5000)]
    max_points: usize,
}

fn parse_negatives(s: &str) -> std::result::Result<(NegativeStrategy, usize), String> {
    let (name, n) = s.split_once(':').unwrap_or((s, "0"));
    let strategy = match name {
        "shared" => NegativeStrategy::Shared,
        "independent" => NegativeStrategy::Independent,
        "exhaustive" => NegativeStrategy::Exhaustive,
        _ => return Err(format!("unknown strategy `{name}`")),
    };
    let n = n.parse().map_err(|e| format!("bad count `{n}`: {e}"))?;
    Ok((strategy, n))
}

fn parse_axis(s: &str) -> std::result::Result<ScalingAxis, String> {
    match s {
        "cards" => Ok(ScalingAxis::Cards),
        "hidden_dim" => Ok(ScalingAxis::HiddenDim),
        _ => Err(format!("unknown axis `{s}`; expected cards or hidden_dim")),
    }
}

struct Dirs<'a>(&'a Path);

impl Dirs<'_> {
    fn pick(&self, flag: Option<PathBuf>, default: &str) -> PathBuf {
        flag.unwrap_or_else(|| self.0.join(default))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let d = Dirs(&cli.data);
    let out_line = |m: &crate::RunManifest| println!("{}", m.output.display());
    match cli.command {
        Command::Generate(a) => {
            if let Some(v) = a.cards {
                cfg.world.n_cards = v;
            }
            if let Some(v) = a.merchants {
                cfg.world.n_merchants = v;
            }
            if let Some(v) = a.seed {
                cfg.world.seed = v;
            }
            cfg.validate()?;
            out_line(&stages::generate(&cfg, &d.pick(a.out, "raw"))?);
        }
        Command::BuildCorpus(a) => {
            if let Some(v) = a.max_seq_len {
                cfg.corpus.max_seq_len = v;
                cfg.model.max_seq_len = cfg.model.max_seq_len.max(v);
            }
            cfg.validate()?;
            let m = stages::build_corpus(&cfg, &d.pick(a.raw, "raw"), &d.pick(a.out, "corpus"))?;
            out_line(&m);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.lr {
                t.learning_rate = v;
            }
            if let Some(v) = a.mode {
                t.aggregation_mode = v;
            }
            if let Some(v) = a.task_mode {
                t.task_mode = v;
            }
            if let Some((strategy, n)) = a.negatives {
                t.negatives = NegativeSamplingPlan {
                    strategy,
                    n_negative: n,
                    ..t.negatives
                };
            }
            if let Some(v) = a.seed {
                t.seed = v;
            }
            cfg.validate()?;
            let m = stages::train(
                &cfg,
                &d.pick(a.corpus, "corpus"),
                &d.pick(a.out, "runs/default"),
                a.resume,
            )?;
            out_line(&m);
        }
        Command::Eval(a) => {
            if let Some(p) = a.partition {
                cfg.eval.partition = p;
            }
            cfg.validate()?;
            let (report, _) = stages::eval(
                &cfg,
                &d.pick(a.corpus, "corpus"),
                &d.pick(a.run, "runs/default"),
                &d.pick(a.out, "eval"),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::BenchNegatives(a) => {
            if a.no_execute {
                cfg.bench.execute = false;
            }
            let (summary, m) = stages::bench_negatives(&cfg, &d.pick(a.out, "bench"))?;
            print!("{}", txn_foundry::eval::bench_csv(&summary.rows));
            log::info!(
                "ratio at max N {:?}, shared R² {:?}",
                summary.ratio_at_max_n,
                summary.shared_r2
            );
            out_line(&m);
        }
        Command::Scaling(a) => {
            if let Some(v) = a.axis {
                cfg.scaling.axis = v;
            }
            if let Some(v) = a.sizes {
                cfg.scaling.sizes = v;
            }
            cfg.validate()?;
            let (report, _) = stages::scaling(&cfg, &d.pick(a.out, "scaling"))?;
            print!("{}", txn_foundry::eval::scaling_csv(&report));
        }
        Command::ExportEmbeddings(a) => {
            let m = stages::export_embeddings(
                &cfg,
                &d.pick(a.raw, "raw"),
                &d.pick(a.corpus, "corpus"),
                &d.pick(a.run, "runs/default"),
                &d.pick(a.out, "embeddings"),
            )?;
            out_line(&m);
        }
        Command::Rec(a) => {
            if let Some(v) = a.k {
                cfg.rec.tower.ks = v;
            }
            if !cfg.rec.tower.ks.contains(&a.compare_k) {
                return Err(CliError::config(
                    "rec.tower.ks",
                    format!("must include the comparison cutoff {}", a.compare_k),
                ));
            }
            cfg.validate()?;
            let (summary, _) = stages::rec(
                &cfg,
                &d.pick(a.corpus, "corpus"),
                &d.pick(a.run, "runs/default"),
                &d.pick(a.out, "rec"),
                a.compare_k,
            )?;
            println!(
                "pretrained wins {} of {} seeds at K={}",
                summary.wins,
                summary.runs.len(),
                summary.compare_k
            );
        }
        Command::Serve(a) => serve(a, &d)?,
    }
    Ok(())
}

fn serve(a: ServeArgs, d: &Dirs<'_>) -> Result<()> {
    let dir = d.pick(a.embeddings, "embeddings");
    crate::RunManifest::upstream(&dir, "export-embeddings", None)?;
    let store = embedsvc::Store::load(&dir)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::config("host", format!("{e}")))?;
    let state = embedsvc::AppState::new(
        store,
        embedsvc::ServiceConfig {
            max_points: a.max_points,
            allowed_origin: a.allowed_origin,
            static_dir: a.static_dir,
        },
    );
    log::info!("serving {} on http://{addr}", dir.display());
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(embedsvc::service::serve(state, addr))
        .map_err(|e| CliError::io(addr.to_string(), e))
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on a runtime or config error (reported as JSON on
/// stderr), 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}
