//! Pipeline stages. Each reads its inputs from upstream stage directories,
//! writes its artifacts into `out`, and finishes with a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use embedsvc::Table;
use txn_foundry::corpus::{self, Corpus, CorpusDir};
use txn_foundry::eval::{self, MetricReport, ScalingSetup};
use txn_foundry::model::Model;
use txn_foundry::rec::{self, BaseTables, EmbeddingSource, InteractionSet, TowerReport};
use txn_foundry::syngen::{self, GroundTruth};
use txn_foundry::trainer::{self, RunDir};

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::{CliError, Result};

pub const RECORDS_FILE: &str = "transactions.jsonl";
pub const TRUTH_FILE: &str = "ground_truth.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Synthetic records plus the planted merchant assignments.
pub fn generate(cfg: &PipelineConfig, out: &Path) -> Result<RunManifest> {
    create_dir(out)?;
    let schema = syngen::default_schema();
    let records = syngen::generate(&cfg.world, &schema)?;
    syngen::write_records(&out.join(RECORDS_FILE), &records)?;
    write_json(&out.join(TRUTH_FILE), &syngen::ground_truth(&cfg.world)?)?;
    log::info!("generated {} transactions into {}", records.len(), out.display());
    let mut m = RunManifest::begin("generate", serde_json::to_value(&cfg.world)?, out)
        .seed("world", cfg.world.seed);
    m.schema_hash = Some(schema.hash());
    m.finish(&[RECORDS_FILE.into(), TRUTH_FILE.into()])
}

/// Vocabularies, temporal split and windowed shards.
pub fn build_corpus(cfg: &PipelineConfig, raw: &Path, out: &Path) -> Result<RunManifest> {
    let schema = syngen::default_schema();
    RunManifest::upstream(raw, "generate", Some(&schema.hash()))?;
    create_dir(out)?;
    let records = syngen::read_records(&raw.join(RECORDS_FILE))?;
    let split = cfg.corpus.split()?;
    let built = corpus::build_corpus(&records, &schema, split, cfg.corpus.max_seq_len)?;
    let cm = corpus::save_corpus(out, &built, split, cfg.corpus.max_seq_len)?;
    for (name, p) in &cm.partitions {
        log::info!(
            "{name}: {} sequences, {} scored transactions",
            p.sequences,
            p.scored_transactions
        );
    }
    let mut files = vec!["schema.toml".to_string(), "corpus.json".to_string()];
    files.extend(cm.partitions.values().flat_map(|p| p.shards.iter().cloned()));
    let mut m = RunManifest::begin("build-corpus", serde_json::to_value(&cfg.corpus)?, out)
        .input("raw", raw);
    m.schema_hash = Some(cm.schema_hash);
    m.finish(&files)
}

fn open_corpus(dir: &Path) -> Result<CorpusDir> {
    let cd = CorpusDir::open(dir)?;
    RunManifest::upstream(dir, "build-corpus", Some(&cd.manifest.schema_hash))?;
    Ok(cd)
}

/// Trains a model, or continues the run in `out` from its last checkpoint.
pub fn train(cfg: &PipelineConfig, corpus_dir: &Path, out: &Path, resume: bool) -> Result<RunManifest> {
    let cd = open_corpus(corpus_dir)?;
    if cd.manifest.max_seq_len > cfg.model.max_seq_len {
        return Err(CliError::config(
            "model.max_seq_len",
            format!("corpus windows are {} steps long", cd.manifest.max_seq_len),
        ));
    }
    let hash = cd.manifest.schema_hash.clone();
    let train = cd.partition("train")?;
    let val = cd.partition("val")?;
    let run = RunDir::new(out)?;
    let mut tc = cfg.train.clone();
    if resume {
        if !run.last().exists() {
            return Err(CliError::Upstream {
                path: run.last(),
                reason: "no checkpoint to resume from".into(),
            });
        }
        let (mut state, saved) = trainer::load_checkpoint(&run.last(), &hash)?;
        tc = trainer::TrainConfig {
            epochs: cfg.train.epochs,
            ..saved
        };
        let remaining = tc.epochs.saturating_sub(state.epochs_completed);
        log::info!(
            "resuming after epoch {}, {remaining} epochs left",
            state.epochs_completed
        );
        trainer::train_epochs(&mut state, &train, &val, &tc, remaining, Some(&run))?;
    } else {
        if run.metrics().exists() {
            std::fs::remove_file(run.metrics()).map_err(|e| CliError::io(run.metrics(), e))?;
        }
        trainer::train(&cd.schema, &cfg.model, &tc, &train, &val, Some(&run))?;
    }
    let config = serde_json::json!({ "model": cfg.model, "train": tc });
    let mut m = RunManifest::begin("train", config, out)
        .input("corpus", corpus_dir)
        .seed("train", tc.seed)
        .seed("negatives", tc.negatives.seed);
    m.schema_hash = Some(hash);
    m.finish(&[
        "metrics.ndjson".into(),
        "best.ckpt".into(),
        "last.ckpt".into(),
    ])
}

/// Opens a finished training run and its best model.
fn open_run(run_dir: &Path, schema_hash: &str) -> Result<Model<f32>> {
    RunManifest::upstream(run_dir, "train", Some(schema_hash))?;
    Ok(trainer::load_model(&RunDir::new(run_dir)?.best())?)
}

pub const METRICS_FILE: &str = "metrics.json";

pub fn eval(
    cfg: &PipelineConfig,
    corpus_dir: &Path,
    run_dir: &Path,
    out: &Path,
) -> Result<(MetricReport, RunManifest)> {
    let cd = open_corpus(corpus_dir)?;
    let model = open_run(run_dir, &cd.manifest.schema_hash)?;
    let part = cd.partition(&cfg.eval.partition)?;
    let report = eval::evaluate(&model, &part, cfg.eval.batch_size)?;
    create_dir(out)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    let mut m = RunManifest::begin("eval", serde_json::to_value(&cfg.eval)?, out)
        .input("corpus", corpus_dir)
        .input("run", run_dir);
    m.schema_hash = Some(cd.manifest.schema_hash);
    Ok((report, m.finish(&[METRICS_FILE.into()])?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    /// Independent over shared intermediate count at the largest N.
    pub ratio_at_max_n: Option<f64>,
    /// Linear fit of the shared count against N.
    pub shared_r2: Option<f64>,
    pub rows: Vec<eval::BenchRow>,
}

pub fn summarize_bench(rows: Vec<eval::BenchRow>) -> BenchSummary {
    use txn_foundry::objective::NegativeStrategy;
    let of = |s: NegativeStrategy| -> Vec<(usize, usize)> {
        rows.iter()
            .filter(|r| r.strategy == s)
            .map(|r| (r.n_negative, r.analytic_intermediate))
            .collect()
    };
    let shared = of(NegativeStrategy::Shared);
    let indep = of(NegativeStrategy::Independent);
    let ratio_at_max_n = shared.iter().map(|p| p.0).max().and_then(|n| {
        let s = shared.iter().find(|p| p.0 == n)?.1;
        let i = indep.iter().find(|p| p.0 == n)?.1;
        Some(i as f64 / s as f64)
    });
    let shared_r2 = (shared.len() >= 2).then(|| {
        let x: Vec<f64> = shared.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = shared.iter().map(|p| p.1 as f64).collect();
        eval::linear_r2(&x, &y)
    });
    BenchSummary {
        ratio_at_max_n,
        shared_r2,
        rows,
    }
}

pub fn bench_negatives(cfg: &PipelineConfig, out: &Path) -> Result<(BenchSummary, RunManifest)> {
    create_dir(out)?;
    let rows = eval::memory_benchmark(&cfg.bench)?;
    write_text(&out.join("bench.csv"), &eval::bench_csv(&rows))?;
    let summary = summarize_bench(rows);
    write_json(&out.join("bench.json"), &summary)?;
    let m = RunManifest::begin("bench-negatives", serde_json::to_value(&cfg.bench)?, out)
        .seed("bench", cfg.bench.seed);
    Ok((summary, m.finish(&["bench.csv".into(), "bench.json".into()])?))
}

pub fn scaling(cfg: &PipelineConfig, out: &Path) -> Result<(eval::ScalingReport, RunManifest)> {
    create_dir(out)?;
    let setup = ScalingSetup {
        world: &cfg.world,
        model: &cfg.model,
        train: &cfg.train,
        split: cfg.corpus.split()?,
    };
    let report = eval::scaling_study(&setup, cfg.scaling.axis, &cfg.scaling.sizes)?;
    write_text(&out.join("scaling.csv"), &eval::scaling_csv(&report))?;
    write_json(&out.join("scaling.json"), &report)?;
    let config = serde_json::json!({
        "world": cfg.world, "model": cfg.model, "train": cfg.train,
        "corpus": cfg.corpus, "scaling": cfg.scaling,
    });
    let m = RunManifest::begin("scaling", config, out)
        .seed("world", cfg.world.seed)
        .seed("train", cfg.train.seed);
    Ok((report, m.finish(&["scaling.csv".into(), "scaling.json".into()])?))
}

/// One table per categorical attribute plus a `card` table of last-step
/// hidden states. Merchant rows carry their planted country, city and
/// category; card rows carry their static attributes.
pub fn embedding_tables(
    model: &Model<f32>,
    train: &Corpus,
    truth: &GroundTruth,
    batch_size: usize,
) -> Result<Vec<Table>> {
    let schema = &model.schema;
    let mut tables = Vec::new();
    for a in schema.attributes.iter().filter(|a| a.is_categorical()) {
        let vocab = schema.vocabulary(&a.name)?;
        let vectors = model.export_embeddings(&a.name)?;
        let tokens: Vec<String> = (0..vectors.rows as u32).map(|i| vocab.label(i)).collect();
        let mut t = Table::new(&a.name, tokens.clone(), vectors)?;
        if a.name == "merchant" {
            let by_token: BTreeMap<&str, _> =
                truth.merchants.iter().map(|m| (m.merchant.as_str(), m)).collect();
            let col = |f: fn(&syngen::MerchantTruth) -> &str| -> Vec<String> {
                tokens
                    .iter()
                    .map(|tok| by_token.get(tok.as_str()).map_or("unknown", |m| f(m)).to_string())
                    .collect()
            };
            t = t
                .with_metadata("country", col(|m| &m.country))?
                .with_metadata("city", col(|m| &m.city))?
                .with_metadata("category", col(|m| &m.category))?;
        }
        tables.push(t);
    }
    let cards = rec::card_embeddings_at_cutoff(model, train, batch_size)?;
    let mut statics: BTreeMap<u64, &[u32]> = BTreeMap::new();
    for s in &train.sequences {
        statics.insert(s.card_id, &s.static_cat);
    }
    let tokens: Vec<String> = cards.card_ids.iter().map(|c| c.to_string()).collect();
    let mut t = Table::new("card", tokens, cards.vectors)?;
    for (i, name) in schema.layout().static_cat.iter().enumerate() {
        let vocab = schema.vocabulary(name)?;
        let values = cards
            .card_ids
            .iter()
            .map(|c| statics.get(c).map_or("unknown".into(), |v| vocab.label(v[i])))
            .collect();
        t = t.with_metadata(name, values)?;
    }
    tables.push(t);
    Ok(tables)
}

pub fn export_embeddings(
    cfg: &PipelineConfig,
    raw: &Path,
    corpus_dir: &Path,
    run_dir: &Path,
    out: &Path,
) -> Result<RunManifest> {
    RunManifest::upstream(raw, "generate", Some(&syngen::default_schema().hash()))?;
    let cd = open_corpus(corpus_dir)?;
    let model = open_run(run_dir, &cd.manifest.schema_hash)?;
    let truth: GroundTruth = read_json(&raw.join(TRUTH_FILE))?;
    let train = cd.partition("train")?;
    create_dir(out)?;
    let mut files = Vec::new();
    for t in embedding_tables(&model, &train, &truth, cfg.eval.batch_size)? {
        t.write(out)?;
        files.push(format!("{}.{}", t.attribute, embedsvc::store::TABLE_EXTENSION));
    }
    let mut m = RunManifest::begin("export-embeddings", serde_json::json!({}), out)
        .input("raw", raw)
        .input("corpus", corpus_dir)
        .input("run", run_dir);
    m.schema_hash = Some(cd.manifest.schema_hash);
    m.finish(&files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecRun {
    pub seed: u64,
    pub pretrained: TowerReport,
    pub scratch: TowerReport,
    /// Pretrained ≥ scratch on both HR and NDCG at the comparison K.
    pub pretrained_wins: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecSummary {
    pub compare_k: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub runs: Vec<RecRun>,
    pub wins: usize,
}

fn at_k(m: &[rec::RankMetric], k: usize) -> (f64, f64) {
    m.iter().find(|r| r.k == k).map_or((0.0, 0.0), |r| (r.hr, r.ndcg))
}

/// Both two-tower arms once per seed on the post-cutoff interactions of
/// `val` and `test`.
pub fn rec_compare(
    cfg: &PipelineConfig,
    model: &Model<f32>,
    parts: [&Corpus; 3],
    cutoff: i64,
    compare_k: usize,
) -> Result<RecSummary> {
    let [train, val, test] = parts;
    let merchant = &cfg.train.merchant_attribute;
    let all = rec::interactions_from(&[val, test], model, merchant)?;
    let set = InteractionSet::temporal(all, cutoff, cfg.rec.train_frac, cfg.rec.val_frac)?;
    let base = BaseTables {
        cards: rec::card_embeddings_at_cutoff(model, train, cfg.eval.batch_size)?,
        merchants: model.export_embeddings(merchant)?,
        pad: model.schema.vocabulary(merchant)?.pad_index(),
    };
    let mut runs = Vec::new();
    for &seed in &cfg.rec.seeds {
        let arm = |source| {
            let tc = rec::TowerConfig {
                source,
                seed,
                ..cfg.rec.tower.clone()
            };
            rec::train_two_tower(&set, &base, tc).map(|(_, r)| r)
        };
        let pretrained = arm(EmbeddingSource::PretrainedFrozen)?;
        let scratch = arm(EmbeddingSource::SupervisedScratch)?;
        let (ph, pn) = at_k(&pretrained.test, compare_k);
        let (sh, sn) = at_k(&scratch.test, compare_k);
        log::info!("rec seed {seed}: pretrained HR {ph:.4} NDCG {pn:.4}, scratch HR {sh:.4} NDCG {sn:.4}");
        runs.push(RecRun {
            seed,
            pretrained_wins: ph >= sh && pn >= sn,
            pretrained,
            scratch,
        });
    }
    Ok(RecSummary {
        compare_k,
        n_train: set.train.len(),
        n_val: set.val.len(),
        n_test: set.test.len(),
        wins: runs.iter().filter(|r| r.pretrained_wins).count(),
        runs,
    })
}

pub fn rec(
    cfg: &PipelineConfig,
    corpus_dir: &Path,
    run_dir: &Path,
    out: &Path,
    compare_k: usize,
) -> Result<(RecSummary, RunManifest)> {
    let cd = open_corpus(corpus_dir)?;
    let model = open_run(run_dir, &cd.manifest.schema_hash)?;
    let parts = [
        cd.partition("train")?,
        cd.partition("val")?,
        cd.partition("test")?,
    ];
    let summary = rec_compare(
        cfg,
        &model,
        [&parts[0], &parts[1], &parts[2]],
        cd.manifest.split.train_end,
        compare_k,
    )?;
    create_dir(out)?;
    write_json(&out.join("rec.json"), &summary)?;
    let mut m = RunManifest::begin("rec", serde_json::to_value(&cfg.rec)?, out)
        .input("corpus", corpus_dir)
        .input("run", run_dir);
    for s in &cfg.rec.seeds {
        m = m.seed(&format!("tower_{s}"), *s);
    }
    m.schema_hash = Some(cd.manifest.schema_hash);
    Ok((summary, m.finish(&["rec.json".into()])?))
}
