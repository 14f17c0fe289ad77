//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any fails. Pass a substring to run a subset, e.g.
//! `cargo test -p txn-foundry-cli --test acceptance -- memory`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use txn_foundry::alloc_track::TrackingAllocator;
use txn_foundry::corpus::{build_corpus, Batch, BuiltCorpus, CorpusLayout, TemporalSplit};
use txn_foundry::eval::{self, BenchConfig, MetricReport};
use txn_foundry::graph::{Graph, Var};
use txn_foundry::model::{Model, ModelConfig};
use txn_foundry::objective::*;
use txn_foundry::schema::Schema;
use txn_foundry::syngen::{self, default_schema, GroundTruth, WorldConfig};
use txn_foundry::tensor::Matrix;
use txn_foundry::trainer::{self, TrainConfig};
use txn_foundry_cli::{stages, PipelineConfig};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

type Verdict = Result<String, String>;

fn check(pass: bool, detail: String) -> Verdict {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

// ---------------------------------------------------------------------------
// Loss oracles and equivalence
// ---------------------------------------------------------------------------

fn loss_oracles() -> Verdict {
    let target = (2.0 * std::f64::consts::PI).ln() / 2.0;
    let mut worst_nll = 0.0f64;
    for y in [-3.0, 0.0, 0.5, 7.25] {
        worst_nll = worst_nll.max((normal_nll(y, 1.0f64, y) - target).abs());
    }
    let mut worst_ce = 0.0f64;
    for c in [2usize, 3, 17, 1000] {
        let logits = Matrix::from_vec(2, c, vec![-0.8; 2 * c]);
        let (l, _) = loss_lcat(&logits, &[0, (c - 1) as u32], &[true; 2]).map_err(|e| e.to_string())?;
        worst_ce = worst_ce.max((l - (c as f64).ln()).abs());
    }
    let agg = aggregate_value(AggregationMode::Treasure, &[1.0, 0.5, 2.0], Some(0));
    let agg_err = (agg - 1.75).abs();
    check(
        worst_nll <= 1e-9 && worst_ce <= 1e-9 && agg_err <= 1e-9,
        format!("nll err {worst_nll:.1e}, uniform ce err {worst_ce:.1e}, aggregate {agg} (err {agg_err:.1e})"),
    )
}

fn softmax_ce(h: &[f64], e: &Matrix<f64>, y: usize) -> f64 {
    let z: Vec<f64> = (0..e.rows).map(|r| h.iter().zip(e.row(r)).map(|(a, b)| a * b).sum()).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
}

fn infonce_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let n = 150;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let card = rng.random_range(2..=512usize);
        let k = rng.random_range(1..=16usize);
        let e = random(card, k, 1.0, &mut rng);
        let h = random(1, k, 2.0, &mut rng);
        let y = rng.random_range(0..card as u32);
        let all: Vec<u32> = (0..card as u32).collect();
        let st = shared_infonce(&h, &e, &[y], &[true], 1, &all, true).map_err(|e| e.to_string())?;
        worst = worst.max((st.loss - softmax_ce(h.row(0), &e, y as usize)).abs());
    }
    check(worst <= 1e-6, format!("{n} instances, max |shared - softmax| {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn loss_grad_check(inputs: &[Matrix<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Matrix<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let o = build(&mut g, &vs);
        g.scalar(o)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let o = build(&mut g, &vs);
    let mut grads = g.backward(o).expect("backward");
    let mut worst = 0.0f64;
    for (k, v) in vs.iter().enumerate() {
        let an = grads.take(*v).unwrap_or_else(|| Matrix::zeros(inputs[k].rows, inputs[k].cols));
        for i in 0..inputs[k].len() {
            let h = 1e-6;
            let (mut up, mut down) = (inputs.to_vec(), inputs.to_vec());
            up[k].data[i] += h;
            down[k].data[i] -= h;
            worst = worst.max(rel_err(an.data[i], (eval(&up) - eval(&down)) / (2.0 * h)));
        }
    }
    worst
}

fn tiny_world() -> WorldConfig {
    WorldConfig {
        n_cards: 16,
        n_merchants: 30,
        n_countries: 3,
        n_categories: 4,
        n_cities: 6,
        time_span_days: 60,
        abnormal_rate: 0.2,
        seed: 5,
        mean_transactions_per_card: 9.0,
        travel_rate: 0.1,
    }
}

fn tiny_batches(max_len: usize, batch: usize) -> (Schema, Vec<Batch>) {
    let recs = syngen::generate(&tiny_world(), &default_schema()).unwrap();
    let split = TemporalSplit::new(40 * 86_400, 50 * 86_400, 60 * 86_400).unwrap();
    let built = build_corpus(&recs, &default_schema(), split, max_len).unwrap();
    let layout = CorpusLayout::new(&built.schema).unwrap();
    let out = built.train.ordered_batches(&layout, batch).collect();
    (built.schema, out)
}

fn tiny_model(max_len: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        n_layers: 1,
        n_heads: 2,
        input_module_layers: 1,
        numeric_dim: 4,
        max_seq_len: max_len,
        init_seed: 3,
        ..ModelConfig::default()
    }
}

fn model_loss(m: &Model<f64>, b: &Batch, plan: &NegativeSamplingPlan, coef: Option<&[f64]>) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let mut f = m.forward(&mut g, b).unwrap();
    let mut rng = negative_rng(11, 0);
    let losses = m.losses(&mut g, &mut f, b, plan, &mut rng, None).unwrap();
    let values: Vec<f64> = losses.iter().map(|(_, v)| g.scalar(*v)).collect();
    let c = coef.map(<[f64]>::to_vec).unwrap_or_else(|| {
        let p = losses.iter().position(|(n, _)| *n == m.schema.pivot().name);
        aggregation_coefficients(AggregationMode::Treasure, &values, p)
    });
    (values.iter().zip(&c).map(|(v, c)| v * c).sum(), c)
}

fn model_grad_check(plan: NegativeSamplingPlan) -> (f64, usize) {
    let (schema, bs) = tiny_batches(4, 2);
    let b = bs.iter().find(|b| b.steps == 4 && b.size == 2).expect("a full 2x4 batch");
    let mut m: Model<f64> = Model::new(tiny_model(4), schema).unwrap();
    let (_, coef) = model_loss(&m, b, &plan, None);
    let mut g = Graph::new();
    let mut f = m.forward(&mut g, b).unwrap();
    let mut rng = negative_rng(11, 0);
    let losses = m.losses(&mut g, &mut f, b, &plan, &mut rng, None).unwrap();
    let total = g.weighted_sum(losses.iter().zip(&coef).map(|((_, v), &c)| (*v, c)).collect());
    let mut grads = g.backward(total).unwrap();
    let analytic: Vec<(usize, Vec<f64>)> =
        f.param_vars().filter_map(|(id, v)| grads.take(v).map(|gm| (id, gm.data))).collect();
    let (h, mut worst, mut n) = (1e-6, 0.0f64, 0);
    for (id, an) in &analytic {
        for (i, a) in an.iter().enumerate() {
            let orig = m.params.by_id(*id).data[i];
            m.params.by_id_mut(*id).data[i] = orig + h;
            let up = model_loss(&m, b, &plan, Some(&coef)).0;
            m.params.by_id_mut(*id).data[i] = orig - h;
            let down = model_loss(&m, b, &plan, Some(&coef)).0;
            m.params.by_id_mut(*id).data[i] = orig;
            worst = worst.max(rel_err(*a, (up - down) / (2.0 * h)));
            n += 1;
        }
    }
    (worst, n)
}

fn gradient_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (b, t, k, card) = (2, 4, 4, 40);
    let rows = b * t;
    let mask: Vec<bool> = (0..rows).map(|r| r != 2).collect();
    let y: Vec<u32> = (0..rows).map(|_| rng.random_range(0..card as u32)).collect();
    let h = random(rows, k, 1.0, &mut rng);
    let e = random(card, k, 1.0, &mut rng);
    let raw = random(rows, 2, 1.0, &mut rng);
    let yn: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..3.0)).collect();
    let logits = random(rows, 7, 2.0, &mut rng);
    let yc: Vec<u32> = y.iter().map(|v| v % 7).collect();
    let neg: Vec<u32> = (0..12).map(|_| rng.random_range(0..card as u32)).collect();
    let ineg: Vec<u32> = (0..rows * 5).map(|_| rng.random_range(0..card as u32)).collect();

    let mut errs: BTreeMap<&str, f64> = BTreeMap::new();
    errs.insert(
        "numerical",
        loss_grad_check(&[raw], &|g, v| {
            let ms = g.mu_sigma(v[0]);
            g.num_nll(ms, yn.clone(), mask.clone()).unwrap()
        }),
    );
    errs.insert(
        "low_cat",
        loss_grad_check(&[logits], &|g, v| g.cross_entropy(v[0], yc.clone(), mask.clone()).unwrap()),
    );
    errs.insert(
        "shared",
        loss_grad_check(&[h.clone(), e.clone()], &|g, v| {
            g.shared_nce(v[0], v[1], y.clone(), mask.clone(), b, &neg, false).unwrap()
        }),
    );
    errs.insert(
        "independent",
        loss_grad_check(&[h.clone(), e.clone()], &|g, v| {
            g.independent_nce(v[0], v[1], y.clone(), mask.clone(), &ineg, 5).unwrap()
        }),
    );
    errs.insert(
        "exhaustive",
        loss_grad_check(&[h, e], &|g, v| g.exhaustive_ce(v[0], v[1], y.clone(), mask.clone()).unwrap()),
    );
    let (ms, n1) = model_grad_check(NegativeSamplingPlan::shared(16, 0));
    let (mi, n2) = model_grad_check(NegativeSamplingPlan::independent(3, 0));
    errs.insert("model_shared", ms);
    errs.insert("model_independent", mi);
    let worst = errs.values().cloned().fold(0.0, f64::max);
    let detail: Vec<String> = errs.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    check(
        worst <= 1e-3,
        format!("max rel err {worst:.2e} ({}); model coordinates {}", detail.join(", "), n1 + n2),
    )
}

// ---------------------------------------------------------------------------
// Causality
// ---------------------------------------------------------------------------

fn head_outputs(m: &Model<f64>, b: &Batch) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let f = m.forward(&mut g, b).unwrap();
    f.heads.iter().map(|h| g.value(h.var).data.clone()).collect()
}

fn causality() -> Verdict {
    let (schema, bs) = tiny_batches(12, 3);
    let m: Model<f64> = Model::new(tiny_model(12), schema.clone()).unwrap();
    let l = schema.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let usable: Vec<&Batch> = bs.iter().filter(|b| b.steps >= 2).collect();
    let (mut probes, mut violations, mut inert) = (0, 0, 0);
    while probes < 1000 {
        let b = usable[rng.random_range(0..usable.len())];
        let i = rng.random_range(0..b.size);
        if b.lengths[i] < 2 {
            continue;
        }
        let j = rng.random_range(1..b.lengths[i]);
        let mut p = b.clone();
        let r = i * b.steps + j;
        for c in 0..b.widths.dyn_num {
            p.dyn_num[r * b.widths.dyn_num + c] += rng.random_range(1.0..500.0f32);
        }
        for c in 0..b.widths.dyn_cat {
            let card = schema.cardinality(&l.dyn_cat[c]).unwrap() as u32;
            let at = r * b.widths.dyn_cat + c;
            p.dyn_cat[at] = (p.dyn_cat[at] + rng.random_range(1..card)) % card;
        }
        let (before, after) = (head_outputs(&m, b), head_outputs(&m, &p));
        let mut changed = false;
        for (hb, ha) in before.iter().zip(&after) {
            let w = hb.len() / b.rows();
            for t in 0..b.steps {
                let rr = (i * b.steps + t) * w..(i * b.steps + t + 1) * w;
                let same = hb[rr.clone()].iter().zip(&ha[rr]).all(|(x, y)| x.to_bits() == y.to_bits());
                if t < j && !same {
                    violations += 1;
                }
                if t == j && !same {
                    changed = true;
                }
            }
        }
        if !changed {
            inert += 1;
        }
        probes += 1;
    }
    check(
        violations == 0 && inert == 0,
        format!("{probes} probes, {violations} earlier-step changes, {inert} probes without effect at the perturbed step"),
    )
}

// ---------------------------------------------------------------------------
// Memory benchmark
// ---------------------------------------------------------------------------

fn memory() -> Verdict {
    let cfg = BenchConfig {
        batch: 32,
        steps: 64,
        dim: 64,
        negatives: vec![64, 128, 256, 512, 1024],
        strategies: vec![NegativeStrategy::Shared, NegativeStrategy::Independent],
        execute: true,
        ..BenchConfig::default()
    };
    let s = stages::summarize_bench(eval::memory_benchmark(&cfg).map_err(|e| e.to_string())?);
    let ratio = s.ratio_at_max_n.unwrap_or(0.0);
    let r2 = s.shared_r2.unwrap_or(0.0);
    let peak = |st: NegativeStrategy| {
        s.rows
            .iter()
            .find(|r| r.strategy == st && r.n_negative == 1024)
            .and_then(|r| r.forward_peak_bytes)
    };
    let measured = match (peak(NegativeStrategy::Independent), peak(NegativeStrategy::Shared)) {
        (Some(i), Some(sh)) if sh > 0 => format!("{:.1}x", i as f64 / sh as f64),
        _ => "n/a".into(),
    };
    check(
        ratio >= 50.0 && r2 >= 0.99,
        format!("analytic ratio at N=1024 {ratio:.1}x, measured forward peak ratio {measured}, shared R^2 {r2:.6}"),
    )
}

// ---------------------------------------------------------------------------
// Learned models on the 10k-card world
// ---------------------------------------------------------------------------

const SEEDS: [u64; 3] = [0, 1, 2];

struct Trained {
    cfg: PipelineConfig,
    built: BuiltCorpus,
    truth: GroundTruth,
    /// Shared negatives, treasure aggregation; one model per seed.
    treasure: Vec<(Model<f32>, MetricReport)>,
    simple: Vec<(Model<f32>, MetricReport)>,
    /// Treasure aggregation with 5 negatives per positive.
    independent: Vec<MetricReport>,
    /// Simple-sum aggregation with 5 negatives per positive. Reported next
    /// to the gated comparison, never gated.
    simple_independent: Vec<MetricReport>,
}

fn run_config(base: &TrainConfig, seed: u64, mode: AggregationMode, plan: NegativeSamplingPlan) -> TrainConfig {
    TrainConfig {
        seed,
        aggregation_mode: mode,
        negatives: NegativeSamplingPlan { seed, ..plan },
        ..base.clone()
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = PipelineConfig::from_toml(include_str!("../../../configs/synthetic-10k.toml")).unwrap();
        cfg.validate().unwrap();
        let schema = default_schema();
        let records = syngen::generate(&cfg.world, &schema).unwrap();
        let split = cfg.corpus.split().unwrap();
        let built = build_corpus(&records, &schema, split, cfg.corpus.max_seq_len).unwrap();
        let truth = syngen::ground_truth(&cfg.world).unwrap();
        eprintln!(
            "world: {} transactions, {} train windows",
            records.len(),
            built.train.len()
        );
        let fit = |tc: TrainConfig, label: &str| {
            let t = Instant::now();
            let mc = ModelConfig {
                init_seed: tc.seed,
                ..cfg.model.clone()
            };
            let state = trainer::train(&built.schema, &mc, &tc, &built.train, &built.val, None).unwrap();
            let report = eval::evaluate(&state.best, &built.test, cfg.eval.batch_size).unwrap();
            eprintln!(
                "  {label} seed {}: merchant p@1 {:.4}, auc {:?}, amount smape {:?} ({:.0?})",
                tc.seed,
                report.prec_at_1.get("merchant").copied().unwrap_or(0.0),
                report.auc,
                report.smape.get("amount"),
                t.elapsed()
            );
            (state.best, report)
        };
        let plan = cfg.train.negatives;
        let independent_plan = NegativeSamplingPlan {
            strategy: NegativeStrategy::Independent,
            n_negative: 5,
            seed: 0,
        };
        let treasure = SEEDS
            .iter()
            .map(|&s| fit(run_config(&cfg.train, s, AggregationMode::Treasure, plan), "treasure/shared"))
            .collect();
        let simple = SEEDS
            .iter()
            .map(|&s| fit(run_config(&cfg.train, s, AggregationMode::Simple, plan), "simple/shared"))
            .collect();
        let independent = SEEDS
            .iter()
            .map(|&s| {
                fit(
                    run_config(&cfg.train, s, AggregationMode::Treasure, independent_plan),
                    "treasure/independent",
                )
                .1
            })
            .collect();
        let simple_independent = SEEDS
            .iter()
            .map(|&s| {
                fit(
                    run_config(&cfg.train, s, AggregationMode::Simple, independent_plan),
                    "simple/independent",
                )
                .1
            })
            .collect();
        Trained {
            cfg,
            built,
            truth,
            treasure,
            simple,
            independent,
            simple_independent,
        }
    })
}

fn p1(r: &MetricReport) -> f64 {
    r.prec_at_1.get("merchant").copied().unwrap_or(0.0)
}

fn learnability() -> Verdict {
    let t = trained();
    let chance = 1.0 / t.cfg.world.n_merchants as f64;
    let r = &t.treasure[0].1;
    let (p, auc, sm) = (p1(r), r.auc.unwrap_or(0.0), r.smape.get("amount").copied().unwrap_or(f64::INFINITY));
    let absolute = p >= 10.0 * chance && auc >= 0.80 && sm < 1.0;
    let wins: Vec<bool> = t
        .treasure
        .iter()
        .zip(&t.simple)
        .map(|((_, tr), (_, si))| tr.auc.unwrap_or(0.0) >= si.auc.unwrap_or(0.0))
        .collect();
    let n_wins = wins.iter().filter(|w| **w).count();
    let aucs = |rs: Vec<&MetricReport>| -> Vec<String> {
        rs.iter().map(|r| format!("{:.4}", r.auc.unwrap_or(0.0))).collect()
    };
    check(
        absolute && n_wins * 2 > wins.len(),
        format!(
            "seed 0: merchant p@1 {p:.4} (need >= {:.4}), auc {auc:.4} (need >= 0.80), amount smape {sm:.4} (need < 1); \
             treasure auc [{}] vs simple [{}]: treasure >= simple on {n_wins}/{}",
            10.0 * chance,
            aucs(t.treasure.iter().map(|x| &x.1).collect()).join(", "),
            aucs(t.simple.iter().map(|x| &x.1).collect()).join(", "),
            wins.len()
        ),
    )
}

fn shared_vs_independent() -> Verdict {
    let t = trained();
    let pairs = |shared: Vec<&MetricReport>, indep: &[MetricReport]| -> (usize, String) {
        let p: Vec<(f64, f64)> = shared.iter().zip(indep).map(|(s, i)| (p1(s), p1(i))).collect();
        let wins = p.iter().filter(|(s, i)| s >= i).count();
        let shown: Vec<String> = p.iter().map(|(s, i)| format!("{s:.4} vs {i:.4}")).collect();
        (wins, shown.join(", "))
    };
    let (wins, shown) = pairs(t.treasure.iter().map(|x| &x.1).collect(), &t.independent);
    let (simple_wins, simple_shown) = pairs(t.simple.iter().map(|x| &x.1).collect(), &t.simple_independent);
    check(
        wins >= 2,
        format!(
            "merchant p@1 shared(1024/batch) vs independent(5/positive): [{shown}], shared >= independent on {wins}/3; \
             not gated, same comparison under simple aggregation: [{simple_shown}], {simple_wins}/3"
        ),
    )
}

struct Structure {
    n: usize,
    probe: eval::ProbeResult,
    sil: eval::SilhouetteTest,
}

fn merchant_structure(model: &Model<f32>, truth: &GroundTruth) -> Result<Structure, String> {
    let vocab = model.schema.vocabulary("merchant").map_err(|e| e.to_string())?;
    let table = model.export_embeddings("merchant").map_err(|e| e.to_string())?;
    let index = |v: &mut Vec<String>, s: &str| match v.iter().position(|x| x == s) {
        Some(i) => i,
        None => {
            v.push(s.to_string());
            v.len() - 1
        }
    };
    let (mut cats, mut countries) = (Vec::new(), Vec::new());
    let (mut x, mut by_cat, mut by_country) = (Vec::new(), Vec::new(), Vec::new());
    for m in &truth.merchants {
        let row = vocab.lookup(&m.merchant);
        if row == vocab.oov_index() {
            continue;
        }
        x.push(table.row(row as usize).iter().map(|&v| v as f64).collect::<Vec<f64>>());
        by_cat.push(index(&mut cats, &m.category));
        by_country.push(index(&mut countries, &m.country));
    }
    Ok(Structure {
        n: x.len(),
        probe: eval::linear_probe(&x, &by_cat, 300, 0).map_err(|e| e.to_string())?,
        sil: eval::silhouette_vs_random(&x, &by_country, 100, 0),
    })
}

fn embedding_structure() -> Verdict {
    let t = trained();
    let s = merchant_structure(&t.treasure[0].0, &t.truth)?;
    let d = merchant_structure(&t.simple[0].0, &t.truth)?;
    let lift = s.probe.accuracy / s.probe.chance;
    check(
        lift >= 5.0 && s.sil.observed > s.sil.random_p95,
        format!(
            "{} merchants: category probe accuracy {:.3} = {lift:.1}x chance {:.3}; country silhouette {:.4} vs random p95 {:.4}; \
             not gated, simple-aggregation model: probe {:.1}x, silhouette {:.4} vs p95 {:.4}",
            s.n,
            s.probe.accuracy,
            s.probe.chance,
            s.sil.observed,
            s.sil.random_p95,
            d.probe.accuracy / d.probe.chance,
            d.sil.observed,
            d.sil.random_p95
        ),
    )
}

fn two_tower() -> Verdict {
    let t = trained();
    let split = t.cfg.corpus.split().map_err(|e| e.to_string())?;
    let s = stages::rec_compare(
        &t.cfg,
        &t.treasure[0].0,
        [&t.built.train, &t.built.val, &t.built.test],
        split.train_end,
        10,
    )
    .map_err(|e| e.to_string())?;
    let at10 = |m: &[txn_foundry::rec::RankMetric]| {
        m.iter().find(|r| r.k == 10).map_or((0.0, 0.0), |r| (r.hr, r.ndcg))
    };
    let shown: Vec<String> = s
        .runs
        .iter()
        .map(|r| {
            let (ph, pn) = at10(&r.pretrained.test);
            let (sh, sn) = at10(&r.scratch.test);
            format!("seed {}: HR {ph:.4}/{sh:.4} NDCG {pn:.4}/{sn:.4}", r.seed)
        })
        .collect();
    check(
        s.wins >= 2,
        format!(
            "{} test interactions, pretrained/scratch at K=10 [{}]; pretrained >= scratch on both in {}/{}",
            s.n_test,
            shown.join("; "),
            s.wins,
            s.runs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

fn pipeline(cfg: &PipelineConfig, root: &Path) -> txn_foundry_cli::Result<Vec<(String, Vec<u8>)>> {
    let (raw, corpus, run, ev, rec) = (
        root.join("raw"),
        root.join("corpus"),
        root.join("run"),
        root.join("eval"),
        root.join("rec"),
    );
    stages::generate(cfg, &raw)?;
    stages::build_corpus(cfg, &raw, &corpus)?;
    stages::train(cfg, &corpus, &run, false)?;
    stages::eval(cfg, &corpus, &run, &ev)?;
    stages::rec(cfg, &corpus, &run, &rec, 10)?;
    let mut out = Vec::new();
    for f in ["run/metrics.ndjson", "eval/metrics.json", "rec/rec.json", "run/best.ckpt"] {
        let bytes = std::fs::read(root.join(f)).map_err(|e| txn_foundry_cli::CliError::io(root.join(f), e))?;
        out.push((f.to_string(), bytes));
    }
    for stage in ["raw", "corpus", "run", "eval", "rec"] {
        let m = txn_foundry_cli::RunManifest::read(&root.join(stage))?;
        out.push((format!("{stage}/manifest artifacts"), serde_json::to_vec(&m.artifacts)?));
    }
    Ok(out)
}

fn determinism() -> Verdict {
    let cfg = PipelineConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let x = pipeline(&cfg, a.path()).map_err(|e| e.to_string())?;
    let y = pipeline(&cfg, b.path()).map_err(|e| e.to_string())?;
    let differing: Vec<&str> = x
        .iter()
        .zip(&y)
        .filter(|(p, q)| p.1 != q.1)
        .map(|(p, _)| p.0.as_str())
        .collect();
    check(
        differing.is_empty() && x.len() == y.len(),
        format!(
            "two runs of generate, build-corpus, train, eval, rec: {} files compared, differing: [{}]",
            x.len(),
            differing.join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("loss_unit_oracles", loss_oracles),
        ("infonce_equivalence", infonce_equivalence),
        ("gradient_checks", gradient_checks),
        ("causality", causality),
        ("memory_benchmark", memory),
        ("determinism", determinism),
        ("learnability", learnability),
        ("shared_vs_independent", shared_vs_independent),
        ("embedding_structure", embedding_structure),
        ("two_tower", two_tower),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
