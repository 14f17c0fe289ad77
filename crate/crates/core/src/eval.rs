//! Metrics, the negative-sampling memory benchmark, the scaling study and
//! embedding-structure probes.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc_track;
use crate::corpus::{build_corpus, Corpus, CorpusLayout, TemporalSplit};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{argmax, softmax, HeadScope, Model, ModelConfig};
use crate::objective::{
    independent_infonce, independent_infonce_backward, independent_intermediate_elements,
    resident_elements, sample_negatives, shared_infonce, shared_infonce_backward,
    shared_intermediate_elements, NegativeStrategy,
};
use crate::schema::AttributeClass;
use crate::syngen::{default_schema, generate, WorldConfig};
use crate::tensor::Matrix;
use crate::trainer::{self, TrainConfig};

/// Token of the pivot attribute counted as the positive class.
pub const ABNORMAL_TOKEN: &str = "1";

/// Fraction of positions whose prediction equals the truth.
pub fn prec_at_1(pred: &[usize], truth: &[u32]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return None;
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| p == t as usize)
        .count();
    Some(hits as f64 / pred.len() as f64)
}

/// Mean of `2·|ŷ−y| / (|ŷ|+|y|)`, with 0 where both are zero.
pub fn smape(pred: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return None;
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let den = p.abs() + t.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (p - t).abs() / den
            }
        })
        .sum();
    Some(s / pred.len() as f64)
}

/// Rank-based ROC-AUC with midranks for ties; `None` for a single class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    /// Full-vocabulary Prec@1 per categorical head.
    pub prec_at_1: BTreeMap<String, f64>,
    /// sMAPE of `exp(μ)` per numerical head.
    pub smape: BTreeMap<String, f64>,
    /// ROC-AUC of p(pivot = abnormal) on the current-signal head.
    pub auc: Option<f64>,
    pub pivot: String,
    /// Scored positions per head.
    pub counts: BTreeMap<String, usize>,
}

/// Evaluates every head on a partition.
pub fn evaluate(model: &Model<f32>, corpus: &Corpus, batch_size: usize) -> Result<MetricReport> {
    let layout = CorpusLayout::new(&model.schema)?;
    let pivot = model.schema.pivot().name.clone();
    let positive = model.schema.vocabulary(&pivot)?;
    let positive = positive
        .contains(ABNORMAL_TOKEN)
        .then(|| positive.lookup(ABNORMAL_TOKEN) as usize);
    let mut hits: BTreeMap<String, (Vec<usize>, Vec<u32>)> = BTreeMap::new();
    let mut nums: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for batch in corpus.ordered_batches(&layout, batch_size) {
        let mut g: Graph<f32> = Graph::new();
        let fwd = model.forward(&mut g, &batch)?;
        let w = batch.widths;
        for head in &fwd.heads {
            let col = head.column();
            let (mask, num, nw, cat, cw) = match head.scope {
                HeadScope::Next => (
                    &batch.next_mask,
                    &batch.next_num,
                    w.dyn_num,
                    &batch.next_cat,
                    w.dyn_cat,
                ),
                HeadScope::Current => (
                    &batch.cur_mask,
                    &batch.sig_num,
                    w.sig_num,
                    &batch.sig_cat,
                    w.sig_cat,
                ),
            };
            let truth_num = |r: usize| num[r * nw + col] as f64;
            let truth_cat = |r: usize| cat[r * cw + col];
            let rows: Vec<usize> = (0..batch.rows()).filter(|&r| mask[r]).collect();
            if rows.is_empty() {
                continue;
            }
            match head.class {
                AttributeClass::Numerical => {
                    let v = g.value(head.var);
                    let e = nums.entry(head.attribute.clone()).or_default();
                    for &r in &rows {
                        e.0.push((v.get(r, 0) as f64).exp());
                        e.1.push(truth_num(r));
                    }
                }
                _ => {
                    let logits = model.logits(&g, head)?;
                    let e = hits.entry(head.attribute.clone()).or_default();
                    for &r in &rows {
                        e.0.push(argmax(logits.row(r)));
                        e.1.push(truth_cat(r));
                    }
                    if head.attribute == pivot && head.scope == HeadScope::Current {
                        if let Some(p) = positive {
                            for &r in &rows {
                                scores.push(softmax(logits.row(r))[p] as f64);
                                labels.push(truth_cat(r) as usize == p);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut report = MetricReport {
        pivot,
        ..MetricReport::default()
    };
    for (k, (p, t)) in hits {
        report.counts.insert(k.clone(), p.len());
        if let Some(v) = prec_at_1(&p, &t) {
            report.prec_at_1.insert(k, v);
        }
    }
    for (k, (p, t)) in nums {
        report.counts.insert(k.clone(), p.len());
        if let Some(v) = smape(&p, &t) {
            report.smape.insert(k, v);
        }
    }
    report.auc = auc(&scores, &labels);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Memory benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
    pub cardinality: usize,
    pub negatives: Vec<usize>,
    pub strategies: Vec<NegativeStrategy>,
    /// Configurations whose analytic footprint exceeds this are skipped.
    pub memory_cap_bytes: usize,
    /// Run the kernels; analytic counts are always reported.
    pub execute: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 32,
            steps: 64,
            dim: 64,
            cardinality: 100_000,
            negatives: vec![64, 128, 256, 512, 1024],
            strategies: vec![NegativeStrategy::Shared, NegativeStrategy::Independent],
            memory_cap_bytes: 2 << 30,
            execute: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: NegativeStrategy,
    pub n_negative: usize,
    pub analytic_intermediate: usize,
    pub analytic_total: usize,
    /// Elements the kernel reported allocating.
    pub counted_intermediate: Option<usize>,
    pub forward_peak_bytes: Option<usize>,
    pub backward_peak_bytes: Option<usize>,
    pub forward_ms: Option<f64>,
    pub backward_ms: Option<f64>,
    /// `ok` or `exceeded`.
    pub status: String,
}

/// Runs the high-cardinality loss alone (forward and backward) over the
/// grid of strategies and negative counts.
pub fn memory_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let (b, t, k, c) = (cfg.batch, cfg.steps, cfg.dim, cfg.cardinality);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = b * t;
    let rand_matrix = |rng: &mut ChaCha8Rng, r: usize, cc: usize| {
        Matrix::from_vec(
            r,
            cc,
            (0..r * cc)
                .map(|_| rng.random_range(-0.1f32..0.1))
                .collect(),
        )
    };
    let h = rand_matrix(&mut rng, rows, k);
    let e = rand_matrix(&mut rng, c, k);
    let y: Vec<u32> = (0..rows).map(|_| rng.random_range(0..c as u32)).collect();
    let mask = vec![true; rows];
    let mut out = Vec::new();
    for &strategy in &cfg.strategies {
        for &n in &cfg.negatives {
            let inter = match strategy {
                NegativeStrategy::Shared => shared_intermediate_elements(b, t, n, k),
                NegativeStrategy::Independent => independent_intermediate_elements(b, t, n, k),
                NegativeStrategy::Exhaustive => rows * c,
            };
            let total = inter + resident_elements(b, t, k, c);
            let mut row = BenchRow {
                strategy,
                n_negative: n,
                analytic_intermediate: inter,
                analytic_total: total,
                counted_intermediate: None,
                forward_peak_bytes: None,
                backward_peak_bytes: None,
                forward_ms: None,
                backward_ms: None,
                status: "ok".into(),
            };
            // forward caches plus backward's same-sized gradient buffers
            if 2 * inter * std::mem::size_of::<f32>() > cfg.memory_cap_bytes {
                row.status = "exceeded".into();
                out.push(row);
                continue;
            }
            if cfg.execute && strategy != NegativeStrategy::Exhaustive {
                let count = if strategy == NegativeStrategy::Shared {
                    n
                } else {
                    n * rows
                };
                let neg = sample_negatives(c, count, &mut rng);
                match strategy {
                    NegativeStrategy::Shared => {
                        let t0 = Instant::now();
                        let (st, fpeak) = alloc_track::measure_peak(|| {
                            shared_infonce(&h, &e, &y, &mask, b, &neg, false)
                        });
                        let st = st?;
                        row.forward_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
                        let t1 = Instant::now();
                        let (_, bpeak) = alloc_track::measure_peak(|| {
                            shared_infonce_backward(&st, &h, &e, &y, &mask, 1.0)
                        });
                        row.backward_ms = Some(t1.elapsed().as_secs_f64() * 1e3);
                        row.counted_intermediate = Some(st.stats.intermediate_elements);
                        row.forward_peak_bytes = fpeak;
                        row.backward_peak_bytes = bpeak;
                    }
                    _ => {
                        let t0 = Instant::now();
                        let (st, fpeak) = alloc_track::measure_peak(|| {
                            independent_infonce(&h, &e, &y, &mask, &neg, n)
                        });
                        let st = st?;
                        row.forward_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
                        let t1 = Instant::now();
                        let (_, bpeak) = alloc_track::measure_peak(|| {
                            independent_infonce_backward(&st, &h, &e, &y, &mask, 1.0)
                        });
                        row.backward_ms = Some(t1.elapsed().as_secs_f64() * 1e3);
                        row.counted_intermediate = Some(st.stats.intermediate_elements);
                        row.forward_peak_bytes = fpeak;
                        row.backward_peak_bytes = bpeak;
                    }
                }
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (my + slope * (a - mx))).powi(2))
        .sum();
    1.0 - ss_res / syy
}

/// Bench rows as CSV.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let optf = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
    let mut s = String::from(
        "strategy,n_negative,analytic_intermediate,analytic_total,counted_intermediate,forward_peak_bytes,backward_peak_bytes,forward_ms,backward_ms,status\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            serde_json::to_value(r.strategy)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            r.n_negative,
            r.analytic_intermediate,
            r.analytic_total,
            opt(r.counted_intermediate),
            opt(r.forward_peak_bytes),
            opt(r.backward_peak_bytes),
            optf(r.forward_ms),
            optf(r.backward_ms),
            r.status
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Scaling study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingAxis {
    Cards,
    HiddenDim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub val_pivot_loss: f64,
    pub merchant_prec_at_1: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub axis: ScalingAxis,
    pub rows: Vec<ScalingRow>,
    /// Pivot loss never increases along the axis.
    pub pivot_loss_monotone: bool,
}

pub struct ScalingSetup<'a> {
    pub world: &'a WorldConfig,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub split: TemporalSplit,
}

/// Trains one model per point with fixed seeds and reports validation
/// metrics; rows follow the order of `sizes`.
pub fn scaling_study(
    setup: &ScalingSetup<'_>,
    axis: ScalingAxis,
    sizes: &[usize],
) -> Result<ScalingReport> {
    if sizes.len() < 3 {
        return Err(Error::config("sizes", "need at least 3 points"));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let mut world = setup.world.clone();
        let mut mc = setup.model.clone();
        match axis {
            ScalingAxis::Cards => world.n_cards = size,
            ScalingAxis::HiddenDim => mc.hidden_dim = size,
        }
        world.validate()?;
        let schema = default_schema();
        let records = generate(&world, &schema)?;
        let built = build_corpus(&records, &schema, setup.split, mc.max_seq_len)?;
        let state = trainer::train(
            &built.schema,
            &mc,
            setup.train,
            &built.train,
            &built.val,
            None,
        )?;
        let vl = trainer::validation_losses(&state.best, &built.val, setup.train.eval_batch_size)?;
        let report = evaluate(&state.best, &built.val, setup.train.eval_batch_size)?;
        rows.push(ScalingRow {
            size,
            val_pivot_loss: vl[&built.schema.pivot().name],
            merchant_prec_at_1: report
                .prec_at_1
                .get(&setup.train.merchant_attribute)
                .copied(),
            auc: report.auc,
        });
    }
    let pivot_loss_monotone = rows
        .windows(2)
        .all(|w| w[1].val_pivot_loss <= w[0].val_pivot_loss);
    Ok(ScalingReport {
        axis,
        rows,
        pivot_loss_monotone,
    })
}

pub fn scaling_csv(report: &ScalingReport) -> String {
    let o = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut s = String::from("size,val_pivot_loss,merchant_prec_at_1,auc\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.size,
            r.val_pivot_loss,
            o(r.merchant_prec_at_1),
            o(r.auc)
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Embedding structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub chance: f64,
    pub n_classes: usize,
    pub n_test: usize,
}

/// Multinomial logistic regression from rows of `x` to `labels`, trained on
/// a seeded 70% split and scored on the rest. Chance is `1 / n_classes`.
pub fn linear_probe(
    x: &[Vec<f64>],
    labels: &[usize],
    epochs: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if x.len() != labels.len() || x.len() < 4 {
        return Err(Error::Invalid(
            "probe needs at least 4 labelled rows".into(),
        ));
    }
    let d = x[0].len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (x.len() * 7) / 10;
    let (train, test) = order.split_at(n_train);
    // standardize with training statistics
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for c in 0..d {
            mean[c] += x[i][c] / n_train as f64;
        }
    }
    for &i in train {
        for c in 0..d {
            sd[c] += (x[i][c] - mean[c]).powi(2) / n_train as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let feat = |i: usize| -> Vec<f64> { (0..d).map(|c| (x[i][c] - mean[c]) / sd[c]).collect() };
    let xs: Vec<Vec<f64>> = (0..x.len()).map(feat).collect();
    let mut w = vec![vec![0.0; d + 1]; n_classes];
    let lr = 0.5;
    let l2 = 1e-3;
    for _ in 0..epochs {
        let mut grad = vec![vec![0.0; d + 1]; n_classes];
        for &i in train {
            let logits: Vec<f64> = w
                .iter()
                .map(|wc| wc[d] + (0..d).map(|c| wc[c] * xs[i][c]).sum::<f64>())
                .collect();
            let p = softmax(&logits);
            for k in 0..n_classes {
                let g = p[k] - if labels[i] == k { 1.0 } else { 0.0 };
                for c in 0..d {
                    grad[k][c] += g * xs[i][c];
                }
                grad[k][d] += g;
            }
        }
        for k in 0..n_classes {
            for c in 0..=d {
                let reg = if c < d { l2 * w[k][c] } else { 0.0 };
                w[k][c] -= lr * (grad[k][c] / n_train as f64 + reg);
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let logits: Vec<f64> = w
                .iter()
                .map(|wc| wc[d] + (0..d).map(|c| wc[c] * xs[i][c]).sum::<f64>())
                .collect();
            argmax(&logits) == labels[i]
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        chance: 1.0 / n_classes as f64,
        n_classes,
        n_test: test.len(),
    })
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton groups score 0.
pub fn silhouette(x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = x.len();
    let n_groups = labels.iter().max().map_or(0, |m| m + 1);
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = x[i]
                .iter()
                .zip(&x[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut sizes = vec![0usize; n_groups];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; n_groups];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i * n + j];
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..n_groups)
            .filter(|&g| g != labels[i] && sizes[g] > 0)
            .map(|g| sums[g] / sizes[g] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteTest {
    pub observed: f64,
    pub random_p95: f64,
    pub random_mean: f64,
}

/// Silhouette of the given grouping against `trials` random permutations
/// of the same labels.
pub fn silhouette_vs_random(
    x: &[Vec<f64>],
    labels: &[usize],
    trials: usize,
    seed: u64,
) -> SilhouetteTest {
    let observed = silhouette(x, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores: Vec<f64> = (0..trials)
        .map(|_| {
            let mut l = labels.to_vec();
            l.shuffle(&mut rng);
            silhouette(x, &l)
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let idx = ((trials as f64) * 0.95).ceil() as usize;
    SilhouetteTest {
        observed,
        random_p95: scores[idx.saturating_sub(1).min(trials - 1)],
        random_mean: scores.iter().sum::<f64>() / trials as f64,
    }
}
