//! Two-tower retrieval on top of exported embeddings.
//!
//! Both arms share one architecture: a base table per tower followed by
//! projection layers, scored by a dot product and trained with the shared
//! InfoNCE kernel. The pretrained arm starts from the foundation model's
//! merchant table and last-step card embeddings and keeps them frozen; the
//! scratch arm draws its base tables at random and trains them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Corpus, CorpusLayout};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::objective::{negative_rng, sample_negatives};
use crate::tensor::{gemm, Matrix};

/// One observed (card, merchant) purchase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub card_id: u64,
    pub merchant: u32,
    pub timestamp: i64,
}

/// Interactions ordered by time and cut into train, validation and test.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionSet {
    /// Pre-training cutoff; every interaction is at or after it.
    pub cutoff: i64,
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl InteractionSet {
    /// Splits `all` by time at the given fractions of its length.
    pub fn temporal(
        mut all: Vec<Interaction>,
        cutoff: i64,
        train_frac: f64,
        val_frac: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&val_frac)
            || train_frac + val_frac > 1.0
        {
            return Err(Error::config(
                "interaction split",
                "fractions must lie in [0, 1] and sum to at most 1",
            ));
        }
        if let Some(i) = all.iter().find(|i| i.timestamp < cutoff) {
            return Err(Error::Invalid(format!(
                "interaction at {} precedes the pre-training cutoff {cutoff}",
                i.timestamp
            )));
        }
        all.sort_by_key(|i| (i.timestamp, i.card_id, i.merchant));
        let n = all.len();
        let a = (n as f64 * train_frac).round() as usize;
        let b = (a + (n as f64 * val_frac).round() as usize).min(n);
        let test = all.split_off(b);
        let val = all.split_off(a);
        Ok(InteractionSet {
            cutoff,
            train: all,
            val,
            test,
        })
    }
}

/// Merchant purchases at scored steps of the given partitions, which must
/// all lie after the pre-training cutoff.
pub fn interactions_from(
    parts: &[&Corpus],
    model: &Model<f32>,
    merchant_attr: &str,
) -> Result<Vec<Interaction>> {
    let col = model
        .schema
        .layout()
        .dyn_cat
        .iter()
        .position(|n| n == merchant_attr)
        .ok_or_else(|| Error::UnknownAttribute(merchant_attr.to_string()))?;
    let mut out = Vec::new();
    for corpus in parts {
        for s in &corpus.sequences {
            for j in s.target_from..s.len() {
                out.push(Interaction {
                    card_id: s.card_id,
                    merchant: s.dyn_cat_at(j)[col],
                    timestamp: s.timestamps[j],
                });
            }
        }
    }
    Ok(out)
}

/// Card ids with one embedding row each.
#[derive(Debug, Clone, PartialEq)]
pub struct CardEmbeddings {
    pub card_ids: Vec<u64>,
    pub vectors: Matrix<f32>,
}

/// Last-step hidden state of each card's latest training window.
pub fn card_embeddings_at_cutoff(
    model: &Model<f32>,
    train: &Corpus,
    batch_size: usize,
) -> Result<CardEmbeddings> {
    let mut latest: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, s) in train.sequences.iter().enumerate() {
        let e = latest.entry(s.card_id).or_insert(i);
        if s.timestamps.last() > train.sequences[*e].timestamps.last() {
            *e = i;
        }
    }
    let layout = CorpusLayout::new(&model.schema)?;
    let d = model.config.hidden_dim;
    let picked: Vec<(u64, usize)> = latest.into_iter().collect();
    let mut vectors = Matrix::zeros(picked.len(), d);
    for (c, chunk) in picked.chunks(batch_size.max(1)).enumerate() {
        let seqs: Vec<_> = chunk.iter().map(|&(_, i)| &train.sequences[i]).collect();
        let batch = Batch::from_sequences(&seqs, &layout);
        let mut g: Graph<f32> = Graph::new();
        let fwd = model.forward(&mut g, &batch)?;
        let h = model.card_embeddings(&mut g, &fwd, &batch);
        for r in 0..chunk.len() {
            vectors
                .row_mut(c * batch_size.max(1) + r)
                .copy_from_slice(h.row(r));
        }
    }
    Ok(CardEmbeddings {
        card_ids: picked.into_iter().map(|(id, _)| id).collect(),
        vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    PretrainedFrozen,
    SupervisedScratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TowerConfig {
    pub source: EmbeddingSource,
    pub projection_layers: usize,
    pub projection_dim: usize,
    pub n_negative: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            source: EmbeddingSource::PretrainedFrozen,
            projection_layers: 1,
            projection_dim: 32,
            n_negative: 256,
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: 256,
            ks: vec![1, 5, 10, 20],
            seed: 0,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("projection_layers", self.projection_layers),
            ("projection_dim", self.projection_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be >= 1"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if self.ks.iter().any(|&k| k == 0) {
            return Err(Error::config("ks", "K values must be >= 1"));
        }
        Ok(())
    }
}

/// Base tables the towers start from.
#[derive(Debug, Clone)]
pub struct BaseTables {
    pub cards: CardEmbeddings,
    /// Merchant table indexed by vocabulary id.
    pub merchants: Matrix<f32>,
    /// Vocabulary index excluded from ranking.
    pub pad: u32,
}

#[derive(Debug, Clone)]
pub struct TwoTower {
    pub config: TowerConfig,
    card_index: BTreeMap<u64, usize>,
    /// `[n_cards + 1 × d_card]`; the final row serves unknown cards.
    pub card_base: Matrix<f32>,
    pub merchant_base: Matrix<f32>,
    pub card_proj: Vec<(Matrix<f32>, Matrix<f32>)>,
    pub merchant_proj: Vec<(Matrix<f32>, Matrix<f32>)>,
    pad: u32,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
    let n = Normal::new(0.0, std).expect("std");
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| n.sample(rng) as f32).collect(),
    )
}

fn projection(
    rng: &mut ChaCha8Rng,
    input: usize,
    layers: usize,
    dim: usize,
) -> Vec<(Matrix<f32>, Matrix<f32>)> {
    (0..layers)
        .map(|l| {
            let fan_in = if l == 0 { input } else { dim };
            (
                normal_matrix(rng, fan_in, dim, 1.0 / (fan_in as f64).sqrt()),
                Matrix::zeros(1, dim),
            )
        })
        .collect()
}

impl TwoTower {
    /// Builds either arm over the shapes of `base`. Projection weights are
    /// drawn from the same seed for both arms.
    pub fn new(base: &BaseTables, config: TowerConfig) -> Result<Self> {
        config.validate()?;
        let dc = base.cards.vectors.cols;
        let dm = base.merchants.cols;
        let n = base.cards.card_ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let card_proj = projection(
            &mut rng,
            dc,
            config.projection_layers,
            config.projection_dim,
        );
        let merchant_proj = projection(
            &mut rng,
            dm,
            config.projection_layers,
            config.projection_dim,
        );
        let (card_base, merchant_base) = match config.source {
            EmbeddingSource::PretrainedFrozen => {
                let mut cb = Matrix::zeros(n + 1, dc);
                cb.data[..n * dc].copy_from_slice(&base.cards.vectors.data);
                (cb, base.merchants.clone())
            }
            EmbeddingSource::SupervisedScratch => {
                let mut brng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba5e);
                (
                    normal_matrix(&mut brng, n + 1, dc, 1.0 / (dc as f64).sqrt()),
                    normal_matrix(&mut brng, base.merchants.rows, dm, 1.0 / (dm as f64).sqrt()),
                )
            }
        };
        Ok(TwoTower {
            card_index: base
                .cards
                .card_ids
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, i))
                .collect(),
            card_base,
            merchant_base,
            card_proj,
            merchant_proj,
            pad: base.pad,
            config,
        })
    }

    pub fn n_merchants(&self) -> usize {
        self.merchant_base.rows
    }

    fn card_row(&self, card: u64) -> u32 {
        self.card_index
            .get(&card)
            .copied()
            .unwrap_or(self.card_base.rows - 1) as u32
    }

    fn frozen(&self) -> bool {
        self.config.source == EmbeddingSource::PretrainedFrozen
    }

    fn tower(
        g: &mut Graph<f32>,
        mut x: crate::graph::Var,
        layers: &[(crate::graph::Var, crate::graph::Var)],
    ) -> crate::graph::Var {
        for (l, &(w, b)) in layers.iter().enumerate() {
            x = g.linear(x, w, b);
            if l + 1 < layers.len() {
                x = g.gelu(x);
            }
        }
        x
    }

    /// Card tower outputs `[cards × p]` and merchant tower outputs `[C × p]`.
    pub fn encode(&self, cards: &[u64]) -> Result<(Matrix<f32>, Matrix<f32>)> {
        let mut g: Graph<f32> = Graph::new();
        let cp: Vec<_> = self
            .card_proj
            .iter()
            .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
            .collect();
        let mp: Vec<_> = self
            .merchant_proj
            .iter()
            .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
            .collect();
        let cb = g.leaf(self.card_base.clone());
        let mb = g.leaf(self.merchant_base.clone());
        let rows = g.gather(cb, cards.iter().map(|&c| self.card_row(c)).collect())?;
        let u = Self::tower(&mut g, rows, &cp);
        let m = Self::tower(&mut g, mb, &mp);
        Ok((g.value(u).clone(), g.value(m).clone()))
    }

    /// Scores of every merchant for each card, `[cards × C]`.
    pub fn score(&self, cards: &[u64]) -> Result<Matrix<f32>> {
        let (u, m) = self.encode(cards)?;
        let mut s = Matrix::zeros(u.rows, m.rows);
        gemm(1.0, &u, false, &m, true, 0.0, &mut s);
        Ok(s)
    }

    /// One optimizer step over a batch of interactions; returns the loss.
    fn step(&mut self, batch: &[Interaction], adam: &mut Adam, stream: u64) -> Result<f64> {
        let mut g: Graph<f32> = Graph::new();
        let cp: Vec<_> = self
            .card_proj
            .iter()
            .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
            .collect();
        let mp: Vec<_> = self
            .merchant_proj
            .iter()
            .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
            .collect();
        let cb = g.leaf(self.card_base.clone());
        let mb = g.leaf(self.merchant_base.clone());
        let rows = g.gather(cb, batch.iter().map(|i| self.card_row(i.card_id)).collect())?;
        let u = Self::tower(&mut g, rows, &cp);
        let m = Self::tower(&mut g, mb, &mp);
        let mut rng = negative_rng(self.config.seed, stream);
        let neg = sample_negatives(self.n_merchants(), self.config.n_negative, &mut rng);
        let y: Vec<u32> = batch.iter().map(|i| i.merchant).collect();
        let loss = g.shared_nce(u, m, y, vec![true; batch.len()], batch.len(), &neg, true)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                attribute: "two_tower".into(),
                epoch: 0,
                step: stream as usize,
            });
        }
        let mut grads = g.backward(loss)?;
        let mut vars: Vec<crate::graph::Var> = Vec::new();
        for &(w, b) in cp.iter().chain(&mp) {
            vars.push(w);
            vars.push(b);
        }
        if !self.frozen() {
            vars.push(cb);
            vars.push(mb);
        }
        let gs: Vec<Option<Matrix<f32>>> = vars.iter().map(|&v| grads.take(v)).collect();
        let mut params: Vec<&mut Matrix<f32>> = Vec::new();
        for (w, b) in self
            .card_proj
            .iter_mut()
            .chain(self.merchant_proj.iter_mut())
        {
            params.push(w);
            params.push(b);
        }
        if self.config.source != EmbeddingSource::PretrainedFrozen {
            params.push(&mut self.card_base);
            params.push(&mut self.merchant_base);
        }
        adam.update(&mut params, &gs, self.config.learning_rate);
        Ok(value)
    }
}

/// Plain Adam over a fixed parameter list.
struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [&mut Matrix<f32>], grads: &[Option<Matrix<f32>>], lr: f64) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            for j in 0..p.data.len() {
                let gj = g.data[j];
                self.m[i][j] = B1 * self.m[i][j] + (1.0 - B1) * gj;
                self.v[i][j] = B2 * self.v[i][j] + (1.0 - B2) * gj * gj;
                let mh = self.m[i][j] / c1;
                let vh = self.v[i][j] / c2;
                p.data[j] -= lr as f32 * mh / (vh.sqrt() + 1e-8);
            }
        }
    }
}

/// HR@K and NDCG@K at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetric {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// 1-based rank of `target` among candidates `0..scores.len()` except
/// `exclude`, ordered by descending score with ties going to the lower
/// index.
pub fn rank_of(scores: &[f32], target: usize, exclude: Option<usize>) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && Some(j) != exclude && (s > st || (s == st && j < target)))
        .count()
}

/// HR@K and NDCG@K from 1-based ranks.
pub fn hr_ndcg(ranks: &[usize], ks: &[usize]) -> Vec<RankMetric> {
    let n = ranks.len().max(1) as f64;
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k);
            let hr = hits.clone().count() as f64 / n;
            let ndcg = hits.map(|&r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / n;
            RankMetric { k, hr, ndcg }
        })
        .collect()
}

/// Ranks each interaction's merchant among the full merchant vocabulary.
pub fn rank_interactions(model: &TwoTower, set: &[Interaction]) -> Result<Vec<usize>> {
    let mut ranks = Vec::with_capacity(set.len());
    for chunk in set.chunks(256) {
        let cards: Vec<u64> = chunk.iter().map(|i| i.card_id).collect();
        let s = model.score(&cards)?;
        for (r, it) in chunk.iter().enumerate() {
            ranks.push(rank_of(
                s.row(r),
                it.merchant as usize,
                Some(model.pad as usize),
            ));
        }
    }
    Ok(ranks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerReport {
    pub source: EmbeddingSource,
    pub epoch_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub val: Vec<RankMetric>,
    pub test: Vec<RankMetric>,
}

fn ndcg_at(metrics: &[RankMetric], k: usize) -> f64 {
    metrics.iter().find(|m| m.k == k).map_or(0.0, |m| m.ndcg)
}

/// Trains one arm, keeping the epoch with the best validation NDCG at the
/// largest K, and reports validation and test metrics.
pub fn train_two_tower(
    set: &InteractionSet,
    base: &BaseTables,
    config: TowerConfig,
) -> Result<(TwoTower, TowerReport)> {
    let mut model = TwoTower::new(base, config)?;
    let cfg = model.config.clone();
    let k_sel = cfg.ks.iter().copied().max().unwrap_or(10);
    let mut sizes: Vec<usize> = model
        .card_proj
        .iter()
        .chain(&model.merchant_proj)
        .flat_map(|(w, b)| [w.data.len(), b.data.len()])
        .collect();
    if !model.frozen() {
        sizes.push(model.card_base.data.len());
        sizes.push(model.merchant_base.data.len());
    }
    let mut adam = Adam::new(&sizes);
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    let mut best = model.clone();
    let mut best_val = hr_ndcg(&rank_interactions(&model, &set.val)?, &cfg.ks);
    let mut best_epoch = None;
    let mut epoch_losses = Vec::new();
    let mut stream = 0u64;
    for epoch in 0..cfg.epochs {
        if set.train.is_empty() {
            break;
        }
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add(epoch as u64),
        ));
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Interaction> = chunk.iter().map(|&i| set.train[i]).collect();
            sum += model.step(&batch, &mut adam, stream)?;
            stream += 1;
            steps += 1;
        }
        epoch_losses.push(sum / steps as f64);
        let val = hr_ndcg(&rank_interactions(&model, &set.val)?, &cfg.ks);
        if set.val.is_empty()
            || ndcg_at(&val, k_sel) > ndcg_at(&best_val, k_sel)
            || best_epoch.is_none()
        {
            best_val = val;
            best = model.clone();
            best_epoch = Some(epoch);
        }
    }
    let test = hr_ndcg(&rank_interactions(&best, &set.test)?, &cfg.ks);
    Ok((
        best,
        TowerReport {
            source: cfg.source,
            epoch_losses,
            best_epoch,
            val: best_val,
            test,
        },
    ))
}
