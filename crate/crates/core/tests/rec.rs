use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use txn_foundry::corpus::{build_corpus, TemporalSplit};
use txn_foundry::model::{Model, ModelConfig};
use txn_foundry::objective::NegativeSamplingPlan;
use txn_foundry::rec::{
    card_embeddings_at_cutoff, hr_ndcg, interactions_from, rank_interactions, train_two_tower,
    BaseTables, EmbeddingSource, InteractionSet, TowerConfig, TwoTower,
};
use txn_foundry::syngen::{default_schema, generate, WorldConfig};
use txn_foundry::tensor::Matrix;
use txn_foundry::trainer::{self, TrainConfig};

/// Sort-based ranking: stable descending order, ties keep index order.
fn brute_rank(scores: &[f32], target: usize, exclude: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| j != exclude).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.iter().position(|&j| j == target).unwrap() + 1
}

fn brute_metrics(ranks: &[usize], k: usize) -> (f64, f64) {
    let mut hr = 0.0;
    let mut ndcg = 0.0;
    for &r in ranks {
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / (r as f64 + 1.0).log2();
        }
    }
    (hr / ranks.len() as f64, ndcg / ranks.len() as f64)
}

fn random_base(rng: &mut ChaCha8Rng, n_cards: usize, c: usize, d: usize) -> BaseTables {
    let m = |rng: &mut ChaCha8Rng, r: usize| {
        Matrix::from_vec(r, d, (0..r * d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    };
    BaseTables {
        cards: txn_foundry::rec::CardEmbeddings {
            card_ids: (0..n_cards as u64).collect(),
            vectors: m(rng, n_cards),
        },
        merchants: m(rng, c),
        pad: (c - 1) as u32,
    }
}

#[test]
fn ranking_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = random_base(&mut rng, 12, 30, 6);
    let model = TwoTower::new(&base, TowerConfig::default()).unwrap();
    let set: Vec<_> = (0..60)
        .map(|i| txn_foundry::rec::Interaction {
            card_id: rng.random_range(0..14),
            merchant: rng.random_range(0..29),
            timestamp: i,
        })
        .collect();
    let ranks = rank_interactions(&model, &set).unwrap();
    let cards: Vec<u64> = set.iter().map(|i| i.card_id).collect();
    let scores = model.score(&cards).unwrap();
    for (r, it) in set.iter().enumerate() {
        assert_eq!(ranks[r], brute_rank(scores.row(r), it.merchant as usize, 29));
    }
    for m in hr_ndcg(&ranks, &[1, 3, 10]) {
        let (hr, ndcg) = brute_metrics(&ranks, m.k);
        assert!((m.hr - hr).abs() < 1e-12 && (m.ndcg - ndcg).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn metrics_monotone_in_k_and_ndcg_below_hr(ranks in prop::collection::vec(1usize..50, 1..100)) {
        let ks = [1, 2, 5, 10, 20, 50];
        let m = hr_ndcg(&ranks, &ks);
        for w in m.windows(2) {
            prop_assert!(w[1].hr >= w[0].hr && w[1].ndcg >= w[0].ndcg);
        }
        for r in &m {
            prop_assert!(r.ndcg <= r.hr + 1e-12);
        }
    }
}

#[test]
fn scratch_arm_without_training_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 201;
    let base = random_base(&mut rng, 50, c, 8);
    let test: Vec<_> = (0..4000)
        .map(|i| txn_foundry::rec::Interaction {
            card_id: rng.random_range(0..50),
            merchant: rng.random_range(0..(c - 1) as u32),
            timestamp: i,
        })
        .collect();
    let set = InteractionSet {
        cutoff: 0,
        train: Vec::new(),
        val: Vec::new(),
        test,
    };
    let cfg = TowerConfig {
        source: EmbeddingSource::SupervisedScratch,
        ks: vec![10],
        ..TowerConfig::default()
    };
    let (_, report) = train_two_tower(&set, &base, cfg).unwrap();
    let chance = 10.0 / (c - 1) as f64;
    let hr = report.test[0].hr;
    // binomial standard error at n = 4000 is under 0.004
    assert!((hr - chance).abs() < 0.02, "hr {hr} chance {chance}");
    assert!(report.epoch_losses.is_empty());
}

struct Pipeline {
    model: Model<f32>,
    set: InteractionSet,
    base: BaseTables,
}

fn pipeline() -> Pipeline {
    let world = WorldConfig {
        n_cards: 60,
        n_merchants: 120,
        n_countries: 3,
        n_categories: 4,
        n_cities: 6,
        time_span_days: 12 * 30,
        seed: 5,
        mean_transactions_per_card: 20.0,
        ..WorldConfig::default()
    };
    let schema = default_schema();
    let records = generate(&world, &schema).unwrap();
    let split = TemporalSplit::months(9, 1, 2).unwrap();
    let built = build_corpus(&records, &schema, split, 32).unwrap();
    let mc = ModelConfig {
        hidden_dim: 8,
        n_layers: 1,
        n_heads: 2,
        input_module_layers: 1,
        numeric_dim: 4,
        embedding_dims: BTreeMap::new(),
        max_seq_len: 32,
        init_seed: 4,
    };
    let tc = TrainConfig {
        epochs: 2,
        learning_rate: 3e-3,
        batch_size: 16,
        negatives: NegativeSamplingPlan::shared(16, 2),
        ..TrainConfig::default()
    };
    let state = trainer::train(&built.schema, &mc, &tc, &built.train, &built.val, None).unwrap();
    let model = state.best;
    let all = interactions_from(&[&built.val, &built.test], &model, "merchant").unwrap();
    assert!(all.iter().all(|i| i.timestamp >= split.train_end));
    let set = InteractionSet::temporal(all, split.train_end, 0.6, 0.2).unwrap();
    let cards = card_embeddings_at_cutoff(&model, &built.train, 16).unwrap();
    let vocab = model.schema.vocabulary("merchant").unwrap();
    let base = BaseTables {
        cards,
        merchants: model.export_embeddings("merchant").unwrap(),
        pad: vocab.pad_index(),
    };
    Pipeline { model, set, base }
}

#[test]
fn both_arms_score_every_pair_and_frozen_tables_stay_fixed() {
    let p = pipeline();
    assert_eq!(p.base.cards.vectors.cols, p.model.config.hidden_dim);
    for source in [EmbeddingSource::PretrainedFrozen, EmbeddingSource::SupervisedScratch] {
        let cfg = TowerConfig {
            source,
            epochs: 2,
            batch_size: 32,
            n_negative: 16,
            ..TowerConfig::default()
        };
        let before = TwoTower::new(&p.base, cfg.clone()).unwrap();
        let (after, report) = train_two_tower(&p.set, &p.base, cfg).unwrap();
        let cards: Vec<u64> = p.base.cards.card_ids.clone();
        let s = after.score(&cards).unwrap();
        assert_eq!((s.rows, s.cols), (cards.len(), p.base.merchants.rows));
        assert!(s.data.iter().all(|x| x.is_finite()));
        assert_eq!(report.test.len(), 4);
        assert_eq!(report.epoch_losses.len(), 2);
        let same = before.card_base.data == after.card_base.data
            && before.merchant_base.data == after.merchant_base.data;
        match source {
            EmbeddingSource::PretrainedFrozen => {
                assert!(same);
                assert_eq!(after.merchant_base.data, p.base.merchants.data);
            }
            EmbeddingSource::SupervisedScratch => assert!(!same),
        }
        assert_ne!(before.card_proj[0].0.data, after.card_proj[0].0.data);
    }
}

#[test]
fn card_readout_is_one_row_per_training_card() {
    let p = pipeline();
    let ids = &p.base.cards.card_ids;
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(p.base.cards.vectors.rows, ids.len());
    assert!(p.base.cards.vectors.data.iter().all(|x| x.is_finite()));
}
