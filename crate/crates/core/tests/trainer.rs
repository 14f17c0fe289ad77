use std::collections::BTreeMap;

use txn_foundry::corpus::{build_corpus, BuiltCorpus, CorpusLayout, TemporalSplit};
use txn_foundry::model::{Model, ModelConfig};
use txn_foundry::objective::{AggregationMode, NegativeSamplingPlan};
use txn_foundry::syngen::{default_schema, generate, WorldConfig};
use txn_foundry::trainer::{
    self, load_checkpoint, load_model, save_checkpoint, train_epochs, RunDir, TaskMode,
    TrainConfig, TrainState,
};
use txn_foundry::Error;

fn tiny_corpus(n_cards: usize) -> BuiltCorpus {
    let world = WorldConfig {
        n_cards,
        n_merchants: 200,
        n_countries: 4,
        n_categories: 6,
        n_cities: 8,
        time_span_days: 12 * 30,
        abnormal_rate: 0.05,
        seed: 11,
        mean_transactions_per_card: 20.0,
        travel_rate: 0.03,
    };
    let schema = default_schema();
    let records = generate(&world, &schema).unwrap();
    build_corpus(
        &records,
        &schema,
        TemporalSplit::months(10, 1, 1).unwrap(),
        32,
    )
    .unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        n_layers: 1,
        n_heads: 2,
        input_module_layers: 1,
        numeric_dim: 4,
        embedding_dims: BTreeMap::new(),
        max_seq_len: 32,
        init_seed: 3,
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 3e-3,
        batch_size: 16,
        eval_batch_size: 32,
        negatives: NegativeSamplingPlan::shared(32, 5),
        seed: 9,
        ..TrainConfig::default()
    }
}

fn params_equal(a: &Model<f32>, b: &Model<f32>) -> bool {
    a.params
        .iter()
        .zip(b.params.iter())
        .all(|((na, ta), (nb, tb))| {
            na == nb
                && ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[test]
fn one_epoch_on_ten_batches_takes_ten_steps() {
    let c = tiny_corpus(100);
    let layout = CorpusLayout::new(&c.schema).unwrap();
    let bs = c.train.len().div_ceil(10);
    assert_eq!(c.train.batches(&layout, bs, 0, 0).count(), 10);
    let mut cfg = tiny_train(1);
    cfg.batch_size = bs;
    let state = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();
    assert_eq!(state.optimizer.step, 10);
    assert_eq!(state.history.len(), 1);
    assert_eq!(state.history[0].steps, 10);
}

#[test]
fn fixed_seed_reproduces_metrics_bit_for_bit() {
    let c = tiny_corpus(60);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let run = RunDir::new(&dir.path().join(format!("r{i}"))).unwrap();
        trainer::train(
            &c.schema,
            &tiny_model(),
            &tiny_train(2),
            &c.train,
            &c.val,
            Some(&run),
        )
        .unwrap();
        files.push(std::fs::read(run.metrics()).unwrap());
    }
    assert!(!files[0].is_empty());
    assert_eq!(files[0], files[1]);
}

#[test]
fn training_loss_decreases_over_twenty_epochs() {
    let c = tiny_corpus(100);
    let cfg = tiny_train(20);
    let state = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();
    assert_eq!(state.history.len(), 20);
    let first = state.history[0].train_aggregate;
    let last = state.history[19].train_aggregate;
    assert!(last < first, "first {first} last {last}");
    for rec in &state.history {
        for (_, name, _) in state.model.targets() {
            assert!(rec.train_losses.contains_key(&name), "missing {name}");
            assert!(rec.val_losses.contains_key(&name), "missing {name}");
        }
    }
}

#[test]
fn resume_for_zero_epochs_keeps_parameters() {
    let c = tiny_corpus(40);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(1);
    let state = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();
    let path = dir.path().join("last.ckpt");
    save_checkpoint(&path, &state, &cfg).unwrap();
    let (mut resumed, rcfg) = load_checkpoint(&path, &c.schema.hash()).unwrap();
    assert_eq!(rcfg, cfg);
    train_epochs(&mut resumed, &c.train, &c.val, &cfg, 0, None).unwrap();
    assert!(params_equal(&resumed.model, &state.model));
    assert!(params_equal(&resumed.best, &state.best));
    assert_eq!(resumed.optimizer, state.optimizer);
    assert_eq!(resumed.history, state.history);
}

#[test]
fn train_then_resume_equals_uninterrupted_run() {
    let c = tiny_corpus(40);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(3);
    let full = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();

    let mut part = TrainState::new(Model::new(tiny_model(), c.schema.clone()).unwrap());
    train_epochs(&mut part, &c.train, &c.val, &cfg, 2, None).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &part, &cfg).unwrap();
    let (mut resumed, _) = load_checkpoint(&path, &c.schema.hash()).unwrap();
    train_epochs(&mut resumed, &c.train, &c.val, &cfg, 1, None).unwrap();

    assert!(params_equal(&resumed.model, &full.model));
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.best_epoch, full.best_epoch);
}

#[test]
fn resume_with_another_seed_diverges_but_stays_valid() {
    let c = tiny_corpus(40);
    let cfg = tiny_train(2);
    let full = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();
    let mut part = TrainState::new(Model::new(tiny_model(), c.schema.clone()).unwrap());
    train_epochs(&mut part, &c.train, &c.val, &cfg, 1, None).unwrap();
    let other = TrainConfig { seed: 1234, ..cfg };
    train_epochs(&mut part, &c.train, &c.val, &other, 1, None).unwrap();
    assert!(!params_equal(&part.model, &full.model));
    assert!(part.history.iter().all(|r| r.selection_metric.is_finite()));
}

#[test]
fn resume_refuses_a_different_schema() {
    let c = tiny_corpus(30);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(1);
    let state = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();
    let path = dir.path().join("last.ckpt");
    save_checkpoint(&path, &state, &cfg).unwrap();
    match load_checkpoint(&path, "0000") {
        Err(Error::SchemaHashMismatch { .. }) => {}
        other => panic!("expected hash mismatch, got {other:?}"),
    }
}

#[test]
fn run_dir_checkpoints_are_loadable() {
    let c = tiny_corpus(30);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path()).unwrap();
    let state = trainer::train(
        &c.schema,
        &tiny_model(),
        &tiny_train(2),
        &c.train,
        &c.val,
        Some(&run),
    )
    .unwrap();
    let best = load_model(&run.best()).unwrap();
    assert!(params_equal(&best, &state.best));
    let lines = std::fs::read_to_string(run.metrics()).unwrap();
    let epochs = lines
        .lines()
        .filter(|l| l.contains("\"type\":\"epoch\""))
        .count();
    assert_eq!(epochs, 2);
}

fn changed_params(before: &Model<f32>, after: &Model<f32>) -> Vec<String> {
    before
        .params
        .iter()
        .zip(after.params.iter())
        .filter(|((_, a), (_, b))| a.data != b.data)
        .map(|((n, _), _)| n.to_string())
        .collect()
}

#[test]
fn single_purpose_modes_leave_other_heads_untouched() {
    let c = tiny_corpus(30);
    for (mode, kept) in [
        (TaskMode::MerchantOnly, "merchant"),
        (TaskMode::AbnormalOnly, "abnormal_flag"),
    ] {
        let cfg = TrainConfig {
            task_mode: mode,
            ..tiny_train(1)
        };
        let init = Model::new(tiny_model(), c.schema.clone()).unwrap();
        let state = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();
        let changed = changed_params(&init, &state.model);
        assert!(!changed.is_empty());
        for name in &changed {
            let is_head = name.starts_with("next.") || name.starts_with("cur.");
            if is_head {
                assert!(
                    name.contains(&format!(".{kept}.")),
                    "{mode:?} changed {name}"
                );
            }
        }
        let head_prefix = if mode == TaskMode::MerchantOnly {
            "next.merchant."
        } else {
            "cur.abnormal_flag."
        };
        assert!(
            changed.iter().any(|n| n.starts_with(head_prefix)),
            "{mode:?}: {changed:?}"
        );
        assert_eq!(state.history[0].selection_attribute, kept);
    }
}

#[test]
fn non_finite_loss_names_the_attribute() {
    let c = tiny_corpus(30);
    let mut model = Model::new(tiny_model(), c.schema.clone()).unwrap();
    let id = model
        .params
        .id("next.channel.w")
        .expect("channel head weight");
    model.params.by_id_mut(id).data[0] = f32::NAN;
    let mut state = TrainState::new(model);
    match train_epochs(&mut state, &c.train, &c.val, &tiny_train(1), 1, None) {
        Err(Error::NonFiniteLoss {
            attribute,
            epoch,
            step,
        }) => {
            assert_eq!(attribute, "channel");
            assert_eq!((epoch, step), (0, 0));
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn aggregation_modes_all_train() {
    let c = tiny_corpus(30);
    for mode in [
        AggregationMode::Treasure,
        AggregationMode::Simple,
        AggregationMode::Equal,
    ] {
        let cfg = TrainConfig {
            aggregation_mode: mode,
            ..tiny_train(1)
        };
        let s = trainer::train(&c.schema, &tiny_model(), &cfg, &c.train, &c.val, None).unwrap();
        assert!(s.history[0].train_aggregate.is_finite());
    }
}

#[test]
fn invalid_config_names_the_field() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    match cfg.validate() {
        Err(Error::Config { field, .. }) => assert_eq!(field, "learning_rate"),
        other => panic!("{other:?}"),
    }
}
