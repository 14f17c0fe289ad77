use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use txn_foundry::corpus::{build_corpus, Batch, CorpusLayout, TemporalSplit};
use txn_foundry::graph::Graph;
use txn_foundry::model::{Model, ModelConfig};
use txn_foundry::objective::{aggregation_coefficients, negative_rng, AggregationMode, NegativeSamplingPlan};
use txn_foundry::schema::Schema;
use txn_foundry::syngen::{default_schema, generate, WorldConfig};

fn world() -> WorldConfig {
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

fn batches(max_len: usize, batch: usize) -> (Schema, Vec<Batch>) {
    let recs = generate(&world(), &default_schema()).unwrap();
    let split = TemporalSplit::new(40 * 86_400, 50 * 86_400, 60 * 86_400).unwrap();
    let built = build_corpus(&recs, &default_schema(), split, max_len).unwrap();
    let layout = CorpusLayout::new(&built.schema).unwrap();
    let out = built.train.ordered_batches(&layout, batch).collect();
    (built.schema, out)
}

fn tiny(max_len: usize) -> ModelConfig {
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

/// Aggregate loss with coefficients frozen at `coef` (they are detached).
fn total_loss(m: &Model<f64>, b: &Batch, plan: &NegativeSamplingPlan, coef: Option<&[f64]>) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let mut f = m.forward(&mut g, b).unwrap();
    let mut rng = negative_rng(11, 0);
    let losses = m.losses(&mut g, &mut f, b, plan, &mut rng, None).unwrap();
    let values: Vec<f64> = losses.iter().map(|(_, v)| g.scalar(*v)).collect();
    let c = match coef {
        Some(c) => c.to_vec(),
        None => {
            let p = losses.iter().position(|(n, _)| *n == m.schema.pivot().name);
            aggregation_coefficients(AggregationMode::Treasure, &values, p)
        }
    };
    (values.iter().zip(&c).map(|(v, c)| v * c).sum(), c)
}

fn check_model_gradients(plan: NegativeSamplingPlan) {
    let (schema, bs) = batches(4, 2);
    let b = bs.iter().find(|b| b.steps == 4 && b.size == 2).expect("a full 2x4 batch");
    let mut m: Model<f64> = Model::new(tiny(4), schema).unwrap();
    let (_, coef) = total_loss(&m, b, &plan, None);

    let mut g = Graph::new();
    let mut f = m.forward(&mut g, b).unwrap();
    let mut rng = negative_rng(11, 0);
    let losses = m.losses(&mut g, &mut f, b, &plan, &mut rng, None).unwrap();
    let total = g.weighted_sum(losses.iter().zip(&coef).map(|((_, v), &c)| (*v, c)).collect());
    let mut grads = g.backward(total).unwrap();
    let analytic: Vec<(usize, Vec<f64>)> =
        f.param_vars().filter_map(|(id, v)| grads.take(v).map(|gm| (id, gm.data))).collect();
    assert!(analytic.len() > 10);

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (id, an) in &analytic {
        for i in 0..an.len() {
            let orig = m.params.by_id(*id).data[i];
            m.params.by_id_mut(*id).data[i] = orig + h;
            let up = total_loss(&m, b, &plan, Some(&coef)).0;
            m.params.by_id_mut(*id).data[i] = orig - h;
            let down = total_loss(&m, b, &plan, Some(&coef)).0;
            m.params.by_id_mut(*id).data[i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (an[i] - num).abs() / an[i].abs().max(num.abs()).max(1e-6);
            assert!(rel <= 1e-3, "{}[{i}]: analytic {} numeric {num}", m.params.name(*id), an[i]);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-3);
}

#[test]
fn full_model_gradients_match_finite_differences_shared() {
    check_model_gradients(NegativeSamplingPlan::shared(16, 0));
}

#[test]
fn full_model_gradients_match_finite_differences_independent() {
    check_model_gradients(NegativeSamplingPlan::independent(3, 0));
}

fn head_outputs(m: &Model<f64>, b: &Batch) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let f = m.forward(&mut g, b).unwrap();
    f.heads.iter().map(|h| g.value(h.var).data.clone()).collect()
}

/// Changes every input attribute of sample `i` at step `j`.
fn perturb(b: &mut Batch, i: usize, j: usize, rng: &mut impl Rng, schema: &Schema) {
    let r = i * b.steps + j;
    let l = schema.layout();
    for c in 0..b.widths.dyn_num {
        b.dyn_num[r * b.widths.dyn_num + c] += rng.random_range(1.0..500.0f32);
    }
    for c in 0..b.widths.dyn_cat {
        let card = schema.cardinality(&l.dyn_cat[c]).unwrap() as u32;
        let old = b.dyn_cat[r * b.widths.dyn_cat + c];
        b.dyn_cat[r * b.widths.dyn_cat + c] = (old + rng.random_range(1..card)) % card;
    }
}

#[test]
fn thousand_perturbation_probes_respect_causality() {
    let (schema, bs) = batches(12, 3);
    let m: Model<f64> = Model::new(tiny(12), schema.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let usable: Vec<&Batch> = bs.iter().filter(|b| b.steps >= 2).collect();
    let mut probes = 0;
    while probes < 1000 {
        let b = usable[rng.random_range(0..usable.len())];
        let i = rng.random_range(0..b.size);
        let len = b.lengths[i];
        if len < 2 {
            continue;
        }
        let j = rng.random_range(1..len);
        let mut p = b.clone();
        perturb(&mut p, i, j, &mut rng, &schema);
        let before = head_outputs(&m, b);
        let after = head_outputs(&m, &p);
        let mut changed = false;
        for (hb, ha) in before.iter().zip(&after) {
            let w = hb.len() / b.rows();
            for t in 0..b.steps {
                let r = i * b.steps + t;
                let (x, y) = (&hb[r * w..(r + 1) * w], &ha[r * w..(r + 1) * w]);
                if t < j {
                    assert!(
                        x.iter().zip(y).all(|(a, c)| a.to_bits() == c.to_bits()),
                        "step {t} changed after perturbing step {j}"
                    );
                } else if t == j && x != y {
                    changed = true;
                }
            }
            // other samples are untouched
            for s in (0..b.size).filter(|&s| s != i) {
                let rows = s * b.steps * w..(s + 1) * b.steps * w;
                assert_eq!(&hb[rows.clone()], &ha[rows]);
            }
        }
        assert!(changed, "perturbing step {j} must reach step {j}");
        probes += 1;
    }
}

#[test]
fn weight_sharing_is_independent_of_sequence_length() {
    let (schema, _) = batches(4, 2);
    let short: Model<f32> = Model::new(tiny(4), schema.clone()).unwrap();
    let long: Model<f32> = Model::new(tiny(1024), schema).unwrap();
    let names = |m: &Model<f32>| -> Vec<(String, usize)> {
        m.params.iter().map(|(n, x)| (n.to_string(), x.len())).collect()
    };
    assert_eq!(names(&short), names(&long));
    assert!(short.params.iter().any(|(n, _)| n.starts_with("dynamic.")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn outputs_are_finite_and_sigma_positive(seed in 0u64..1000) {
        let (schema, bs) = batches(8, 4);
        let mut cfg = tiny(8);
        cfg.init_seed = seed;
        let m: Model<f32> = Model::new(cfg, schema).unwrap();
        let b = &bs[seed as usize % bs.len()];
        let mut g = Graph::new();
        let f = m.forward(&mut g, b).unwrap();
        for h in &f.heads {
            let v = g.value(h.var);
            prop_assert!(v.data.iter().all(|x| x.is_finite()));
            if h.class == txn_foundry::schema::AttributeClass::Numerical {
                prop_assert!(v.data.chunks(2).all(|c| c[1] > 0.0));
            }
        }
    }
}
