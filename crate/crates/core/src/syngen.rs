//! Deterministic synthetic transaction streams with planted structure.
//!
//! The world is a set of countries, cities, merchant categories and
//! merchants. Each merchant has one latent (country, city, category), each
//! card a home country/city, a few preferred categories and a small set of
//! favourite merchants it cycles through. Abnormal transactions are drawn
//! off-profile (foreign merchant, inflated amount) and drive the decline
//! signal, so every target has recoverable structure.
//!
//! Randomness comes from ChaCha8 streams: stream 0 builds the world, stream
//! `card_id + 1` drives one card. Cards are therefore independent and the
//! final stream is a deterministic merge by timestamp.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::schema::{AttributeSpec, CardinalityClass, Role, Schema, Scope, VocabPolicy};

pub const SECONDS_PER_DAY: i64 = 86_400;

pub const CARD_TIERS: [&str; 4] = ["classic", "gold", "platinum", "signature"];
const TIER_WEIGHTS: [f64; 4] = [0.5, 0.3, 0.15, 0.05];
const TIER_SHIFT: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
pub const CHANNELS: [&str; 3] = ["in_store", "contactless", "online"];
pub const APPROVE: &str = "00";
pub const DECLINE: &str = "05";

/// Attribute names the generator knows how to fill.
pub const GENERATED_ATTRIBUTES: [&str; 12] = [
    "issuer_country",
    "card_tier",
    "account_age_days",
    "merchant",
    "merchant_country",
    "merchant_city",
    "merchant_category",
    "channel",
    "amount",
    "time_gap",
    "response_code",
    "abnormal_flag",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_cards: usize,
    pub n_merchants: usize,
    pub n_countries: usize,
    pub n_categories: usize,
    pub n_cities: usize,
    pub time_span_days: u32,
    pub abnormal_rate: f64,
    pub seed: u64,
    #[serde(default = "default_mean_txn")]
    pub mean_transactions_per_card: f64,
    /// Share of normal transactions made while travelling abroad.
    #[serde(default = "default_travel_rate")]
    pub travel_rate: f64,
}

fn default_mean_txn() -> f64 {
    30.0
}

fn default_travel_rate() -> f64 {
    0.03
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_cards: 1_000,
            n_merchants: 2_000,
            n_countries: 12,
            n_categories: 12,
            n_cities: 48,
            time_span_days: 26 * 30,
            abnormal_rate: 0.05,
            seed: 7,
            mean_transactions_per_card: default_mean_txn(),
            travel_rate: default_travel_rate(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_cards", self.n_cards),
            ("n_merchants", self.n_merchants),
            ("n_countries", self.n_countries),
            ("n_categories", self.n_categories),
            ("n_cities", self.n_cities),
            ("time_span_days", self.time_span_days as usize),
        ];
        for (field, v) in positive {
            if v < 1 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.abnormal_rate) {
            return Err(Error::config("abnormal_rate", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.travel_rate) {
            return Err(Error::config("travel_rate", "must lie in [0, 1]"));
        }
        if self.mean_transactions_per_card.is_nan() || self.mean_transactions_per_card <= 0.0 {
            return Err(Error::config("mean_transactions_per_card", "must be > 0"));
        }
        if self.n_merchants < self.n_cities {
            return Err(Error::config("n_merchants", "must be >= n_cities"));
        }
        if self.n_merchants < self.n_categories {
            return Err(Error::config("n_merchants", "must be >= n_categories"));
        }
        if self.n_cities < self.n_countries {
            return Err(Error::config("n_cities", "must be >= n_countries"));
        }
        Ok(())
    }

    pub fn span_seconds(&self) -> i64 {
        self.time_span_days as i64 * SECONDS_PER_DAY
    }
}

/// The 3 static / 7 dynamic / 2 signal schema the generator fills by default.
pub fn default_schema() -> Schema {
    use Role::*;
    use Scope::*;
    let io = [Input, NextTarget];
    let attrs = vec![
        AttributeSpec::categorical("issuer_country", Static, &[Input]),
        AttributeSpec::categorical("card_tier", Static, &[Input]),
        AttributeSpec::numerical("account_age_days", Static, &[Input]),
        AttributeSpec::categorical("merchant", Dynamic, &io),
        AttributeSpec::categorical("merchant_country", Dynamic, &io),
        AttributeSpec::categorical("merchant_city", Dynamic, &io),
        AttributeSpec::categorical("merchant_category", Dynamic, &io),
        AttributeSpec::categorical("channel", Dynamic, &io),
        AttributeSpec::numerical("amount", Dynamic, &io),
        AttributeSpec::numerical("time_gap", Dynamic, &io),
        AttributeSpec::categorical("response_code", Dynamic, &[CurrentSignal]),
        AttributeSpec::categorical("abnormal_flag", Dynamic, &[CurrentSignal]).pivot(),
    ]
    .into_iter()
    .map(|a| {
        if a.is_categorical() {
            a.with_policy(VocabPolicy::default())
        } else {
            a
        }
    })
    .collect();
    Schema::new(attrs, CardinalityClass::default()).expect("default schema is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Num(f64),
    Cat(String),
}

impl RawValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            RawValue::Num(v) => Some(*v),
            RawValue::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            RawValue::Cat(s) => Some(s),
            RawValue::Num(_) => None,
        }
    }
}

/// One raw transaction record; `values` follow schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTransaction {
    pub card_id: u64,
    pub timestamp: i64,
    pub values: Vec<(String, RawValue)>,
}

impl RawTransaction {
    pub fn get(&self, name: &str) -> Option<&RawValue> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn abnormal(&self) -> Option<bool> {
        self.get("abnormal_flag")
            .and_then(RawValue::as_cat)
            .map(|s| s == "1")
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("card_id".into(), Value::from(self.card_id));
        m.insert("timestamp".into(), Value::from(self.timestamp));
        for (k, v) in &self.values {
            let v = match v {
                RawValue::Num(x) => Value::from(*x),
                RawValue::Cat(s) => Value::from(s.clone()),
            };
            m.insert(k.clone(), v);
        }
        Value::Object(m)
    }

    pub fn from_json(v: &Value, record: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Record {
            record: record.to_string(),
            reason: reason.to_string(),
        };
        let obj = v.as_object().ok_or_else(|| bad("not an object"))?;
        let card_id = obj
            .get("card_id")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing card_id"))?;
        let timestamp = obj
            .get("timestamp")
            .and_then(Value::as_i64)
            .ok_or_else(|| bad("missing timestamp"))?;
        let mut values = Vec::with_capacity(obj.len().saturating_sub(2));
        for (k, v) in obj {
            if k == "card_id" || k == "timestamp" {
                continue;
            }
            let rv = match v {
                Value::Number(n) => RawValue::Num(n.as_f64().ok_or_else(|| bad("bad number"))?),
                Value::String(s) => RawValue::Cat(s.clone()),
                _ => return Err(bad(&format!("field `{k}` has unsupported type"))),
            };
            values.push((k.clone(), rv));
        }
        Ok(RawTransaction {
            card_id,
            timestamp,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerchantTruth {
    pub merchant: String,
    pub country: String,
    pub city: String,
    pub category: String,
}

/// Planted merchant → (country, city, category) assignments, indexed by
/// merchant id. Evaluation only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub merchants: Vec<MerchantTruth>,
}

struct Category {
    token: String,
    log_mu: f64,
    log_sigma: f64,
    online_rate: f64,
}

struct Merchant {
    token: String,
    country: usize,
    city: usize,
    category: usize,
    popularity: f64,
}

struct World {
    countries: Vec<String>,
    cities: Vec<(String, usize)>,
    categories: Vec<Category>,
    merchants: Vec<Merchant>,
    country_weights: Vec<f64>,
}

fn world_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl World {
    fn build(config: &WorldConfig) -> World {
        let mut rng = world_rng(config.seed, 0);

        let mut codes: Vec<u32> = (4..=894).collect();
        codes.shuffle(&mut rng);
        let mut codes: Vec<u32> = if config.n_countries <= codes.len() {
            codes[..config.n_countries].to_vec()
        } else {
            (0..config.n_countries as u32).map(|i| 1000 + i).collect()
        };
        codes.sort_unstable();
        let countries: Vec<String> = codes.iter().map(|c| format!("{c:03}")).collect();

        // round-robin guarantees every country at least one city
        let cities: Vec<(String, usize)> = (0..config.n_cities)
            .map(|i| (format!("C{i:04}"), i % config.n_countries))
            .collect();

        let categories: Vec<Category> = (0..config.n_categories)
            .map(|k| Category {
                token: format!("{}", 5000 + 37 * k),
                log_mu: rng.random_range(2.0..4.5),
                log_sigma: rng.random_range(0.35..0.6),
                online_rate: rng.random_range(0.05..0.5),
            })
            .collect();

        let n = config.n_merchants;
        let mut city_of: Vec<usize> = (0..config.n_cities)
            .chain((config.n_cities..n).map(|_| rng.random_range(0..config.n_cities)))
            .collect();
        city_of.shuffle(&mut rng);
        let mut cat_of: Vec<usize> = (0..config.n_categories)
            .chain((config.n_categories..n).map(|_| rng.random_range(0..config.n_categories)))
            .collect();
        cat_of.shuffle(&mut rng);
        let mut ranks: Vec<usize> = (1..=n).collect();
        ranks.shuffle(&mut rng);

        let merchants = (0..n)
            .map(|m| Merchant {
                token: format!("M{m:06}"),
                country: cities[city_of[m]].1,
                city: city_of[m],
                category: cat_of[m],
                popularity: 1.0 / (ranks[m] as f64).powf(0.6),
            })
            .collect();

        let country_weights = (0..config.n_countries)
            .map(|i| 1.0 / ((i + 1) as f64).powf(0.7))
            .collect();

        World {
            countries,
            cities,
            categories,
            merchants,
            country_weights,
        }
    }

    fn truth(&self) -> GroundTruth {
        GroundTruth {
            merchants: self
                .merchants
                .iter()
                .map(|m| MerchantTruth {
                    merchant: m.token.clone(),
                    country: self.countries[m.country].clone(),
                    city: self.cities[m.city].0.clone(),
                    category: self.categories[m.category].token.clone(),
                })
                .collect(),
        }
    }
}

/// Weighted choice among `candidates` by merchant popularity.
fn pick_popular(rng: &mut ChaCha8Rng, world: &World, candidates: &[usize]) -> usize {
    let w: Vec<f64> = candidates
        .iter()
        .map(|&m| world.merchants[m].popularity)
        .collect();
    let dist = WeightedIndex::new(&w).expect("non-empty positive weights");
    candidates[dist.sample(rng)]
}

struct CardProfile {
    home_country: usize,
    tier: usize,
    account_age: f64,
    favourites: Vec<usize>,
    favourite_dist: WeightedIndex<f64>,
    explore_prob: f64,
    routine_prob: f64,
    amount_offset: f64,
    home_merchants: Vec<usize>,
    foreign_merchants: Vec<usize>,
}

impl CardProfile {
    fn draw(rng: &mut ChaCha8Rng, world: &World) -> CardProfile {
        let cdist = WeightedIndex::new(&world.country_weights).expect("weights");
        let home_country = cdist.sample(rng);
        let home_cities: Vec<usize> = (0..world.cities.len())
            .filter(|&c| world.cities[c].1 == home_country)
            .collect();
        let home_city = *home_cities.choose(rng).expect("each country has a city");
        let tier = WeightedIndex::new(TIER_WEIGHTS)
            .expect("weights")
            .sample(rng);
        let account_age = LogNormal::new(900f64.ln(), 0.6)
            .expect("params")
            .sample(rng)
            .round();

        let n_cat = world.categories.len();
        let n_pref = rng.random_range(2..=3).min(n_cat);
        let preferred: Vec<usize> = rand::seq::index::sample(rng, n_cat, n_pref).into_vec();

        let home_merchants: Vec<usize> = (0..world.merchants.len())
            .filter(|&m| world.merchants[m].country == home_country)
            .collect();
        let foreign_merchants: Vec<usize> = (0..world.merchants.len())
            .filter(|&m| world.merchants[m].country != home_country)
            .collect();

        let n_fav = rng.random_range(3..=8usize);
        let tiers: [Box<dyn Fn(&Merchant) -> bool>; 4] = [
            Box::new(|m: &Merchant| m.city == home_city && preferred.contains(&m.category)),
            Box::new(|m: &Merchant| m.country == home_country && preferred.contains(&m.category)),
            Box::new(|m: &Merchant| m.country == home_country),
            Box::new(|_: &Merchant| true),
        ];
        let mut favourites: Vec<usize> = Vec::new();
        for accept in tiers.iter() {
            let pool: Vec<usize> = (0..world.merchants.len())
                .filter(|&m| accept(&world.merchants[m]) && !favourites.contains(&m))
                .collect();
            let mut pool = pool;
            while favourites.len() < n_fav && !pool.is_empty() {
                let m = pick_popular(rng, world, &pool);
                pool.retain(|&x| x != m);
                favourites.push(m);
            }
            if favourites.len() >= n_fav {
                break;
            }
        }
        let exp = Exp::new(1.0).expect("rate");
        let fav_w: Vec<f64> = favourites.iter().map(|_| exp.sample(rng) + 0.05).collect();
        CardProfile {
            home_country,
            tier,
            account_age,
            favourite_dist: WeightedIndex::new(&fav_w).expect("weights"),
            favourites,
            explore_prob: rng.random_range(0.1..0.3),
            routine_prob: 0.35,
            amount_offset: Normal::new(0.0, 0.2).expect("params").sample(rng),
            home_merchants,
            foreign_merchants,
        }
    }
}

struct Draft {
    timestamp: i64,
    gap: i64,
    merchant: usize,
    channel: usize,
    amount: f64,
    declined: bool,
    abnormal: bool,
}

fn generate_card(config: &WorldConfig, world: &World, card: u64) -> (CardProfile, Vec<Draft>) {
    let mut rng = world_rng(config.seed, card + 1);
    let profile = CardProfile::draw(&mut rng, world);
    let span = config.span_seconds();
    let spread = LogNormal::new(0.0, 0.5).expect("params").sample(&mut rng);
    let expected = (config.mean_transactions_per_card * spread).max(1.0);
    let rate = expected / span as f64;
    let gap_dist = Exp::new(rate).expect("positive rate");

    let mut out = Vec::new();
    let mut t = 0.0f64;
    let mut last_ts: Option<i64> = None;
    let mut last_fav: Option<usize> = None;
    loop {
        t += gap_dist.sample(&mut rng);
        let mut ts = t.floor() as i64;
        if let Some(prev) = last_ts {
            ts = ts.max(prev + 1);
        }
        if ts >= span {
            break;
        }
        let abnormal = rng.random_bool(config.abnormal_rate);
        let (merchant, fav_slot) = if abnormal {
            let pool = if profile.foreign_merchants.is_empty() {
                &profile.home_merchants
            } else {
                &profile.foreign_merchants
            };
            (pool[rng.random_range(0..pool.len())], None)
        } else if rng.random_bool(config.travel_rate) && !profile.foreign_merchants.is_empty() {
            (
                pick_popular(&mut rng, world, &profile.foreign_merchants),
                None,
            )
        } else if rng.random_bool(profile.explore_prob) {
            (pick_popular(&mut rng, world, &profile.home_merchants), None)
        } else {
            let slot = match last_fav {
                Some(prev) if rng.random_bool(profile.routine_prob) => {
                    (prev + 1) % profile.favourites.len()
                }
                _ => profile.favourite_dist.sample(&mut rng),
            };
            (profile.favourites[slot], Some(slot))
        };
        last_fav = fav_slot.or(last_fav);

        let m = &world.merchants[merchant];
        let cat = &world.categories[m.category];
        let mut log_mu = cat.log_mu + TIER_SHIFT[profile.tier] + profile.amount_offset;
        if abnormal {
            log_mu += 1.2;
        }
        let amount = LogNormal::new(log_mu, cat.log_sigma)
            .expect("params")
            .sample(&mut rng);
        let amount = ((amount * 100.0).round() / 100.0).max(0.01);

        let channel = if abnormal {
            if rng.random_bool(0.8) {
                2
            } else {
                0
            }
        } else if rng.random_bool(cat.online_rate) {
            2
        } else if rng.random_bool(0.4) {
            1
        } else {
            0
        };
        let p_decline = if abnormal {
            0.9
        } else {
            0.02 + 0.03 * (amount / 500.0).min(1.0)
        };
        let declined = rng.random_bool(p_decline);
        let gap = last_ts.map_or(0, |p| ts - p);
        last_ts = Some(ts);
        out.push(Draft {
            timestamp: ts,
            gap,
            merchant,
            channel,
            amount,
            declined,
            abnormal,
        });
    }
    (profile, out)
}

fn check_schema(schema: &Schema) -> Result<()> {
    for a in &schema.attributes {
        if !GENERATED_ATTRIBUTES.contains(&a.name.as_str()) {
            return Err(Error::Schema(format!(
                "generator cannot produce attribute `{}`",
                a.name
            )));
        }
    }
    Ok(())
}

/// Generates the full interleaved stream, globally sorted by timestamp
/// (ties by card id, then per-card order).
pub fn generate(config: &WorldConfig, schema: &Schema) -> Result<Vec<RawTransaction>> {
    config.validate()?;
    check_schema(schema)?;
    let world = World::build(config);
    let mut all: Vec<(i64, u64, usize, RawTransaction)> = Vec::new();
    for card in 0..config.n_cards as u64 {
        let (profile, drafts) = generate_card(config, &world, card);
        for (seq, d) in drafts.into_iter().enumerate() {
            let m = &world.merchants[d.merchant];
            let values = schema
                .attributes
                .iter()
                .map(|a| {
                    let v = match a.name.as_str() {
                        "issuer_country" => {
                            RawValue::Cat(world.countries[profile.home_country].clone())
                        }
                        "card_tier" => RawValue::Cat(CARD_TIERS[profile.tier].to_string()),
                        "account_age_days" => RawValue::Num(profile.account_age),
                        "merchant" => RawValue::Cat(m.token.clone()),
                        "merchant_country" => RawValue::Cat(world.countries[m.country].clone()),
                        "merchant_city" => RawValue::Cat(world.cities[m.city].0.clone()),
                        "merchant_category" => {
                            RawValue::Cat(world.categories[m.category].token.clone())
                        }
                        "channel" => RawValue::Cat(CHANNELS[d.channel].to_string()),
                        "amount" => RawValue::Num(d.amount),
                        "time_gap" => RawValue::Num(d.gap as f64),
                        "response_code" => {
                            RawValue::Cat(if d.declined { DECLINE } else { APPROVE }.to_string())
                        }
                        "abnormal_flag" => {
                            RawValue::Cat(if d.abnormal { "1" } else { "0" }.to_string())
                        }
                        other => unreachable!("checked attribute {other}"),
                    };
                    (a.name.clone(), v)
                })
                .collect();
            all.push((
                d.timestamp,
                card,
                seq,
                RawTransaction {
                    card_id: card,
                    timestamp: d.timestamp,
                    values,
                },
            ));
        }
    }
    all.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    Ok(all.into_iter().map(|(_, _, _, r)| r).collect())
}

pub fn ground_truth(config: &WorldConfig) -> Result<GroundTruth> {
    config.validate()?;
    Ok(World::build(config).truth())
}

pub fn write_records(path: &Path, records: &[RawTransaction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r.to_json())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RawTransaction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Record {
            record: format!("line {}", i + 1),
            reason: e.to_string(),
        })?;
        out.push(RawTransaction::from_json(&v, &format!("line {}", i + 1))?);
    }
    Ok(out)
}
