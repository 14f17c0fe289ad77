//! AdamW training loop, validation-based checkpoint selection and resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{Archive, DType};
use crate::corpus::{Batch, Corpus, CorpusLayout};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{HeadTargets, Model, ModelConfig};
use crate::objective::{
    aggregation_coefficients, negative_rng, AggregationMode, NegativeSamplingPlan,
};
use crate::schema::{AttributeClass, Schema};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Multi,
    MerchantOnly,
    AbnormalOnly,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Self::Multi),
            "merchant_only" => Ok(Self::MerchantOnly),
            "abnormal_only" => Ok(Self::AbnormalOnly),
            _ => Err(Error::config("task_mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub aggregation_mode: AggregationMode,
    pub task_mode: TaskMode,
    pub negatives: NegativeSamplingPlan,
    /// Attribute trained alone in `merchant_only` mode.
    pub merchant_attribute: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 256,
            eval_batch_size: 64,
            aggregation_mode: AggregationMode::Treasure,
            task_mode: TaskMode::Multi,
            negatives: NegativeSamplingPlan::shared(1024, 0),
            merchant_attribute: "merchant".into(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be > 0, got {v}")))
            }
        };
        pos("learning_rate", self.learning_rate)?;
        pos("adam_eps", self.adam_eps)?;
        pos("grad_clip", self.grad_clip)?;
        pos("batch_size", self.batch_size as f64)?;
        pos("eval_batch_size", self.eval_batch_size as f64)?;
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f, format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        self.negatives.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("negatives.{field}"),
                reason,
            },
            other => other,
        })
    }

    /// Attributes whose losses train the model, or `None` for all heads.
    pub fn active_attributes(&self, schema: &Schema) -> Result<Option<Vec<String>>> {
        match self.task_mode {
            TaskMode::Multi => Ok(None),
            TaskMode::MerchantOnly => {
                if schema.attribute(&self.merchant_attribute).is_none() {
                    return Err(Error::UnknownAttribute(self.merchant_attribute.clone()));
                }
                Ok(Some(vec![self.merchant_attribute.clone()]))
            }
            TaskMode::AbnormalOnly => Ok(Some(vec![schema.pivot().name.clone()])),
        }
    }

    /// Attribute whose validation loss selects the best checkpoint.
    pub fn selection_attribute(&self, schema: &Schema) -> String {
        match self.task_mode {
            TaskMode::MerchantOnly => self.merchant_attribute.clone(),
            _ => schema.pivot().name.clone(),
        }
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Matrix<f32>>,
    pub v: Vec<Matrix<f32>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(model: &Model<f32>) -> Self {
        let zeros = || {
            model
                .params
                .iter()
                .map(|(_, t)| Matrix::zeros(t.rows, t.cols))
                .collect()
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update over the parameters that received a gradient.
    pub fn update(
        &mut self,
        model: &mut Model<f32>,
        grads: &[(usize, Matrix<f32>)],
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = cfg.learning_rate as f32;
        let wd = cfg.weight_decay as f32;
        let eps = cfg.adam_eps as f32;
        for (id, g) in grads {
            let p = model.params.by_id_mut(*id);
            let m = &mut self.m[*id];
            let v = &mut self.v[*id];
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + eps) + wd * p.data[i]);
            }
        }
    }
}

/// Per-epoch summary written to the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_losses: BTreeMap<String, f64>,
    pub train_aggregate: f64,
    pub val_losses: BTreeMap<String, f64>,
    pub selection_attribute: String,
    pub selection_metric: f64,
    pub is_best: bool,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub best: Model<f32>,
    pub optimizer: AdamW,
    pub epochs_completed: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: Model<f32>) -> Self {
        TrainState {
            optimizer: AdamW::new(&model),
            best: model.clone(),
            model,
            epochs_completed: 0,
            best_metric: None,
            best_epoch: None,
            history: Vec::new(),
        }
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.ndjson")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("last.ckpt")
    }
}

/// Stream of deterministic NDJSON records (no timestamps).
struct MetricsSink {
    file: Option<std::fs::File>,
    path: PathBuf,
}

impl MetricsSink {
    fn open(run: Option<&RunDir>, append: bool) -> Result<Self> {
        let Some(run) = run else {
            return Ok(MetricsSink {
                file: None,
                path: PathBuf::new(),
            });
        };
        let path = run.metrics();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsSink {
            file: Some(file),
            path,
        })
    }

    fn emit(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{value}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub losses: Vec<(String, f64)>,
    pub aggregate: f64,
    pub grad_norm: f64,
}

/// Forward, aggregate, backward and update on one batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    active: Option<&[String]>,
    stream: u64,
) -> Result<StepReport> {
    let model = &state.model;
    let mut g: Graph<f32> = Graph::new();
    let mut fwd = model.forward(&mut g, batch)?;
    let mut rng = negative_rng(cfg.negatives.seed ^ cfg.seed.rotate_left(17), stream);
    let losses = model.losses(&mut g, &mut fwd, batch, &cfg.negatives, &mut rng, active)?;
    let values: Vec<f64> = losses.iter().map(|(_, v)| g.scalar(*v) as f64).collect();
    let pivot = model.schema.pivot().name.clone();
    let pidx = losses.iter().position(|(n, _)| *n == pivot);
    let coef = aggregation_coefficients(cfg.aggregation_mode, &values, pidx);
    let total = g.weighted_sum(
        losses
            .iter()
            .zip(&coef)
            .map(|((_, v), &c)| (*v, c as f32))
            .collect(),
    );
    let aggregate = g.scalar(total) as f64;
    let mut grads = g.backward(total)?;
    let mut collected: Vec<(usize, Matrix<f32>)> = Vec::new();
    for (id, var) in fwd.param_vars() {
        if let Some(gm) = grads.take(var) {
            collected.push((id, gm));
        }
    }
    let norm = collected
        .iter()
        .flat_map(|(_, m)| m.data.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            attribute: "gradient".into(),
            epoch: 0,
            step: 0,
        });
    }
    if norm > cfg.grad_clip {
        let s = (cfg.grad_clip / norm) as f32;
        for (_, m) in collected.iter_mut() {
            m.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    state.optimizer.update(&mut state.model, &collected, cfg);
    Ok(StepReport {
        losses: losses.iter().map(|(n, _)| n.clone()).zip(values).collect(),
        aggregate,
        grad_norm: norm,
    })
}

/// Mean per-attribute losses over a partition, weighting each batch by its
/// number of scored positions. High-cardinality attributes use the full
/// softmax so the numbers do not depend on sampled negatives.
pub fn validation_losses(
    model: &Model<f32>,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    let layout = CorpusLayout::new(&model.schema)?;
    let mut sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let plan = NegativeSamplingPlan::exhaustive();
    let mut rng = negative_rng(0, 0);
    for batch in corpus.ordered_batches(&layout, batch_size) {
        let mut g: Graph<f32> = Graph::new();
        let mut fwd = model.forward(&mut g, &batch)?;
        let losses = model.losses(&mut g, &mut fwd, &batch, &plan, &mut rng, None)?;
        for (name, var) in losses {
            let head = fwd.head(&name).expect("head exists");
            let n = match model.head_targets(head, &batch) {
                HeadTargets::Numeric { mask, .. } | HeadTargets::Categorical { mask, .. } => {
                    mask.iter().filter(|&&m| m).count() as f64
                }
            };
            let e = sums.entry(name).or_insert((0.0, 0.0));
            e.0 += g.scalar(var) as f64 * n;
            e.1 += n;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, if n > 0.0 { s / n } else { f64::NAN }))
        .collect())
}

/// Trains for `epochs` more epochs, evaluating on `val` after each.
pub fn train_epochs(
    state: &mut TrainState,
    train: &Corpus,
    val: &Corpus,
    cfg: &TrainConfig,
    epochs: usize,
    run: Option<&RunDir>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training partition is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Invalid("validation partition is empty".into()));
    }
    let schema = state.model.schema.clone();
    let active = cfg.active_attributes(&schema)?;
    let selection = cfg.selection_attribute(&schema);
    let layout = CorpusLayout::new(&schema)?;
    let mut sink = MetricsSink::open(run, state.epochs_completed > 0)?;
    for _ in 0..epochs {
        let epoch = state.epochs_completed;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut agg_sum = 0.0;
        let mut steps = 0usize;
        for (i, batch) in train
            .batches(&layout, cfg.batch_size, cfg.seed, epoch as u64)
            .enumerate()
        {
            let stream = state.optimizer.step;
            let report =
                train_step(state, &batch, cfg, active.as_deref(), stream).map_err(|e| match e {
                    Error::NonFiniteLoss { attribute, .. } => Error::NonFiniteLoss {
                        attribute,
                        epoch,
                        step: i,
                    },
                    other => other,
                })?;
            for (n, v) in &report.losses {
                *sums.entry(n.clone()).or_default() += v;
            }
            agg_sum += report.aggregate;
            steps += 1;
            sink.emit(serde_json::json!({
                "type": "step",
                "epoch": epoch,
                "step": i,
                "losses": report.losses.iter().cloned().collect::<BTreeMap<_, _>>(),
                "aggregate": report.aggregate,
                "grad_norm": report.grad_norm,
            }))?;
        }
        let val_losses = validation_losses(&state.model, val, cfg.eval_batch_size)?;
        let metric = *val_losses
            .get(&selection)
            .ok_or_else(|| Error::UnknownAttribute(selection.clone()))?;
        if !metric.is_finite() {
            return Err(Error::NonFiniteLoss {
                attribute: selection.clone(),
                epoch,
                step: steps,
            });
        }
        let is_best = state.best_metric.is_none_or(|b| metric < b);
        if is_best {
            state.best_metric = Some(metric);
            state.best_epoch = Some(epoch);
            state.best = state.model.clone();
        }
        let record = EpochRecord {
            epoch,
            steps,
            train_losses: sums
                .into_iter()
                .map(|(k, v)| (k, v / steps as f64))
                .collect(),
            train_aggregate: agg_sum / steps as f64,
            val_losses,
            selection_attribute: selection.clone(),
            selection_metric: metric,
            is_best,
        };
        log::info!(
            "epoch {epoch}: train {:.4}, val {selection} {:.4}{}",
            record.train_aggregate,
            metric,
            if is_best { " (best)" } else { "" }
        );
        let mut line = serde_json::to_value(&record)?;
        line["type"] = "epoch".into();
        sink.emit(line)?;
        state.history.push(record);
        state.epochs_completed += 1;
        if let Some(run) = run {
            save_checkpoint(&run.last(), state, cfg)?;
            if is_best {
                save_model(&run.best(), &state.best, Some(cfg))?;
            }
        }
    }
    Ok(())
}

/// Builds a fresh model and trains it for `cfg.epochs`.
pub fn train(
    schema: &Schema,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    train: &Corpus,
    val: &Corpus,
    run: Option<&RunDir>,
) -> Result<TrainState> {
    let model = Model::new(model_config.clone(), schema.clone())?;
    let mut state = TrainState::new(model);
    train_epochs(&mut state, train, val, cfg, cfg.epochs, run)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn model_header(model: &Model<f32>, kind: &str) -> serde_json::Value {
    serde_json::json!({
        "kind": kind,
        "model_config": model.config,
        "schema_hash": model.schema.hash(),
        "schema_toml": model.schema.to_toml(),
    })
}

/// Parameters only: the best-checkpoint format.
pub fn save_model(path: &Path, model: &Model<f32>, cfg: Option<&TrainConfig>) -> Result<()> {
    let mut header = model_header(model, "model");
    if let Some(cfg) = cfg {
        header["train_config"] = serde_json::to_value(cfg)?;
    }
    let mut a = Archive::new(header);
    for (name, t) in model.params.iter() {
        a.push(format!("param/{name}"), t.clone());
    }
    a.write(path, DType::F32)
}

fn header_str<'a>(a: &'a Archive, key: &str, path: &Path) -> Result<&'a str> {
    a.header[key].as_str().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("missing header field `{key}`"),
    })
}

fn model_from_archive(a: &Archive, path: &Path, prefix: &str) -> Result<Model<f32>> {
    let schema = Schema::from_toml(header_str(a, "schema_toml", path)?)?;
    let recorded = header_str(a, "schema_hash", path)?;
    if schema.hash() != recorded {
        return Err(Error::SchemaHashMismatch {
            expected: recorded.to_string(),
            found: schema.hash(),
        });
    }
    let config: ModelConfig = serde_json::from_value(a.header["model_config"].clone())?;
    let mut model = Model::new(config, schema)?;
    model.params.load(&a.with_prefix(prefix))?;
    Ok(model)
}

/// Loads a model from a best or last checkpoint.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let a = Archive::read(path)?;
    model_from_archive(&a, path, "param/")
}

/// Full resumable state: parameters, best parameters, Adam moments,
/// bookkeeping and history.
pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut header = model_header(&state.model, "checkpoint");
    header["train_config"] = serde_json::to_value(cfg)?;
    header["epochs_completed"] = state.epochs_completed.into();
    header["adam_step"] = state.optimizer.step.into();
    header["best_metric"] = serde_json::to_value(state.best_metric)?;
    header["best_epoch"] = serde_json::to_value(state.best_epoch)?;
    header["history"] = serde_json::to_value(&state.history)?;
    let mut a = Archive::new(header);
    for (i, (name, t)) in state.model.params.iter().enumerate() {
        a.push(format!("param/{name}"), t.clone());
        a.push(format!("adam_m/{name}"), state.optimizer.m[i].clone());
        a.push(format!("adam_v/{name}"), state.optimizer.v[i].clone());
    }
    for (name, t) in state.best.params.iter() {
        a.push(format!("best/{name}"), t.clone());
    }
    let tmp = path.with_extension("tmp");
    a.write(&tmp, DType::F32)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Restores a run saved by [`save_checkpoint`], refusing a corpus whose
/// schema hash differs.
pub fn load_checkpoint(
    path: &Path,
    expected_schema_hash: &str,
) -> Result<(TrainState, TrainConfig)> {
    let a = Archive::read(path)?;
    if header_str(&a, "kind", path)? != "checkpoint" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "not a resumable checkpoint".into(),
        });
    }
    let found = header_str(&a, "schema_hash", path)?;
    if found != expected_schema_hash {
        return Err(Error::SchemaHashMismatch {
            expected: expected_schema_hash.to_string(),
            found: found.to_string(),
        });
    }
    let model = model_from_archive(&a, path, "param/")?;
    let best = model_from_archive(&a, path, "best/")?;
    let mut optimizer = AdamW::new(&model);
    let m = a.with_prefix("adam_m/");
    let v = a.with_prefix("adam_v/");
    for (i, (name, _)) in model.params.iter().enumerate() {
        let find = |set: &[(String, Matrix<f32>)]| {
            set.iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("missing optimizer state for `{name}`"),
                })
        };
        optimizer.m[i] = find(&m)?;
        optimizer.v[i] = find(&v)?;
    }
    optimizer.step = a.header["adam_step"].as_u64().unwrap_or(0);
    let cfg: TrainConfig = serde_json::from_value(a.header["train_config"].clone())?;
    let state = TrainState {
        model,
        best,
        optimizer,
        epochs_completed: a.header["epochs_completed"].as_u64().unwrap_or(0) as usize,
        best_metric: serde_json::from_value(a.header["best_metric"].clone())?,
        best_epoch: serde_json::from_value(a.header["best_epoch"].clone())?,
        history: serde_json::from_value(a.header["history"].clone())?,
    };
    Ok((state, cfg))
}

/// High-cardinality categorical attributes of a schema.
pub fn high_cardinality_attributes(schema: &Schema) -> Vec<String> {
    schema
        .attributes
        .iter()
        .filter(|a| schema.classify(&a.name).ok() == Some(AttributeClass::HighCat))
        .map(|a| a.name.clone())
        .collect()
}
