//! One TOML file configures every stage; each command reads the sections
//! it needs and flags override individual fields.

use std::path::Path;

use serde::{Deserialize, Serialize};

use txn_foundry::corpus::TemporalSplit;
use txn_foundry::eval::{BenchConfig, ScalingAxis};
use txn_foundry::model::ModelConfig;
use txn_foundry::rec::TowerConfig;
use txn_foundry::syngen::WorldConfig;
use txn_foundry::trainer::TrainConfig;
use txn_foundry::Error;

use crate::CliError;

/// The configuration shipped as `configs/tiny.toml`.
pub const TINY: &str = include_str!("../../../configs/tiny.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train_months: u32,
    pub val_months: u32,
    pub test_months: u32,
    pub max_seq_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_months: 24,
            val_months: 1,
            test_months: 1,
            max_seq_len: 32,
        }
    }
}

impl CorpusConfig {
    pub fn split(&self) -> txn_foundry::Result<TemporalSplit> {
        TemporalSplit::months(self.train_months, self.val_months, self.test_months)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub partition: String,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            partition: "test".into(),
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub axis: ScalingAxis,
    pub sizes: Vec<usize>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            axis: ScalingAxis::Cards,
            sizes: vec![100, 200, 400],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecConfig {
    /// Shares of the post-cutoff interactions used for training and
    /// validation; the rest is the test set.
    pub train_frac: f64,
    pub val_frac: f64,
    /// Seeds of the repeated comparisons.
    pub seeds: Vec<u64>,
    pub tower: TowerConfig,
}

impl Default for RecConfig {
    fn default() -> Self {
        RecConfig {
            train_frac: 0.6,
            val_frac: 0.2,
            seeds: vec![0, 1, 2],
            tower: TowerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub rec: RecConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::from_toml(TINY).expect("bundled tiny config parses")
    }
}

fn scoped(section: &str, e: Error) -> CliError {
    match e {
        Error::Config { field, reason } => CliError::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => CliError::Core(other),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            field: config_error_field(text, &e),
            reason: e.message().trim().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate().map_err(|e| scoped("world", e))?;
        self.corpus.split().map_err(|e| scoped("corpus", e))?;
        if self.corpus.max_seq_len < 2 {
            return Err(CliError::config("corpus.max_seq_len", "must be >= 2"));
        }
        self.model.validate().map_err(|e| scoped("model", e))?;
        if self.corpus.max_seq_len > self.model.max_seq_len {
            return Err(CliError::config(
                "corpus.max_seq_len",
                format!("exceeds model.max_seq_len {}", self.model.max_seq_len),
            ));
        }
        self.train.validate().map_err(|e| scoped("train", e))?;
        if self.eval.batch_size == 0 {
            return Err(CliError::config("eval.batch_size", "must be >= 1"));
        }
        if !["train", "val", "test"].contains(&self.eval.partition.as_str()) {
            return Err(CliError::config(
                "eval.partition",
                format!("unknown partition `{}`", self.eval.partition),
            ));
        }
        self.rec.tower.validate().map_err(|e| scoped("rec.tower", e))?;
        if !(self.rec.train_frac > 0.0 && self.rec.val_frac >= 0.0)
            || self.rec.train_frac + self.rec.val_frac >= 1.0
        {
            return Err(CliError::config(
                "rec.train_frac",
                "train_frac > 0, val_frac >= 0 and their sum < 1 are required",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Dotted path of the offending key: the section header above the error
/// span plus the key named in the message or written on the span's line.
fn config_error_field(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message();
    let named = ["unknown field `", "missing field `"]
        .iter()
        .find_map(|m| msg.split(m).nth(1).and_then(|r| r.split('`').next()))
        .map(str::to_string);
    let Some(span) = e.span() else {
        return named.unwrap_or_else(|| "config".into());
    };
    let before = &text[..span.start.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("").trim();
    let section = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && !l.starts_with("[["))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let key = named.or_else(|| {
        line.split_once('=')
            .map(|(k, _)| k.trim().trim_matches('"').to_string())
    });
    let header = line
        .starts_with('[')
        .then(|| line.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    if let (Some(h), Some(k)) = (&header, &key) {
        if h == k || h.ends_with(&format!(".{k}")) {
            return h.clone();
        }
    }
    match (header.or(section), key) {
        (Some(s), Some(k)) => format!("{s}.{k}"),
        (Some(s), None) => s,
        (None, Some(k)) => k,
        (None, None) => "config".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_validate() {
        PipelineConfig::default().validate().unwrap();
        let big = include_str!("../../../configs/synthetic-10k.toml");
        let cfg = PipelineConfig::from_toml(big).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.world.n_cards, 10_000);
        assert_eq!(cfg.world.n_merchants, 2_000);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    fn field_of(text: &str) -> String {
        match PipelineConfig::from_toml(text).and_then(|c| c.validate().map(|_| c)) {
            Err(CliError::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_dotted_field() {
        assert_eq!(field_of("[model]\nhidden_dim = \"x\"\n"), "model.hidden_dim");
        assert_eq!(field_of("[rec.tower]\nepochs = 1\nbogus = 2\n"), "rec.tower.bogus");
        assert_eq!(field_of("[corpus]\nmax_seq_len = 1\n"), "corpus.max_seq_len");
        assert_eq!(field_of("[eval]\npartition = \"dev\"\n"), "eval.partition");
        assert_eq!(field_of("[nonsense]\n"), "nonsense");
        assert!(field_of("[world]\nn_cards = 0\n").starts_with("world."));
    }
}
