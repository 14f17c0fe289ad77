//! Attribute schema, category vocabularies and the out-of-vocabulary policy.
//!
//! Every categorical attribute owns a [`Vocabulary`] whose index space is
//! `[0, tokens) ∪ {oov, pad}`: regular tokens are dense in `0..tokens`, the
//! shared OOV bucket sits at `tokens` and the padding sentinel at
//! `tokens + 1`. The attribute's cardinality counts both reserved rows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CARDINALITY_THRESHOLD: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    NextTarget,
    CurrentSignal,
}

/// Frequency policy used when building a vocabulary from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPolicy {
    pub min_count: u64,
    pub max_size: usize,
}

impl Default for VocabPolicy {
    fn default() -> Self {
        VocabPolicy {
            min_count: 1,
            max_size: 1 << 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    pub scope: Scope,
    pub roles: Vec<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(default)]
    pub is_pivot: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<VocabPolicy>,
}

impl AttributeSpec {
    pub fn numerical(name: &str, scope: Scope, roles: &[Role]) -> Self {
        AttributeSpec {
            name: name.to_string(),
            kind: AttributeKind::Numerical,
            scope,
            roles: normalize_roles(roles),
            cardinality: None,
            is_pivot: false,
            vocab: None,
        }
    }

    pub fn categorical(name: &str, scope: Scope, roles: &[Role]) -> Self {
        AttributeSpec {
            name: name.to_string(),
            kind: AttributeKind::Categorical,
            scope,
            roles: normalize_roles(roles),
            cardinality: None,
            is_pivot: false,
            vocab: Some(VocabPolicy::default()),
        }
    }

    pub fn pivot(mut self) -> Self {
        self.is_pivot = true;
        self
    }

    pub fn with_cardinality(mut self, cardinality: usize) -> Self {
        self.cardinality = Some(cardinality);
        self
    }

    pub fn with_policy(mut self, policy: VocabPolicy) -> Self {
        self.vocab = Some(policy);
        self
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == AttributeKind::Categorical
    }

    pub fn is_signal(&self) -> bool {
        self.has_role(Role::CurrentSignal)
    }
}

fn normalize_roles(roles: &[Role]) -> Vec<Role> {
    let mut roles = roles.to_vec();
    roles.sort();
    roles.dedup();
    roles
}

/// Splits categorical attributes into low- and high-cardinality handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardinalityClass {
    pub threshold: usize,
}

impl Default for CardinalityClass {
    fn default() -> Self {
        CardinalityClass {
            threshold: DEFAULT_CARDINALITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeClass {
    Numerical,
    LowCat,
    HighCat,
}

/// Numerical stays numerical; categorical attributes are high-cardinality
/// iff their cardinality exceeds the threshold. A categorical spec without
/// a resolved cardinality is treated as low-cardinality.
pub fn classify(spec: &AttributeSpec, class: CardinalityClass) -> AttributeClass {
    match spec.kind {
        AttributeKind::Numerical => AttributeClass::Numerical,
        AttributeKind::Categorical => match spec.cardinality {
            Some(c) if c > class.threshold => AttributeClass::HighCat,
            _ => AttributeClass::LowCat,
        },
    }
}

/// Dense token → index mapping with a shared OOV bucket and a padding row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    attribute: String,
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from a token stream.
    ///
    /// Tokens seen fewer than `min_count` times, and everything past the
    /// `max_size - 1` most frequent survivors, fall into the OOV bucket so the
    /// final cardinality (tokens + oov + pad) never exceeds `max_size + 1`.
    /// Ordering is by descending count, then lexicographic token.
    pub fn build<I, S>(attribute: &str, tokens: I, min_count: u64, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count < 1 {
            return Err(Error::config("min_count", "must be >= 1"));
        }
        if max_size < 2 {
            return Err(Error::config("max_size", "must be >= 2"));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for tok in tokens {
            let tok = tok.as_ref();
            if let Some(c) = counts.get_mut(tok) {
                *c += 1;
            } else {
                counts.insert(tok.to_string(), 1);
            }
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        kept.truncate(max_size - 1);
        let tokens: Vec<String> = kept.into_iter().map(|(t, _)| t).collect();
        Ok(Self::from_tokens(attribute, tokens))
    }

    /// Vocabulary from an ordered token list (index = position).
    pub fn from_tokens(attribute: &str, tokens: Vec<String>) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            attribute: attribute.to_string(),
            tokens,
            lookup,
        }
    }

    /// Vocabulary from a predefined token → index table. Indices must be
    /// dense (`0..n`) and unique.
    pub fn from_mapping<I>(attribute: &str, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, u32)>,
    {
        let entries: Vec<(String, u32)> = entries.into_iter().collect();
        let n = entries.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        for (tok, idx) in entries {
            let i = idx as usize;
            if i >= n {
                return Err(Error::Schema(format!(
                    "vocabulary `{attribute}`: index {idx} leaves a gap (only {n} tokens)"
                )));
            }
            if slots[i].is_some() {
                return Err(Error::Schema(format!(
                    "vocabulary `{attribute}`: index {idx} assigned twice"
                )));
            }
            slots[i] = Some(tok);
        }
        let tokens: Vec<String> = slots.into_iter().map(|s| s.expect("dense")).collect();
        let vocab = Self::from_tokens(attribute, tokens);
        if vocab.lookup.len() != vocab.tokens.len() {
            return Err(Error::Schema(format!(
                "vocabulary `{attribute}`: duplicate token"
            )));
        }
        Ok(vocab)
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn oov_index(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn pad_index(&self) -> u32 {
        self.tokens.len() as u32 + 1
    }

    pub fn cardinality(&self) -> usize {
        self.tokens.len() + 2
    }

    /// Unseen tokens map to the OOV bucket.
    pub fn lookup(&self, token: &str) -> u32 {
        self.lookup.get(token).copied().unwrap_or(self.oov_index())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.lookup.contains_key(token)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Display label for any index, including the reserved rows.
    pub fn label(&self, index: u32) -> String {
        if index == self.oov_index() {
            "<oov>".to_string()
        } else if index == self.pad_index() {
            "<pad>".to_string()
        } else {
            self.token(index).unwrap_or("<invalid>").to_string()
        }
    }
}

/// Declarative description of every attribute plus resolved vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub threshold: CardinalityClass,
    pub attributes: Vec<AttributeSpec>,
    vocabularies: BTreeMap<String, Vocabulary>,
}

#[derive(Serialize, Deserialize)]
struct SchemaDoc {
    format_version: u32,
    cardinality_threshold: usize,
    attributes: Vec<AttributeSpec>,
    #[serde(default)]
    vocabularies: Vec<VocabDoc>,
}

#[derive(Serialize, Deserialize)]
struct VocabDoc {
    attribute: String,
    entries: Vec<(String, u32)>,
}

impl Schema {
    pub fn new(attributes: Vec<AttributeSpec>, threshold: CardinalityClass) -> Result<Self> {
        let schema = Schema {
            threshold,
            attributes,
            vocabularies: BTreeMap::new(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut pivots = 0;
        for a in &self.attributes {
            if a.name.is_empty() {
                return Err(Error::Schema("attribute with empty name".into()));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute `{}`", a.name)));
            }
            if a.roles.is_empty() {
                return Err(Error::Schema(format!("`{}` has no role", a.name)));
            }
            match a.kind {
                AttributeKind::Numerical => {
                    if a.cardinality.is_some() {
                        return Err(Error::Schema(format!(
                            "numerical `{}` must not declare a cardinality",
                            a.name
                        )));
                    }
                }
                AttributeKind::Categorical => {
                    if let Some(c) = a.cardinality {
                        if c < 2 {
                            return Err(Error::Schema(format!(
                                "categorical `{}` needs cardinality >= 2, got {c}",
                                a.name
                            )));
                        }
                    }
                }
            }
            if a.is_signal() && a.has_role(Role::Input) {
                return Err(Error::Schema(format!(
                    "current signal `{}` cannot be an input",
                    a.name
                )));
            }
            if (a.is_signal() || a.has_role(Role::NextTarget)) && a.scope != Scope::Dynamic {
                return Err(Error::Schema(format!(
                    "`{}`: targets and signals must be dynamic",
                    a.name
                )));
            }
            if a.is_signal() && a.has_role(Role::NextTarget) {
                return Err(Error::Schema(format!(
                    "`{}` cannot be both next target and current signal",
                    a.name
                )));
            }
            if a.is_pivot {
                pivots += 1;
                if !a.is_categorical() || !a.is_signal() {
                    return Err(Error::Schema(format!(
                        "pivot `{}` must be a categorical current signal",
                        a.name
                    )));
                }
            }
        }
        if pivots != 1 {
            return Err(Error::Schema(format!(
                "exactly one pivot attribute required, found {pivots}"
            )));
        }
        for (name, v) in &self.vocabularies {
            let spec = self
                .attribute(name)
                .ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
            if !spec.is_categorical() {
                return Err(Error::Schema(format!(
                    "vocabulary attached to numerical `{name}`"
                )));
            }
            if spec.cardinality != Some(v.cardinality()) {
                return Err(Error::Schema(format!(
                    "`{name}` cardinality {:?} disagrees with vocabulary ({})",
                    spec.cardinality,
                    v.cardinality()
                )));
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn pivot(&self) -> &AttributeSpec {
        self.attributes
            .iter()
            .find(|a| a.is_pivot)
            .expect("validated schema has a pivot")
    }

    pub fn classify(&self, name: &str) -> Result<AttributeClass> {
        let spec = self
            .attribute(name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
        Ok(classify(spec, self.threshold))
    }

    /// Attaches a vocabulary and records its cardinality on the attribute.
    pub fn set_vocabulary(&mut self, vocab: Vocabulary) -> Result<()> {
        let name = vocab.attribute().to_string();
        let spec = self
            .attributes
            .iter_mut()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
        if !spec.is_categorical() {
            return Err(Error::Schema(format!(
                "vocabulary attached to numerical `{name}`"
            )));
        }
        spec.cardinality = Some(vocab.cardinality());
        self.vocabularies.insert(name, vocab);
        Ok(())
    }

    pub fn vocabulary(&self, name: &str) -> Result<&Vocabulary> {
        self.vocabularies
            .get(name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn cardinality(&self, name: &str) -> Result<usize> {
        self.attribute(name)
            .and_then(|a| a.cardinality)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    /// True once every categorical attribute has a vocabulary.
    pub fn is_resolved(&self) -> bool {
        self.attributes
            .iter()
            .filter(|a| a.is_categorical())
            .all(|a| self.vocabularies.contains_key(&a.name))
    }

    pub fn to_toml(&self) -> String {
        let doc = SchemaDoc {
            format_version: SCHEMA_FORMAT_VERSION,
            cardinality_threshold: self.threshold.threshold,
            attributes: self.attributes.clone(),
            vocabularies: self
                .vocabularies
                .values()
                .map(|v| {
                    let mut entries: Vec<(String, u32)> = v
                        .tokens()
                        .iter()
                        .enumerate()
                        .map(|(i, t)| (t.clone(), i as u32))
                        .collect();
                    entries.sort();
                    VocabDoc {
                        attribute: v.attribute().to_string(),
                        entries,
                    }
                })
                .collect(),
        };
        toml::to_string(&doc).expect("schema serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: SchemaDoc =
            toml::from_str(text).map_err(|e| Error::Schema(format!("parse error: {e}")))?;
        if doc.format_version != SCHEMA_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported format_version {} (expected {SCHEMA_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let mut schema = Schema {
            threshold: CardinalityClass {
                threshold: doc.cardinality_threshold,
            },
            attributes: doc.attributes,
            vocabularies: BTreeMap::new(),
        };
        for v in doc.vocabularies {
            let declared = schema.attribute(&v.attribute).and_then(|a| a.cardinality);
            let vocab = Vocabulary::from_mapping(&v.attribute, v.entries)?;
            if declared.is_some() && declared != Some(vocab.cardinality()) {
                return Err(Error::Schema(format!(
                    "`{}` cardinality {:?} disagrees with vocabulary ({})",
                    v.attribute,
                    declared,
                    vocab.cardinality()
                )));
            }
            schema.set_vocabulary(vocab)?;
        }
        schema.validate()?;
        Ok(schema)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)
    }

    pub fn layout(&self) -> SchemaLayout {
        SchemaLayout::new(self)
    }
}

/// Column positions of each attribute group inside the flat record arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaLayout {
    pub static_num: Vec<String>,
    pub static_cat: Vec<String>,
    /// Dynamic, non-signal attributes (stored per transaction).
    pub dyn_num: Vec<String>,
    pub dyn_cat: Vec<String>,
    pub sig_num: Vec<String>,
    pub sig_cat: Vec<String>,
    /// Positions within `dyn_num` / `dyn_cat` that feed the input module.
    pub input_num: Vec<usize>,
    pub input_cat: Vec<usize>,
    /// Positions within `dyn_num` / `dyn_cat` predicted by the next head.
    pub next_num: Vec<usize>,
    pub next_cat: Vec<usize>,
}

impl SchemaLayout {
    fn new(schema: &Schema) -> Self {
        let pick = |scope: Scope, kind: AttributeKind, signal: bool| -> Vec<String> {
            schema
                .attributes
                .iter()
                .filter(|a| a.scope == scope && a.kind == kind && a.is_signal() == signal)
                .map(|a| a.name.clone())
                .collect()
        };
        let dyn_num = pick(Scope::Dynamic, AttributeKind::Numerical, false);
        let dyn_cat = pick(Scope::Dynamic, AttributeKind::Categorical, false);
        let positions = |names: &[String], role: Role| -> Vec<usize> {
            names
                .iter()
                .enumerate()
                .filter(|(_, n)| schema.attribute(n).is_some_and(|a| a.has_role(role)))
                .map(|(i, _)| i)
                .collect()
        };
        SchemaLayout {
            static_num: pick(Scope::Static, AttributeKind::Numerical, false),
            static_cat: pick(Scope::Static, AttributeKind::Categorical, false),
            input_num: positions(&dyn_num, Role::Input),
            input_cat: positions(&dyn_cat, Role::Input),
            next_num: positions(&dyn_num, Role::NextTarget),
            next_cat: positions(&dyn_cat, Role::NextTarget),
            dyn_num,
            dyn_cat,
            sig_num: pick(Scope::Dynamic, AttributeKind::Numerical, true),
            sig_cat: pick(Scope::Dynamic, AttributeKind::Categorical, true),
        }
    }
}

impl fmt::Display for AttributeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttributeClass::Numerical => "numerical",
            AttributeClass::LowCat => "low_cat",
            AttributeClass::HighCat => "high_cat",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_schema() -> Schema {
        Schema::new(
            vec![
                AttributeSpec::categorical("country", Scope::Static, &[Role::Input]),
                AttributeSpec::categorical(
                    "merchant",
                    Scope::Dynamic,
                    &[Role::Input, Role::NextTarget],
                ),
                AttributeSpec::numerical(
                    "amount",
                    Scope::Dynamic,
                    &[Role::Input, Role::NextTarget],
                ),
                AttributeSpec::categorical("abnormal", Scope::Dynamic, &[Role::CurrentSignal])
                    .pivot(),
            ],
            CardinalityClass::default(),
        )
        .unwrap()
    }

    #[test]
    fn tie_break_is_lexicographic_and_rare_tokens_go_to_oov() {
        let stream = ["B", "A", "C", "A", "B", "A", "B", "B", "A", "A"]
            .into_iter()
            .chain(std::iter::once("B"));
        // A x5, B x5, C x1
        let v = Vocabulary::build("x", stream, 2, 8).unwrap();
        assert_eq!(v.lookup("A"), 0);
        assert_eq!(v.lookup("B"), 1);
        assert_eq!(v.lookup("C"), v.oov_index());
        assert_eq!(v.cardinality(), 4);
    }

    #[test]
    fn empty_stream_has_only_reserved_rows() {
        let v = Vocabulary::build("x", Vec::<String>::new(), 1, 10).unwrap();
        assert_eq!(v.cardinality(), 2);
        assert_eq!(v.oov_index(), 0);
        assert_eq!(v.pad_index(), 1);
        assert_eq!(v.lookup("anything"), v.oov_index());
    }

    #[test]
    fn max_size_bounds_cardinality() {
        let toks: Vec<String> = (0..50).map(|i| format!("t{i:02}")).collect();
        let v = Vocabulary::build("x", toks.iter(), 1, 10).unwrap();
        assert!(v.cardinality() <= 11);
        assert_eq!(v.token_count(), 9);
        // equal counts: lexicographic order wins
        assert_eq!(v.token(0), Some("t00"));
        assert_eq!(v.lookup("t49"), v.oov_index());
    }

    #[test]
    fn rejects_bad_policy() {
        assert!(Vocabulary::build("x", ["a"], 0, 4).is_err());
        assert!(Vocabulary::build("x", ["a"], 1, 1).is_err());
    }

    #[test]
    fn predefined_country_mapping() {
        // 249 country codes; 834 -> 57, 840 -> 58, 850 -> 59 as in a fixed table.
        let mut entries: Vec<(String, u32)> = (0..249u32)
            .filter(|i| !(57..=59).contains(i))
            .map(|i| (format!("x{i:03}"), i))
            .collect();
        entries.push(("834".into(), 57));
        entries.push(("840".into(), 58));
        entries.push(("850".into(), 59));
        let v = Vocabulary::from_mapping("country", entries).unwrap();
        assert_eq!(v.token_count(), 249);
        assert_eq!(v.lookup("840"), 58);
        assert_eq!(v.lookup("834"), 57);
        assert_eq!(v.lookup("999"), v.oov_index());
        assert!(Vocabulary::from_mapping("c", vec![("a".into(), 0), ("b".into(), 2)]).is_err());
        assert!(Vocabulary::from_mapping("c", vec![("a".into(), 0), ("b".into(), 0)]).is_err());
    }

    #[test]
    fn classify_threshold_boundaries() {
        let class = CardinalityClass::default();
        let spec =
            |c| AttributeSpec::categorical("m", Scope::Dynamic, &[Role::Input]).with_cardinality(c);
        assert_eq!(classify(&spec(249), class), AttributeClass::LowCat);
        assert_eq!(classify(&spec(1024), class), AttributeClass::LowCat);
        assert_eq!(classify(&spec(1025), class), AttributeClass::HighCat);
        assert_eq!(classify(&spec(100_000), class), AttributeClass::HighCat);
        let num = AttributeSpec::numerical("a", Scope::Dynamic, &[Role::Input]);
        assert_eq!(classify(&num, class), AttributeClass::Numerical);
    }

    #[test]
    fn schema_invariants_enforced() {
        let base = tiny_schema();
        let mut attrs = base.attributes.clone();
        attrs[3].is_pivot = false;
        assert!(Schema::new(attrs, CardinalityClass::default()).is_err());

        let mut attrs = base.attributes.clone();
        attrs[3].roles = vec![Role::Input, Role::CurrentSignal];
        assert!(Schema::new(attrs, CardinalityClass::default()).is_err());

        let mut attrs = base.attributes.clone();
        attrs[0].cardinality = Some(1);
        assert!(Schema::new(attrs, CardinalityClass::default()).is_err());

        let mut attrs = base.attributes.clone();
        attrs[2].cardinality = Some(5);
        assert!(Schema::new(attrs, CardinalityClass::default()).is_err());

        let mut attrs = base.attributes.clone();
        attrs.push(AttributeSpec::numerical(
            "amount",
            Scope::Dynamic,
            &[Role::Input],
        ));
        assert!(Schema::new(attrs, CardinalityClass::default()).is_err());
    }

    #[test]
    fn toml_round_trip_preserves_vocab_and_hash() {
        let mut schema = tiny_schema();
        schema
            .set_vocabulary(Vocabulary::build("merchant", ["m1", "m2", "m2"], 1, 100).unwrap())
            .unwrap();
        schema
            .set_vocabulary(Vocabulary::build("country", ["840"], 1, 100).unwrap())
            .unwrap();
        schema
            .set_vocabulary(Vocabulary::build("abnormal", ["0", "1", "0"], 1, 100).unwrap())
            .unwrap();
        let text = schema.to_toml();
        assert!(text.contains("format_version = 1"));
        let back = Schema::from_toml(&text).unwrap();
        assert_eq!(back, schema);
        assert_eq!(back.hash(), schema.hash());
        assert!(back.is_resolved());
        assert_eq!(back.vocabulary("merchant").unwrap().lookup("m2"), 0);
        for a in &schema.attributes {
            assert_eq!(
                classify(a, schema.threshold),
                classify(back.attribute(&a.name).unwrap(), back.threshold)
            );
        }
    }

    #[test]
    fn layout_groups_attributes() {
        let l = tiny_schema().layout();
        assert_eq!(l.static_cat, vec!["country"]);
        assert_eq!(l.dyn_cat, vec!["merchant"]);
        assert_eq!(l.dyn_num, vec!["amount"]);
        assert_eq!(l.sig_cat, vec!["abnormal"]);
        assert_eq!(l.next_cat, vec![0]);
        assert_eq!(l.input_num, vec![0]);
    }
}
