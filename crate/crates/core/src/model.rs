//! The dual-head causal decoder.
//!
//! A static token (card-level attributes) sits at position 0, followed by
//! one token per transaction. Pre-norm decoder blocks with causal,
//! padding-aware attention and no positional encoding produce hidden
//! states; the output module reads positions `1..=T` and emits a "next"
//! prediction for each next-target attribute and a "current" prediction for
//! each signal. Categorical predictions are vectors scored against the
//! attribute's own embedding table.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::objective::{sample_negatives, NegativeSamplingPlan, NegativeStrategy};
use crate::schema::{AttributeClass, Schema, SchemaLayout};
use crate::tensor::{matmul, Matrix, Real};

/// Floor applied to numeric targets before taking the log.
pub const TARGET_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub input_module_layers: usize,
    /// Width of the projected numeric block inside each input module.
    pub numeric_dim: usize,
    /// Per-attribute embedding widths; others use [`default_embedding_dim`].
    pub embedding_dims: BTreeMap<String, usize>,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 256,
            n_layers: 3,
            n_heads: 4,
            input_module_layers: 3,
            numeric_dim: 16,
            embedding_dims: BTreeMap::new(),
            max_seq_len: 512,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("input_module_layers", self.input_module_layers),
            ("numeric_dim", self.numeric_dim),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!(
                    "hidden_dim {} not divisible by {}",
                    self.hidden_dim, self.n_heads
                ),
            ));
        }
        if let Some((name, _)) = self.embedding_dims.iter().find(|(_, &v)| v == 0) {
            return Err(Error::config(
                "embedding_dims",
                format!("`{name}` must be >= 1"),
            ));
        }
        Ok(())
    }
}

/// `min(d, ceil(cardinality^0.25) · 8)`.
pub fn default_embedding_dim(cardinality: usize, hidden_dim: usize) -> usize {
    let q = (cardinality as f64).powf(0.25).ceil() as usize;
    (q.max(1) * 8).min(hidden_dim)
}

/// Signed `ln(1 + |x|)`; equals `ln(1 + x)` for the nonnegative inputs the
/// schema carries.
pub fn log_scale(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Log-space regression target of a raw positive value.
pub fn numeric_target(y: f64) -> f64 {
    y.max(TARGET_FLOOR).ln()
}

/// `exp(z)` with `z ~ Normal(μ, σ)`.
pub fn sample_numerical(mu: f64, sigma: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_numerical_with(mu, sigma, &mut rng)
}

pub fn sample_numerical_with(mu: f64, sigma: f64, rng: &mut impl Rng) -> f64 {
    assert!(sigma > 0.0, "sigma must be positive");
    Normal::new(mu, sigma)
        .expect("finite normal")
        .sample(rng)
        .exp()
}

/// Named parameter tensors in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Matrix<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn insert(&mut self, name: &str, m: Matrix<R>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(m);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<R>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn by_id(&self, id: usize) -> &Matrix<R> {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Matrix<R> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor by name; shapes must agree.
    pub fn load(&mut self, named: &[(String, Matrix<R>)]) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, found {}",
                self.len(),
                named.len()
            )));
        }
        for (name, m) in named {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Shape(format!("unexpected parameter `{name}`")))?;
            let cur = &self.tensors[id];
            if (cur.rows, cur.cols) != (m.rows, m.cols) {
                return Err(Error::Shape(format!(
                    "`{name}`: expected {}×{}, found {}×{}",
                    cur.rows, cur.cols, m.rows, m.cols
                )));
            }
            self.tensors[id] = m.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadScope {
    Next,
    Current,
}

/// One output-module prediction.
#[derive(Debug, Clone)]
pub struct Head {
    pub attribute: String,
    pub scope: HeadScope,
    pub class: AttributeClass,
    /// `[B·T × 2]` (μ, σ) for numericals, `[B·T × d_attr]` otherwise.
    pub var: Var,
    /// Column of the target in the batch's next or signal arrays.
    column: usize,
}

impl Head {
    /// Column of the target in the batch's next or signal arrays.
    pub fn column(&self) -> usize {
        self.column
    }
}

/// Result of one forward pass. Rows are `b·T + t` for transaction `t`.
pub struct Forward {
    pub batch: usize,
    pub steps: usize,
    /// Final-norm hidden states, `[B·(T+1) × d]`, static token at row `b·(T+1)`.
    pub hidden_all: Var,
    /// Hidden states of the transaction positions, `[B·T × d]`.
    pub hidden: Var,
    pub heads: Vec<Head>,
    params: Vec<Option<Var>>,
}

impl Forward {
    pub fn head(&self, attribute: &str) -> Option<&Head> {
        self.heads.iter().find(|h| h.attribute == attribute)
    }

    /// Parameter ids that took part, with their graph nodes.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

#[derive(Debug, Clone)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub schema: Schema,
    layout: SchemaLayout,
    pub params: ParamStore<R>,
}

struct ParamCache<'a, R> {
    store: &'a ParamStore<R>,
    vars: Vec<Option<Var>>,
}

impl<R: Real> ParamCache<'_, R> {
    fn var(&mut self, g: &mut Graph<R>, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        *self.vars[id].get_or_insert_with(|| g.leaf(self.store.by_id(id).clone()))
    }
}

impl<R: Real> Model<R> {
    /// Builds a randomly initialized model for a resolved schema.
    pub fn new(config: ModelConfig, schema: Schema) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        if !schema.is_resolved() {
            return Err(Error::Schema("schema has unresolved vocabularies".into()));
        }
        for name in config.embedding_dims.keys() {
            match schema.attribute(name) {
                Some(a) if a.is_categorical() => {}
                _ => return Err(Error::UnknownAttribute(name.clone())),
            }
        }
        let layout = schema.layout();
        let mut model = Model {
            config,
            schema,
            layout,
            params: ParamStore::default(),
        };
        model.init_params()?;
        Ok(model)
    }

    pub fn layout(&self) -> &SchemaLayout {
        &self.layout
    }

    pub fn embedding_dim(&self, attribute: &str) -> Result<usize> {
        if let Some(&d) = self.config.embedding_dims.get(attribute) {
            return Ok(d);
        }
        Ok(default_embedding_dim(
            self.schema.cardinality(attribute)?,
            self.config.hidden_dim,
        ))
    }

    fn init_params(&mut self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed);
        let d = self.config.hidden_dim;
        let nd = self.config.numeric_dim;
        let mut p = ParamStore::default();
        let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("std");
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| R::from_f64(n.sample(rng)))
                    .collect(),
            )
        };
        let linear = |p: &mut ParamStore<R>,
                      rng: &mut ChaCha8Rng,
                      name: &str,
                      fan_in: usize,
                      fan_out: usize| {
            p.insert(
                &format!("{name}.w"),
                normal(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            );
            p.insert(&format!("{name}.b"), Matrix::zeros(1, fan_out));
        };
        for a in self.schema.attributes.iter().filter(|a| a.is_categorical()) {
            let k = self.embedding_dim(&a.name)?;
            let c = self.schema.cardinality(&a.name)?;
            p.insert(
                &format!("emb.{}", a.name),
                normal(&mut rng, c, k, 1.0 / (k as f64).sqrt()),
            );
        }
        let l = self.layout.clone();
        for (module, nums, cats) in [
            ("static", l.static_num.clone(), l.static_cat.clone()),
            (
                "dynamic",
                l.input_num.iter().map(|&i| l.dyn_num[i].clone()).collect(),
                l.input_cat
                    .iter()
                    .map(|&i| l.dyn_cat[i].clone())
                    .collect::<Vec<_>>(),
            ),
        ] {
            let mut width = 0;
            if !nums.is_empty() {
                linear(&mut p, &mut rng, &format!("{module}.num"), nums.len(), nd);
                width += nd;
            }
            for c in &cats {
                width += self.embedding_dim(c)?;
            }
            if width == 0 {
                p.insert(&format!("{module}.token"), normal(&mut rng, 1, d, 1.0));
                continue;
            }
            for i in 0..self.config.input_module_layers {
                let fan_in = if i == 0 { width } else { d };
                linear(&mut p, &mut rng, &format!("{module}.l{i}"), fan_in, d);
            }
        }
        for b in 0..self.config.n_layers {
            for ln in ["ln1", "ln2"] {
                p.insert(
                    &format!("block{b}.{ln}.g"),
                    Matrix::from_vec(1, d, vec![R::one(); d]),
                );
                p.insert(&format!("block{b}.{ln}.b"), Matrix::zeros(1, d));
            }
            linear(&mut p, &mut rng, &format!("block{b}.qkv"), d, 3 * d);
            linear(&mut p, &mut rng, &format!("block{b}.proj"), d, d);
            linear(&mut p, &mut rng, &format!("block{b}.ff1"), d, 4 * d);
            linear(&mut p, &mut rng, &format!("block{b}.ff2"), 4 * d, d);
        }
        p.insert("final_ln.g", Matrix::from_vec(1, d, vec![R::one(); d]));
        p.insert("final_ln.b", Matrix::zeros(1, d));
        for (scope, name, class) in self.targets() {
            let out = match class {
                AttributeClass::Numerical => 2,
                _ => self.embedding_dim(&name)?,
            };
            linear(
                &mut p,
                &mut rng,
                &format!("{}.{}", scope_prefix(scope), name),
                d,
                out,
            );
        }
        self.params = p;
        Ok(())
    }

    /// Every predicted attribute: next targets first, then signals.
    pub fn targets(&self) -> Vec<(HeadScope, String, AttributeClass)> {
        let l = &self.layout;
        let class = |n: &str| self.schema.classify(n).expect("known attribute");
        let mut out = Vec::new();
        for &i in &l.next_num {
            out.push((
                HeadScope::Next,
                l.dyn_num[i].clone(),
                AttributeClass::Numerical,
            ));
        }
        for &i in &l.next_cat {
            out.push((HeadScope::Next, l.dyn_cat[i].clone(), class(&l.dyn_cat[i])));
        }
        for n in &l.sig_num {
            out.push((HeadScope::Current, n.clone(), AttributeClass::Numerical));
        }
        for n in &l.sig_cat {
            out.push((HeadScope::Current, n.clone(), class(n)));
        }
        out
    }

    fn input_module(
        &self,
        g: &mut Graph<R>,
        pc: &mut ParamCache<'_, R>,
        module: &str,
        rows: usize,
        nums: Option<Matrix<R>>,
        cats: Vec<(String, Vec<u32>)>,
    ) -> Result<Var> {
        let mut parts = Vec::new();
        if let Some(n) = nums {
            let x = g.leaf(n);
            let w = pc.var(g, &format!("{module}.num.w"));
            let b = pc.var(g, &format!("{module}.num.b"));
            parts.push(g.linear(x, w, b));
        }
        for (name, idx) in cats {
            let card = self.schema.cardinality(&name)?;
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= card) {
                return Err(Error::IndexOutOfRange {
                    attribute: name,
                    index: bad as usize,
                    cardinality: card,
                });
            }
            let table = pc.var(g, &format!("emb.{name}"));
            parts.push(g.gather(table, idx)?);
        }
        if parts.is_empty() {
            let token = pc.var(g, &format!("{module}.token"));
            return g.gather(token, vec![0; rows]);
        }
        let mut h = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(parts)
        };
        for i in 0..self.config.input_module_layers {
            let w = pc.var(g, &format!("{module}.l{i}.w"));
            let b = pc.var(g, &format!("{module}.l{i}.b"));
            let lin = g.linear(h, w, b);
            h = g.gelu(lin);
        }
        Ok(h)
    }

    /// Runs the network on a batch.
    pub fn forward(&self, g: &mut Graph<R>, batch: &Batch) -> Result<Forward> {
        let (bsz, steps) = (batch.size, batch.steps);
        if steps > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: steps,
                max: self.config.max_seq_len,
            });
        }
        let l = &self.layout;
        let w = batch.widths;
        if w.static_num != l.static_num.len()
            || w.static_cat != l.static_cat.len()
            || w.dyn_num != l.dyn_num.len()
            || w.dyn_cat != l.dyn_cat.len()
            || w.sig_num != l.sig_num.len()
            || w.sig_cat != l.sig_cat.len()
        {
            return Err(Error::Shape("batch widths do not match the schema".into()));
        }
        let mut pc = ParamCache {
            store: &self.params,
            vars: vec![None; self.params.len()],
        };
        let d = self.config.hidden_dim;
        let rows = bsz * steps;

        // Static token.
        let s_nums = (!l.static_num.is_empty()).then(|| {
            Matrix::from_vec(
                bsz,
                w.static_num,
                batch
                    .static_num
                    .iter()
                    .map(|&x| R::from_f64(log_scale(x as f64)))
                    .collect(),
            )
        });
        let s_cats = l
            .static_cat
            .iter()
            .enumerate()
            .map(|(c, n)| {
                (
                    n.clone(),
                    (0..bsz)
                        .map(|b| batch.static_cat[b * w.static_cat + c])
                        .collect(),
                )
            })
            .collect();
        let s = self.input_module(g, &mut pc, "static", bsz, s_nums, s_cats)?;

        // Transaction tokens.
        let d_nums = (!l.input_num.is_empty()).then(|| {
            let mut m = Matrix::zeros(rows, l.input_num.len());
            for r in 0..rows {
                for (o, &c) in l.input_num.iter().enumerate() {
                    m.data[r * l.input_num.len() + o] =
                        R::from_f64(log_scale(batch.dyn_num[r * w.dyn_num + c] as f64));
                }
            }
            m
        });
        let d_cats = l
            .input_cat
            .iter()
            .map(|&c| {
                (
                    l.dyn_cat[c].clone(),
                    (0..rows)
                        .map(|r| batch.dyn_cat[r * w.dyn_cat + c])
                        .collect(),
                )
            })
            .collect();
        let x = self.input_module(g, &mut pc, "dynamic", rows, d_nums, d_cats)?;

        let t1 = steps + 1;
        let mut h = g.prepend(s, x, steps);
        let mut key_valid = vec![false; bsz * t1];
        for b in 0..bsz {
            key_valid[b * t1] = true;
            for t in 0..steps {
                key_valid[b * t1 + 1 + t] = batch.mask[b * steps + t];
            }
        }
        for blk in 0..self.config.n_layers {
            let p = |n: &str| format!("block{blk}.{n}");
            let (g1, b1) = (pc.var(g, &p("ln1.g")), pc.var(g, &p("ln1.b")));
            let n1 = g.layer_norm(h, g1, b1);
            let (wq, bq) = (pc.var(g, &p("qkv.w")), pc.var(g, &p("qkv.b")));
            let qkv = g.linear(n1, wq, bq);
            let att = g.causal_attention(qkv, bsz, t1, self.config.n_heads, key_valid.clone());
            let (wp, bp) = (pc.var(g, &p("proj.w")), pc.var(g, &p("proj.b")));
            let proj = g.linear(att, wp, bp);
            h = g.add(h, proj);
            let (g2, b2) = (pc.var(g, &p("ln2.g")), pc.var(g, &p("ln2.b")));
            let n2 = g.layer_norm(h, g2, b2);
            let (w1, c1) = (pc.var(g, &p("ff1.w")), pc.var(g, &p("ff1.b")));
            let f1 = g.linear(n2, w1, c1);
            let a1 = g.gelu(f1);
            let (w2, c2) = (pc.var(g, &p("ff2.w")), pc.var(g, &p("ff2.b")));
            let f2 = g.linear(a1, w2, c2);
            h = g.add(h, f2);
        }
        let (fg, fb) = (pc.var(g, "final_ln.g"), pc.var(g, "final_ln.b"));
        let hidden_all = g.layer_norm(h, fg, fb);
        debug_assert_eq!(g.value(hidden_all).cols, d);
        let tx_rows: Vec<usize> = (0..bsz)
            .flat_map(|b| (0..steps).map(move |t| b * t1 + 1 + t))
            .collect();
        let hidden = g.select_rows(hidden_all, tx_rows);

        let mut heads = Vec::new();
        for (scope, name, class) in self.targets() {
            let prefix = format!("{}.{}", scope_prefix(scope), name);
            let (hw, hb) = (
                pc.var(g, &format!("{prefix}.w")),
                pc.var(g, &format!("{prefix}.b")),
            );
            let raw = g.linear(hidden, hw, hb);
            let var = if class == AttributeClass::Numerical {
                g.mu_sigma(raw)
            } else {
                raw
            };
            let column = match (scope, class) {
                (HeadScope::Next, AttributeClass::Numerical) => {
                    l.dyn_num.iter().position(|n| *n == name)
                }
                (HeadScope::Next, _) => l.dyn_cat.iter().position(|n| *n == name),
                (HeadScope::Current, AttributeClass::Numerical) => {
                    l.sig_num.iter().position(|n| *n == name)
                }
                (HeadScope::Current, _) => l.sig_cat.iter().position(|n| *n == name),
            }
            .expect("target column");
            heads.push(Head {
                attribute: name,
                scope,
                class,
                var,
                column,
            });
        }
        Ok(Forward {
            batch: bsz,
            steps,
            hidden_all,
            hidden,
            heads,
            params: pc.vars,
        })
    }

    /// Parameter leaf for an attribute's embedding table, adding it to the
    /// graph if the forward pass did not use it.
    pub fn table_var(&self, g: &mut Graph<R>, fwd: &mut Forward, attribute: &str) -> Result<Var> {
        let id = self
            .params
            .id(&format!("emb.{attribute}"))
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))?;
        Ok(*fwd.params[id].get_or_insert_with(|| g.leaf(self.params.by_id(id).clone())))
    }

    /// Targets and validity mask of a head.
    pub fn head_targets(&self, head: &Head, batch: &Batch) -> HeadTargets<R> {
        let w = batch.widths;
        let rows = batch.rows();
        match (head.scope, head.class) {
            (HeadScope::Next, AttributeClass::Numerical) => HeadTargets::Numeric {
                y: (0..rows)
                    .map(|r| {
                        R::from_f64(numeric_target(
                            batch.next_num[r * w.dyn_num + head.column] as f64,
                        ))
                    })
                    .collect(),
                mask: batch.next_mask.clone(),
            },
            (HeadScope::Next, _) => HeadTargets::Categorical {
                y: (0..rows)
                    .map(|r| batch.next_cat[r * w.dyn_cat + head.column])
                    .collect(),
                mask: batch.next_mask.clone(),
            },
            (HeadScope::Current, AttributeClass::Numerical) => HeadTargets::Numeric {
                y: (0..rows)
                    .map(|r| {
                        R::from_f64(numeric_target(
                            batch.sig_num[r * w.sig_num + head.column] as f64,
                        ))
                    })
                    .collect(),
                mask: batch.cur_mask.clone(),
            },
            (HeadScope::Current, _) => HeadTargets::Categorical {
                y: (0..rows)
                    .map(|r| batch.sig_cat[r * w.sig_cat + head.column])
                    .collect(),
                mask: batch.cur_mask.clone(),
            },
        }
    }

    /// Adds one loss node per head whose attribute is in `active` (all heads
    /// when `None`). High-cardinality heads use `plan`; their negatives come
    /// from `rng`.
    pub fn losses(
        &self,
        g: &mut Graph<R>,
        fwd: &mut Forward,
        batch: &Batch,
        plan: &NegativeSamplingPlan,
        rng: &mut ChaCha8Rng,
        active: Option<&[String]>,
    ) -> Result<Vec<(String, Var)>> {
        let mut out = Vec::new();
        let heads = fwd.heads.clone();
        for head in &heads {
            if active.is_some_and(|a| !a.contains(&head.attribute)) {
                continue;
            }
            let loss = match (head.class, self.head_targets(head, batch)) {
                (AttributeClass::Numerical, HeadTargets::Numeric { y, mask }) => {
                    g.num_nll(head.var, y, mask)?
                }
                (AttributeClass::LowCat, HeadTargets::Categorical { y, mask }) => {
                    let e = self.table_var(g, fwd, &head.attribute)?;
                    let logits = g.matmul_nt(head.var, e);
                    g.cross_entropy(logits, y, mask)?
                }
                (AttributeClass::HighCat, HeadTargets::Categorical { y, mask }) => {
                    let e = self.table_var(g, fwd, &head.attribute)?;
                    let card = self.schema.cardinality(&head.attribute)?;
                    match plan.strategy {
                        NegativeStrategy::Shared => {
                            let neg = sample_negatives(card, plan.n_negative, rng);
                            g.shared_nce(head.var, e, y, mask, batch.size, &neg, false)?
                        }
                        NegativeStrategy::Independent => {
                            let neg = sample_negatives(card, plan.n_negative * batch.rows(), rng);
                            g.independent_nce(head.var, e, y, mask, &neg, plan.n_negative)?
                        }
                        NegativeStrategy::Exhaustive => g.exhaustive_ce(head.var, e, y, mask)?,
                    }
                }
                _ => unreachable!("head class and targets agree"),
            };
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    attribute: head.attribute.clone(),
                    epoch: 0,
                    step: 0,
                });
            }
            out.push((head.attribute.clone(), loss));
        }
        Ok(out)
    }

    /// Full-vocabulary logits `H_a · Eᵀ` of a categorical head.
    pub fn logits(&self, g: &Graph<R>, head: &Head) -> Result<Matrix<R>> {
        let e = self
            .params
            .get(&format!("emb.{}", head.attribute))
            .ok_or_else(|| Error::UnknownAttribute(head.attribute.clone()))?;
        Ok(matmul(g.value(head.var), false, e, true))
    }

    /// Embedding table of an attribute, verbatim.
    pub fn export_embeddings(&self, attribute: &str) -> Result<Matrix<R>> {
        self.params
            .get(&format!("emb.{attribute}"))
            .cloned()
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }

    /// Hidden state at each card's final valid step, `[B × d]`.
    pub fn card_embeddings(&self, g: &mut Graph<R>, fwd: &Forward, batch: &Batch) -> Matrix<R> {
        let t1 = batch.steps + 1;
        let rows: Vec<usize> = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| b * t1 + len)
            .collect();
        let v = g.select_rows(fwd.hidden_all, rows);
        g.value(v).clone()
    }

    /// Same architecture and values at another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            schema: self.schema.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }
}

fn scope_prefix(scope: HeadScope) -> &'static str {
    match scope {
        HeadScope::Next => "next",
        HeadScope::Current => "cur",
    }
}

#[derive(Debug, Clone)]
pub enum HeadTargets<R> {
    Numeric { y: Vec<R>, mask: Vec<bool> },
    Categorical { y: Vec<u32>, mask: Vec<bool> },
}

/// Softmax of one logit row.
pub fn softmax<R: Real>(row: &[R]) -> Vec<R> {
    let m = row.iter().copied().fold(R::neg_infinity(), R::max);
    let e: Vec<R> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: R = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, CorpusLayout, TemporalSplit};
    use crate::syngen::{default_schema, generate, WorldConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            input_module_layers: 1,
            numeric_dim: 4,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    fn corpus() -> (Schema, Vec<Batch>) {
        let cfg = WorldConfig {
            n_cards: 12,
            n_merchants: 40,
            n_countries: 3,
            n_categories: 4,
            n_cities: 6,
            time_span_days: 60,
            abnormal_rate: 0.1,
            seed: 1,
            mean_transactions_per_card: 8.0,
            travel_rate: 0.03,
        };
        let recs = generate(&cfg, &default_schema()).unwrap();
        let split = TemporalSplit::new(40 * 86_400, 50 * 86_400, 60 * 86_400).unwrap();
        let built = build_corpus(&recs, &default_schema(), split, 16).unwrap();
        let layout = CorpusLayout::new(&built.schema).unwrap();
        let batches = built.train.ordered_batches(&layout, 4).collect();
        (built.schema, batches)
    }

    #[test]
    fn default_embedding_dims() {
        assert_eq!(default_embedding_dim(251, 256), 32);
        assert_eq!(default_embedding_dim(2, 256), 16);
        assert_eq!(default_embedding_dim(100_000, 256), 144);
        assert_eq!(default_embedding_dim(100_000, 64), 64);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn log_scale_of_amount() {
        assert!((log_scale(3.14) - 4.14f64.ln()).abs() < 1e-15);
        assert_eq!(log_scale(0.0), 0.0);
    }

    #[test]
    fn sample_numerical_is_positive_and_seeded() {
        assert_eq!(sample_numerical(1.0, 0.5, 9), sample_numerical(1.0, 0.5, 9));
        let v = sample_numerical(2.0, 1e-12, 1);
        assert!((v - 2f64.exp()).abs() < 1e-9);
        assert!(sample_numerical(-50.0, 3.0, 4) > 0.0);
    }

    #[test]
    fn heads_cover_exactly_the_targets() {
        let (schema, batches) = corpus();
        let m: Model<f32> = Model::new(tiny(), schema.clone()).unwrap();
        let mut g = Graph::new();
        let f = m.forward(&mut g, &batches[0]).unwrap();
        let mut names: Vec<String> = f.heads.iter().map(|h| h.attribute.clone()).collect();
        names.sort();
        let mut want: Vec<String> = schema
            .attributes
            .iter()
            .filter(|a| a.has_role(crate::schema::Role::NextTarget) || a.is_signal())
            .map(|a| a.name.clone())
            .collect();
        want.sort();
        assert_eq!(names, want);
        let rows = batches[0].rows();
        for h in &f.heads {
            assert_eq!(g.value(h.var).rows, rows);
            if h.class == AttributeClass::Numerical {
                assert!(g.value(h.var).data.chunks(2).all(|c| c[1] > 0.0));
            }
        }
    }

    #[test]
    fn param_count_is_independent_of_length() {
        let (schema, _) = corpus();
        let mut a = tiny();
        a.max_seq_len = 8;
        let mut b = tiny();
        b.max_seq_len = 512;
        let ma: Model<f32> = Model::new(a, schema.clone()).unwrap();
        let mb: Model<f32> = Model::new(b, schema).unwrap();
        assert_eq!(ma.params.element_count(), mb.params.element_count());
    }

    #[test]
    fn rejects_overlong_batches() {
        let (schema, batches) = corpus();
        let mut c = tiny();
        c.max_seq_len = 2;
        let m: Model<f32> = Model::new(c, schema).unwrap();
        let long = batches.iter().find(|b| b.steps > 2).unwrap();
        assert!(matches!(
            m.forward(&mut Graph::new(), long),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let (schema, batches) = corpus();
        let mut m: Model<f64> = Model::new(tiny(), schema).unwrap();
        for suffix in ["w", "b"] {
            let id = m
                .params
                .id(&format!("next.merchant_category.{suffix}"))
                .unwrap();
            m.params
                .by_id_mut(id)
                .data
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let f = m.forward(&mut g, &batches[0]).unwrap();
        let logits = m.logits(&g, f.head("merchant_category").unwrap()).unwrap();
        assert!(logits.data.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn permuting_transactions_changes_outputs() {
        let (schema, batches) = corpus();
        let m: Model<f64> = Model::new(tiny(), schema).unwrap();
        let b = &batches[0];
        let mut p = b.clone();
        let w = b.widths.dyn_cat;
        // swap steps 0 and 1 of sample 0
        for c in 0..w {
            p.dyn_cat.swap(c, w + c);
        }
        for c in 0..b.widths.dyn_num {
            p.dyn_num.swap(c, b.widths.dyn_num + c);
        }
        let run = |bb: &Batch| {
            let mut g = Graph::new();
            let f = m.forward(&mut g, bb).unwrap();
            g.value(f.hidden).row(1).to_vec()
        };
        assert_ne!(run(b), run(&p));
    }
}
