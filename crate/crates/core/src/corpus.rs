//! From interleaved raw records to padded, masked batches.
//!
//! Pipeline: [`group_and_sort`] → [`build_vocabularies`] → [`encode`] →
//! [`split`] → [`window`] → [`Corpus::batches`]. Shards persist encoded
//! sequences in a fixed little-endian layout (see [`write_shard`]).

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Schema, Scope, Vocabulary};
use crate::syngen::{RawTransaction, RawValue, SECONDS_PER_DAY};

pub const SHARD_MAGIC: &[u8; 8] = b"TXNSHARD";
pub const SHARD_VERSION: u32 = 1;
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;
pub const DEFAULT_BATCH_SIZE: usize = 256;

/// All transactions of one card, chronologically ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct CardHistory {
    pub card_id: u64,
    pub transactions: Vec<RawTransaction>,
}

/// Groups records by card (ascending card id) and sorts each card's
/// transactions by timestamp; equal timestamps keep input order.
pub fn group_and_sort(records: &[RawTransaction], schema: &Schema) -> Result<Vec<CardHistory>> {
    let mut groups: BTreeMap<u64, Vec<RawTransaction>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        for (name, _) in &r.values {
            if schema.attribute(name).is_none() {
                return Err(Error::Record {
                    record: format!("#{i} (card {}, ts {})", r.card_id, r.timestamp),
                    reason: format!("unknown attribute `{name}`"),
                });
            }
        }
        groups.entry(r.card_id).or_default().push(r.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(card_id, mut transactions)| {
            transactions.sort_by_key(|t| t.timestamp);
            CardHistory {
                card_id,
                transactions,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub train_end: i64,
    pub val_end: i64,
    pub test_end: i64,
}

impl TemporalSplit {
    pub fn new(train_end: i64, val_end: i64, test_end: i64) -> Result<Self> {
        if !(train_end < val_end && val_end < test_end) {
            return Err(Error::config(
                "split",
                format!(
                    "need train_end < val_end < test_end, got {train_end}/{val_end}/{test_end}"
                ),
            ));
        }
        Ok(TemporalSplit {
            train_end,
            val_end,
            test_end,
        })
    }

    /// Boundaries in 30-day months from time zero, e.g. 24/1/1.
    pub fn months(train: u32, val: u32, test: u32) -> Result<Self> {
        let m = 30 * SECONDS_PER_DAY;
        let a = train as i64 * m;
        let b = a + val as i64 * m;
        Self::new(a, b, b + test as i64 * m)
    }
}

/// Builds vocabularies from transactions before `train_end` and attaches
/// them to a copy of the schema. Static attributes are counted once per card.
pub fn build_vocabularies(
    schema: &Schema,
    histories: &[CardHistory],
    train_end: i64,
) -> Result<Schema> {
    let mut resolved = schema.clone();
    for attr in schema.attributes.iter().filter(|a| a.is_categorical()) {
        let policy = attr.vocab.unwrap_or_default();
        let mut tokens: Vec<&str> = Vec::new();
        for h in histories {
            let train = h.transactions.iter().filter(|t| t.timestamp < train_end);
            let take: Box<dyn Iterator<Item = &RawTransaction>> = match attr.scope {
                Scope::Static => Box::new(train.take(1)),
                Scope::Dynamic => Box::new(train),
            };
            for t in take {
                if let Some(RawValue::Cat(tok)) = t.get(&attr.name) {
                    tokens.push(tok);
                }
            }
        }
        let vocab = Vocabulary::build(&attr.name, tokens, policy.min_count, policy.max_size)?;
        resolved.set_vocabulary(vocab)?;
    }
    resolved.validate()?;
    Ok(resolved)
}

/// Column counts of every attribute group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Widths {
    pub static_num: usize,
    pub static_cat: usize,
    pub dyn_num: usize,
    pub dyn_cat: usize,
    pub sig_num: usize,
    pub sig_cat: usize,
}

/// Widths plus the padding index of every categorical column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLayout {
    pub widths: Widths,
    pub static_cat_pad: Vec<u32>,
    pub dyn_cat_pad: Vec<u32>,
    pub sig_cat_pad: Vec<u32>,
}

impl CorpusLayout {
    pub fn new(schema: &Schema) -> Result<Self> {
        let l = schema.layout();
        let pads = |names: &[String]| -> Result<Vec<u32>> {
            names
                .iter()
                .map(|n| schema.vocabulary(n).map(Vocabulary::pad_index))
                .collect()
        };
        Ok(CorpusLayout {
            widths: Widths {
                static_num: l.static_num.len(),
                static_cat: l.static_cat.len(),
                dyn_num: l.dyn_num.len(),
                dyn_cat: l.dyn_cat.len(),
                sig_num: l.sig_num.len(),
                sig_cat: l.sig_cat.len(),
            },
            static_cat_pad: pads(&l.static_cat)?,
            dyn_cat_pad: pads(&l.dyn_cat)?,
            sig_cat_pad: pads(&l.sig_cat)?,
        })
    }
}

/// One card's encoded sequence. Steps before `target_from` are context
/// only: they feed the model but carry no loss or metric.
#[derive(Debug, Clone, PartialEq)]
pub struct CardSequence {
    pub card_id: u64,
    pub widths: Widths,
    pub static_num: Vec<f32>,
    pub static_cat: Vec<u32>,
    pub timestamps: Vec<i64>,
    pub dyn_num: Vec<f32>,
    pub dyn_cat: Vec<u32>,
    pub sig_num: Vec<f32>,
    pub sig_cat: Vec<u32>,
    pub target_from: usize,
}

impl CardSequence {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Steps that are scored (current-signal targets).
    pub fn target_count(&self) -> usize {
        self.len() - self.target_from
    }

    pub fn dyn_num_at(&self, step: usize) -> &[f32] {
        let w = self.widths.dyn_num;
        &self.dyn_num[step * w..(step + 1) * w]
    }

    pub fn dyn_cat_at(&self, step: usize) -> &[u32] {
        let w = self.widths.dyn_cat;
        &self.dyn_cat[step * w..(step + 1) * w]
    }

    pub fn sig_num_at(&self, step: usize) -> &[f32] {
        let w = self.widths.sig_num;
        &self.sig_num[step * w..(step + 1) * w]
    }

    pub fn sig_cat_at(&self, step: usize) -> &[u32] {
        let w = self.widths.sig_cat;
        &self.sig_cat[step * w..(step + 1) * w]
    }

    /// Steps `[start, end)` as a new sequence with rebased `target_from`.
    pub fn slice(&self, start: usize, end: usize) -> CardSequence {
        let w = self.widths;
        CardSequence {
            card_id: self.card_id,
            widths: w,
            static_num: self.static_num.clone(),
            static_cat: self.static_cat.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            dyn_num: self.dyn_num[start * w.dyn_num..end * w.dyn_num].to_vec(),
            dyn_cat: self.dyn_cat[start * w.dyn_cat..end * w.dyn_cat].to_vec(),
            sig_num: self.sig_num[start * w.sig_num..end * w.sig_num].to_vec(),
            sig_cat: self.sig_cat[start * w.sig_cat..end * w.sig_cat].to_vec(),
            target_from: self.target_from.saturating_sub(start).min(end - start),
        }
    }
}

/// Encodes a history with the schema's vocabularies.
pub fn encode(history: &CardHistory, schema: &Schema) -> Result<CardSequence> {
    let layout = schema.layout();
    let first = history.transactions.first().ok_or_else(|| Error::Record {
        record: format!("card {}", history.card_id),
        reason: "empty history".into(),
    })?;
    let rec_id = |t: &RawTransaction| format!("card {} ts {}", t.card_id, t.timestamp);
    let num = |t: &RawTransaction, name: &str| -> Result<f32> {
        match t.get(name) {
            Some(RawValue::Num(v)) if v.is_finite() => Ok(*v as f32),
            _ => Err(Error::Record {
                record: rec_id(t),
                reason: format!("missing or non-numeric `{name}`"),
            }),
        }
    };
    let cat = |t: &RawTransaction, name: &str| -> Result<u32> {
        match t.get(name) {
            Some(RawValue::Cat(tok)) => Ok(schema.vocabulary(name)?.lookup(tok)),
            _ => Err(Error::Record {
                record: rec_id(t),
                reason: format!("missing or non-categorical `{name}`"),
            }),
        }
    };
    let widths = CorpusLayout::new(schema)?.widths;
    let mut seq = CardSequence {
        card_id: history.card_id,
        widths,
        static_num: layout
            .static_num
            .iter()
            .map(|n| num(first, n))
            .collect::<Result<_>>()?,
        static_cat: layout
            .static_cat
            .iter()
            .map(|n| cat(first, n))
            .collect::<Result<_>>()?,
        timestamps: Vec::with_capacity(history.transactions.len()),
        dyn_num: Vec::new(),
        dyn_cat: Vec::new(),
        sig_num: Vec::new(),
        sig_cat: Vec::new(),
        target_from: 0,
    };
    for t in &history.transactions {
        if t.card_id != history.card_id {
            return Err(Error::Record {
                record: rec_id(t),
                reason: "card id differs from its group".into(),
            });
        }
        seq.timestamps.push(t.timestamp);
        for n in &layout.dyn_num {
            seq.dyn_num.push(num(t, n)?);
        }
        for n in &layout.dyn_cat {
            seq.dyn_cat.push(cat(t, n)?);
        }
        for n in &layout.sig_num {
            seq.sig_num.push(num(t, n)?);
        }
        for n in &layout.sig_cat {
            seq.sig_cat.push(cat(t, n)?);
        }
    }
    Ok(seq)
}

/// Splits a sequence into consecutive non-overlapping windows of at most
/// `max_seq_len` steps. Windows with no scored step are dropped.
pub fn window(seq: &CardSequence, max_seq_len: usize) -> Vec<CardSequence> {
    assert!(max_seq_len >= 2, "max_seq_len must be >= 2");
    let mut out = Vec::new();
    let mut start = 0;
    while start < seq.len() {
        let end = (start + max_seq_len).min(seq.len());
        let w = seq.slice(start, end);
        if w.target_count() > 0 {
            out.push(w);
        }
        start = end;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitCorpus {
    pub train: Vec<CardSequence>,
    pub val: Vec<CardSequence>,
    pub test: Vec<CardSequence>,
}

/// Assigns every transaction to exactly one partition by timestamp. Later
/// partitions keep the earlier history as unscored context.
pub fn split(seqs: &[CardSequence], split: TemporalSplit) -> SplitCorpus {
    let mut out = SplitCorpus::default();
    for s in seqs {
        let count = |bound: i64| s.timestamps.partition_point(|&t| t < bound);
        let a = count(split.train_end);
        let b = count(split.val_end);
        let c = count(split.test_end);
        if a > 0 {
            out.train.push(s.slice(0, a));
        }
        if b > a {
            let mut v = s.slice(0, b);
            v.target_from = a;
            out.val.push(v);
        }
        if c > b {
            let mut t = s.slice(0, c);
            t.target_from = b;
            out.test.push(t);
        }
    }
    for (name, part) in [
        ("train", &out.train),
        ("val", &out.val),
        ("test", &out.test),
    ] {
        if part.is_empty() {
            log::warn!("partition `{name}` is empty");
        }
    }
    out
}

/// A padded, masked bundle of `size` sequences, `steps` wide.
/// Flat arrays are row-major over `(sample, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub steps: usize,
    pub widths: Widths,
    pub card_ids: Vec<u64>,
    pub lengths: Vec<usize>,
    pub static_num: Vec<f32>,
    pub static_cat: Vec<u32>,
    pub dyn_num: Vec<f32>,
    pub dyn_cat: Vec<u32>,
    pub mask: Vec<bool>,
    /// A successor exists in this window and it is a scored step.
    pub next_mask: Vec<bool>,
    /// This step is scored.
    pub cur_mask: Vec<bool>,
    /// Dynamic content of step + 1 (padding where absent).
    pub next_num: Vec<f32>,
    pub next_cat: Vec<u32>,
    pub sig_num: Vec<f32>,
    pub sig_cat: Vec<u32>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&CardSequence], layout: &CorpusLayout) -> Batch {
        let w = layout.widths;
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let rows = b * steps;
        let mut batch = Batch {
            size: b,
            steps,
            widths: w,
            card_ids: seqs.iter().map(|s| s.card_id).collect(),
            lengths: seqs.iter().map(|s| s.len()).collect(),
            static_num: Vec::with_capacity(b * w.static_num),
            static_cat: Vec::with_capacity(b * w.static_cat),
            dyn_num: vec![0.0; rows * w.dyn_num],
            dyn_cat: layout.dyn_cat_pad.repeat(rows),
            mask: vec![false; rows],
            next_mask: vec![false; rows],
            cur_mask: vec![false; rows],
            next_num: vec![0.0; rows * w.dyn_num],
            next_cat: layout.dyn_cat_pad.repeat(rows),
            sig_num: vec![0.0; rows * w.sig_num],
            sig_cat: layout.sig_cat_pad.repeat(rows),
        };
        for (i, s) in seqs.iter().enumerate() {
            batch.static_num.extend_from_slice(&s.static_num);
            batch.static_cat.extend_from_slice(&s.static_cat);
            for j in 0..s.len() {
                let r = i * steps + j;
                batch.mask[r] = true;
                batch.cur_mask[r] = j >= s.target_from;
                batch.dyn_num[r * w.dyn_num..(r + 1) * w.dyn_num].copy_from_slice(s.dyn_num_at(j));
                batch.dyn_cat[r * w.dyn_cat..(r + 1) * w.dyn_cat].copy_from_slice(s.dyn_cat_at(j));
                batch.sig_num[r * w.sig_num..(r + 1) * w.sig_num].copy_from_slice(s.sig_num_at(j));
                batch.sig_cat[r * w.sig_cat..(r + 1) * w.sig_cat].copy_from_slice(s.sig_cat_at(j));
                if j + 1 < s.len() && j + 1 >= s.target_from {
                    batch.next_mask[r] = true;
                    batch.next_num[r * w.dyn_num..(r + 1) * w.dyn_num]
                        .copy_from_slice(s.dyn_num_at(j + 1));
                    batch.next_cat[r * w.dyn_cat..(r + 1) * w.dyn_cat]
                        .copy_from_slice(s.dyn_cat_at(j + 1));
                }
            }
        }
        batch
    }

    pub fn rows(&self) -> usize {
        self.size * self.steps
    }
}

/// A partition: a list of windowed sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<CardSequence>,
}

impl Corpus {
    pub fn new(sequences: Vec<CardSequence>) -> Self {
        Corpus { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn transaction_count(&self) -> usize {
        self.sequences.iter().map(CardSequence::len).sum()
    }

    pub fn target_count(&self) -> usize {
        self.sequences.iter().map(CardSequence::target_count).sum()
    }

    /// Sequence order for one epoch: a ChaCha8 shuffle keyed by
    /// `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Shuffled batches for one epoch.
    pub fn batches<'a>(
        &'a self,
        layout: &'a CorpusLayout,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> impl Iterator<Item = Batch> + 'a {
        assert!(batch_size > 0);
        let order = self.epoch_order(seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| {
            let seqs: Vec<&CardSequence> = idx.iter().map(|&i| &self.sequences[i]).collect();
            Batch::from_sequences(&seqs, layout)
        })
    }

    /// Unshuffled batches in corpus order (evaluation).
    pub fn ordered_batches<'a>(
        &'a self,
        layout: &'a CorpusLayout,
        batch_size: usize,
    ) -> impl Iterator<Item = Batch> + 'a {
        assert!(batch_size > 0);
        self.sequences.chunks(batch_size).map(move |c| {
            let seqs: Vec<&CardSequence> = c.iter().collect();
            Batch::from_sequences(&seqs, layout)
        })
    }
}

/// End-to-end corpus assembly from raw records.
pub struct BuiltCorpus {
    pub schema: Schema,
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

pub fn build_corpus(
    records: &[RawTransaction],
    schema: &Schema,
    split_at: TemporalSplit,
    max_seq_len: usize,
) -> Result<BuiltCorpus> {
    if max_seq_len < 2 {
        return Err(Error::config("max_seq_len", "must be >= 2"));
    }
    let histories = group_and_sort(records, schema)?;
    let schema = build_vocabularies(schema, &histories, split_at.train_end)?;
    let full: Vec<CardSequence> = histories
        .iter()
        .map(|h| encode(h, &schema))
        .collect::<Result<_>>()?;
    let parts = split(&full, split_at);
    let win = |v: Vec<CardSequence>| -> Corpus {
        Corpus::new(v.iter().flat_map(|s| window(s, max_seq_len)).collect())
    };
    Ok(BuiltCorpus {
        schema,
        train: win(parts.train),
        val: win(parts.val),
        test: win(parts.test),
    })
}

// ---------------------------------------------------------------------------
// Shards
// ---------------------------------------------------------------------------

/// Writes sequences as one shard.
///
/// Layout (little-endian): magic `TXNSHARD`, u32 version, 32-byte schema
/// hash, six u32 widths (static num/cat, dynamic num/cat, signal num/cat),
/// u64 sequence count; then per sequence: u64 card id, u32 length, u32
/// target_from, static f32s, static u32s, and per step an i64 timestamp
/// followed by dynamic f32s, dynamic u32s, signal f32s, signal u32s.
pub fn write_shard(
    path: &Path,
    schema_hash: &str,
    widths: Widths,
    seqs: &[CardSequence],
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let hash = hex::decode(schema_hash).map_err(|e| Error::Invalid(format!("schema hash: {e}")))?;
    if hash.len() != 32 {
        return Err(Error::Invalid("schema hash must be 32 bytes".into()));
    }
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    w.write_all(SHARD_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(SHARD_VERSION).map_err(io)?;
    w.write_all(&hash).map_err(io)?;
    for v in [
        widths.static_num,
        widths.static_cat,
        widths.dyn_num,
        widths.dyn_cat,
        widths.sig_num,
        widths.sig_cat,
    ] {
        w.write_u32::<LittleEndian>(v as u32).map_err(io)?;
    }
    w.write_u64::<LittleEndian>(seqs.len() as u64).map_err(io)?;
    for s in seqs {
        if s.widths != widths {
            return Err(Error::Shape(
                "sequence widths differ from shard widths".into(),
            ));
        }
        w.write_u64::<LittleEndian>(s.card_id).map_err(io)?;
        w.write_u32::<LittleEndian>(s.len() as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(s.target_from as u32)
            .map_err(io)?;
        for &x in &s.static_num {
            w.write_f32::<LittleEndian>(x).map_err(io)?;
        }
        for &x in &s.static_cat {
            w.write_u32::<LittleEndian>(x).map_err(io)?;
        }
        for j in 0..s.len() {
            w.write_i64::<LittleEndian>(s.timestamps[j]).map_err(io)?;
            for &x in s.dyn_num_at(j) {
                w.write_f32::<LittleEndian>(x).map_err(io)?;
            }
            for &x in s.dyn_cat_at(j) {
                w.write_u32::<LittleEndian>(x).map_err(io)?;
            }
            for &x in s.sig_num_at(j) {
                w.write_f32::<LittleEndian>(x).map_err(io)?;
            }
            for &x in s.sig_cat_at(j) {
                w.write_u32::<LittleEndian>(x).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads a shard, refusing it when its schema hash differs from `schema_hash`.
pub fn read_shard(path: &Path, schema_hash: &str) -> Result<Vec<CardSequence>> {
    let io = |e| Error::io(path, e);
    let fmt = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != SHARD_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != SHARD_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash).map_err(io)?;
    let found = hex::encode(hash);
    if found != schema_hash {
        return Err(Error::SchemaHashMismatch {
            expected: schema_hash.to_string(),
            found,
        });
    }
    let mut wv = [0usize; 6];
    for v in wv.iter_mut() {
        *v = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    }
    let widths = Widths {
        static_num: wv[0],
        static_cat: wv[1],
        dyn_num: wv[2],
        dyn_cat: wv[3],
        sig_num: wv[4],
        sig_cat: wv[5],
    };
    let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let card_id = r.read_u64::<LittleEndian>().map_err(io)?;
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let target_from = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if target_from > len {
            return Err(fmt("target_from beyond sequence length"));
        }
        let read_f =
            |r: &mut BufReader<std::fs::File>, k: usize, dst: &mut Vec<f32>| -> Result<()> {
                for _ in 0..k {
                    dst.push(
                        r.read_f32::<LittleEndian>()
                            .map_err(|e| Error::io(path, e))?,
                    );
                }
                Ok(())
            };
        let read_u =
            |r: &mut BufReader<std::fs::File>, k: usize, dst: &mut Vec<u32>| -> Result<()> {
                for _ in 0..k {
                    dst.push(
                        r.read_u32::<LittleEndian>()
                            .map_err(|e| Error::io(path, e))?,
                    );
                }
                Ok(())
            };
        let mut s = CardSequence {
            card_id,
            widths,
            static_num: Vec::with_capacity(widths.static_num),
            static_cat: Vec::with_capacity(widths.static_cat),
            timestamps: Vec::with_capacity(len),
            dyn_num: Vec::with_capacity(len * widths.dyn_num),
            dyn_cat: Vec::with_capacity(len * widths.dyn_cat),
            sig_num: Vec::with_capacity(len * widths.sig_num),
            sig_cat: Vec::with_capacity(len * widths.sig_cat),
            target_from,
        };
        read_f(&mut r, widths.static_num, &mut s.static_num)?;
        read_u(&mut r, widths.static_cat, &mut s.static_cat)?;
        for _ in 0..len {
            s.timestamps.push(r.read_i64::<LittleEndian>().map_err(io)?);
            read_f(&mut r, widths.dyn_num, &mut s.dyn_num)?;
            read_u(&mut r, widths.dyn_cat, &mut s.dyn_cat)?;
            read_f(&mut r, widths.sig_num, &mut s.sig_num)?;
            read_u(&mut r, widths.sig_cat, &mut s.sig_cat)?;
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub shards: Vec<String>,
    pub sequences: usize,
    pub transactions: usize,
    pub scored_transactions: usize,
}

/// `corpus.json` next to the shards and `schema.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_hash: String,
    pub split: TemporalSplit,
    pub max_seq_len: usize,
    pub partitions: BTreeMap<String, PartitionManifest>,
}

pub const SEQUENCES_PER_SHARD: usize = 4096;

/// Writes `schema.toml`, `corpus.json` and `shards/<partition>-NNNNN.bin`.
pub fn save_corpus(
    dir: &Path,
    built: &BuiltCorpus,
    split_at: TemporalSplit,
    max_seq_len: usize,
) -> Result<CorpusManifest> {
    let shard_dir = dir.join("shards");
    std::fs::create_dir_all(&shard_dir).map_err(|e| Error::io(&shard_dir, e))?;
    let schema_path = dir.join("schema.toml");
    std::fs::write(&schema_path, built.schema.to_toml()).map_err(|e| Error::io(&schema_path, e))?;
    let hash = built.schema.hash();
    let widths = CorpusLayout::new(&built.schema)?.widths;
    let mut partitions = BTreeMap::new();
    for (name, corpus) in [
        ("train", &built.train),
        ("val", &built.val),
        ("test", &built.test),
    ] {
        let mut shards = Vec::new();
        for (k, chunk) in corpus.sequences.chunks(SEQUENCES_PER_SHARD).enumerate() {
            let file = format!("shards/{name}-{k:05}.bin");
            write_shard(&dir.join(&file), &hash, widths, chunk)?;
            shards.push(file);
        }
        partitions.insert(
            name.to_string(),
            PartitionManifest {
                shards,
                sequences: corpus.len(),
                transactions: corpus.transaction_count(),
                scored_transactions: corpus.target_count(),
            },
        );
    }
    let manifest = CorpusManifest {
        schema_hash: hash,
        split: split_at,
        max_seq_len,
        partitions,
    };
    let mpath = dir.join("corpus.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// A corpus directory loaded back from disk.
pub struct CorpusDir {
    pub root: PathBuf,
    pub schema: Schema,
    pub manifest: CorpusManifest,
}

impl CorpusDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let spath = dir.join("schema.toml");
        let text = std::fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
        let schema = Schema::from_toml(&text)?;
        let mpath = dir.join("corpus.json");
        let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&mtext)?;
        if manifest.schema_hash != schema.hash() {
            return Err(Error::SchemaHashMismatch {
                expected: manifest.schema_hash.clone(),
                found: schema.hash(),
            });
        }
        Ok(CorpusDir {
            root: dir.to_path_buf(),
            schema,
            manifest,
        })
    }

    pub fn partition(&self, name: &str) -> Result<Corpus> {
        let p = self
            .manifest
            .partitions
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no partition `{name}`")))?;
        let mut seqs = Vec::with_capacity(p.sequences);
        for shard in &p.shards {
            seqs.extend(read_shard(
                &self.root.join(shard),
                &self.manifest.schema_hash,
            )?);
        }
        Ok(Corpus::new(seqs))
    }
}
