//! Interaction sequences: construction from raw records, a synthetic
//! generator with a planted topic/recency signal, and the leak-free
//! per-user temporal split.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// One user-item interaction with a binary feedback label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub label: u8,
    pub timestamp: i64,
}

/// A user's chronological interaction sequence with dense item indices.
#[derive(Debug, Clone)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
    pub labels: Vec<u8>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Sequences plus the id tables used to map back to external string ids.
/// Dense indices are assigned in first-appearance order over the record
/// stream, so construction is deterministic for a fixed input order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<UserSequence>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Builds a dataset from raw records: groups by user, sorts each group by
    /// timestamp (stable, so equal timestamps keep input order), and keeps
    /// only the most recent `max_seq_len` interactions per user.
    pub fn from_records(records: &[InteractionRecord], max_seq_len: usize) -> Result<Dataset> {
        if max_seq_len == 0 {
            return Err(Error::Config(String::from("max_seq_len must be positive")));
        }
        let mut user_index: BTreeMap<&str, u32> = BTreeMap::new();
        let mut item_index: BTreeMap<&str, u32> = BTreeMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut per_user: Vec<Vec<(i64, u32, u8)>> = Vec::new();

        for rec in records {
            if rec.label > 1 {
                return Err(Error::Data(format!(
                    "label {} for user {} is outside {{0, 1}}",
                    rec.label, rec.user_id
                )));
            }
            let u = *user_index.entry(rec.user_id.as_str()).or_insert_with(|| {
                user_ids.push(rec.user_id.clone());
                per_user.push(Vec::new());
                (user_ids.len() - 1) as u32
            });
            let i = *item_index.entry(rec.item_id.as_str()).or_insert_with(|| {
                item_ids.push(rec.item_id.clone());
                (item_ids.len() - 1) as u32
            });
            per_user[u as usize].push((rec.timestamp, i, rec.label));
        }

        let mut sequences = Vec::with_capacity(per_user.len());
        for (u, mut rows) in per_user.into_iter().enumerate() {
            rows.sort_by_key(|&(ts, _, _)| ts);
            let start = rows.len().saturating_sub(max_seq_len);
            let rows = &rows[start..];
            sequences.push(UserSequence {
                user: u as u32,
                items: rows.iter().map(|&(_, i, _)| i).collect(),
                labels: rows.iter().map(|&(_, _, y)| y).collect(),
                timestamps: rows.iter().map(|&(ts, _, _)| ts).collect(),
            });
        }
        Ok(Dataset { sequences, user_ids, item_ids })
    }
}

/// Parameters of the synthetic interaction generator.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub seq_len: usize,
    /// Number of interest topics; item `i` belongs to topic `i % topics`.
    pub topics: usize,
    /// Interest cycle length; the first half of each cycle is the active phase.
    pub period: usize,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.seq_len == 0 {
            return Err(Error::Config(String::from("users, items, seq_len must be positive")));
        }
        if self.topics == 0 || self.topics > self.items {
            return Err(Error::Config(String::from("topics must be in [1, items]")));
        }
        if self.period == 0 {
            return Err(Error::Config(String::from("period must be positive")));
        }
        Ok(())
    }
}

/// Whether position `t` falls in the active half of the interest cycle.
pub fn in_active_phase(t: usize, period: usize) -> bool {
    t % period < period.div_ceil(2)
}

/// Generates seed-deterministic synthetic interactions. Each user has a
/// preferred topic; half of the interactions are drawn from that topic. The
/// label is 1 with probability 0.8 when the item matches the user's topic
/// and the position falls in the active phase of the cycle, and with
/// probability 0.1 otherwise, which plants a signal that a sequence model
/// can recover while keeping the positive rate in a CTR-plausible band.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<InteractionRecord>> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut records = Vec::with_capacity(config.users * config.seq_len);
    let mut positives = 0u64;

    for u in 0..config.users {
        let user_topic = rng.below(config.topics as u64) as usize;
        // Items of this topic: user_topic, user_topic + topics, ...
        let n_topic_items = (config.items - user_topic).div_ceil(config.topics);
        for t in 0..config.seq_len {
            let item = if n_topic_items > 0 && rng.uniform() < 0.5 {
                user_topic + config.topics * rng.below(n_topic_items as u64) as usize
            } else {
                rng.below(config.items as u64) as usize
            };
            let matches = item % config.topics == user_topic;
            let p = if matches && in_active_phase(t, config.period) { 0.8 } else { 0.1 };
            let label = (rng.uniform() < p) as u8;
            positives += label as u64;
            records.push(InteractionRecord {
                user_id: format!("u{u:05}"),
                item_id: format!("i{item:05}"),
                label,
                timestamp: t as i64,
            });
        }
    }

    let rate = positives as f64 / records.len() as f64;
    if !(0.05..=0.6).contains(&rate) {
        return Err(Error::Data(format!(
            "synthetic positive rate {rate:.4} outside [0.05, 0.6]"
        )));
    }
    Ok(records)
}

/// Per-user boundary between training history and held-out evaluation tail.
#[derive(Debug, Clone)]
pub struct TemporalSplit {
    /// Per-sequence number of leading interactions available for training.
    pub train_len: Vec<usize>,
    /// Per-sequence number of trailing held-out interactions.
    pub test_len: Vec<usize>,
    /// Sequences too short to split (length < 2); they keep all interactions
    /// on the training side and contribute no evaluation impressions.
    pub skipped: usize,
}

/// Splits each user's sequence in time: the last `ceil(fraction * len)`
/// interactions are held out, capped so at least one training interaction
/// remains. Because sequences are chronological, no held-out interaction
/// precedes a training one.
pub fn split_temporal(dataset: &Dataset, fraction: f64) -> Result<TemporalSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut train_len = Vec::with_capacity(dataset.sequences.len());
    let mut test_len = Vec::with_capacity(dataset.sequences.len());
    let mut skipped = 0;
    for seq in &dataset.sequences {
        let len = seq.len();
        if len < 2 {
            skipped += 1;
            train_len.push(len);
            test_len.push(0);
            continue;
        }
        let held_out = (libm::ceil(fraction * len as f64) as usize).min(len - 1);
        train_len.push(len - held_out);
        test_len.push(held_out);
    }
    Ok(TemporalSplit { train_len, test_len, skipped })
}

/// The training side of a split: each sequence truncated to its leading
/// `train_len` interactions, with the id tables shared unchanged. Fitting
/// on this view keeps the held-out tail out of the training objective.
pub fn training_prefix(dataset: &Dataset, split: &TemporalSplit) -> Result<Dataset> {
    if split.train_len.len() != dataset.sequences.len() {
        return Err(Error::Config(format!(
            "split covers {} sequences, dataset has {}",
            split.train_len.len(),
            dataset.sequences.len()
        )));
    }
    let sequences = dataset
        .sequences
        .iter()
        .zip(split.train_len.iter())
        .map(|(seq, &n)| UserSequence {
            user: seq.user,
            items: seq.items[..n].to_vec(),
            labels: seq.labels[..n].to_vec(),
            timestamps: seq.timestamps[..n].to_vec(),
        })
        .collect();
    Ok(Dataset {
        sequences,
        user_ids: dataset.user_ids.clone(),
        item_ids: dataset.item_ids.clone(),
    })
}
