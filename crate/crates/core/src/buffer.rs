//! Class-balanced reservoir replay memory.
//!
//! Every class owns `per_class_budget` slots. While a class has free slots,
//! incoming samples are appended; afterwards the `n`-th sample of that class
//! replaces a uniformly chosen slot of the same class with probability
//! `budget / n`, which keeps each class's slots a uniform sample of its
//! stream.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::DenseMatrix;
use crate::rng::{seeded, Rng, STREAM_BUFFER};

/// A stored past sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub features: Vec<f64>,
    pub label: usize,
    /// Network logits captured when the sample was offered (DER family only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stored_logits: Option<Vec<f64>>,
    pub insert_task: usize,
}

/// When training samples are offered to the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InsertAt {
    /// After every optimizer step, with that step's batch.
    #[default]
    Batch,
    /// Once per task, with the whole task's training data.
    TaskEnd,
}

/// Returned by [`ReplayBuffer::sample_batch`] when there is nothing to replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayUnavailable;

impl fmt::Display for ReplayUnavailable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("replay buffer is empty")
    }
}

impl std::error::Error for ReplayUnavailable {}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: Vec<BufferEntry>,
    /// Indices into `entries`, per class.
    class_slots: Vec<Vec<usize>>,
    per_class_budget: usize,
    num_classes: usize,
    seen: Vec<u64>,
    rng: Rng,
}

#[derive(Serialize, Deserialize)]
struct BufferDump {
    per_class_budget: usize,
    num_classes: usize,
    seen_counts: Vec<u64>,
    entries: Vec<BufferEntry>,
}

impl ReplayBuffer {
    pub fn new(per_class_budget: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            class_slots: vec![Vec::new(); num_classes],
            per_class_budget,
            num_classes,
            seen: vec![0; num_classes],
            rng: seeded(seed, STREAM_BUFFER),
        }
    }

    pub fn per_class_budget(&self) -> usize {
        self.per_class_budget
    }

    /// Total budget `N = per_class_budget × K`.
    pub fn capacity(&self) -> usize {
        self.per_class_budget * self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Number of samples of `class` offered so far.
    pub fn seen_count(&self, class: usize) -> u64 {
        self.seen.get(class).copied().unwrap_or(0)
    }

    /// Offer one sample. Only an out-of-range label is rejected.
    pub fn insert(&mut self, entry: BufferEntry) -> Result<()> {
        let c = entry.label;
        if c >= self.num_classes {
            return Err(Error::Input(format!(
                "label {c} out of range for {} classes",
                self.num_classes
            )));
        }
        self.seen[c] += 1;
        let slots = &mut self.class_slots[c];
        if slots.len() < self.per_class_budget {
            slots.push(self.entries.len());
            self.entries.push(entry);
            return Ok(());
        }
        let j = self.rng.random_range(0..self.seen[c]);
        if (j as usize) < self.per_class_budget {
            let idx = slots[j as usize];
            self.entries[idx] = entry;
        }
        Ok(())
    }

    /// Draw `b` entries uniformly with replacement.
    pub fn sample_batch(
        &self,
        b: usize,
        rng: &mut Rng,
    ) -> std::result::Result<Vec<&BufferEntry>, ReplayUnavailable> {
        if self.entries.is_empty() {
            return Err(ReplayUnavailable);
        }
        let n = self.entries.len();
        Ok((0..b)
            .map(|_| &self.entries[rng.random_range(0..n)])
            .collect())
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        self.class_slots
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(c, s)| (c, s.len()))
            .collect()
    }

    /// Serialize contents and stream counters (not the RNG position).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&BufferDump {
            per_class_budget: self.per_class_budget,
            num_classes: self.num_classes,
            seen_counts: self.seen.clone(),
            entries: self.entries.clone(),
        })?)
    }

    /// Rebuild from [`to_json`](Self::to_json) output with a fresh RNG.
    pub fn from_json(s: &str, seed: u64) -> Result<Self> {
        let dump: BufferDump = serde_json::from_str(s)?;
        if dump.seen_counts.len() != dump.num_classes {
            return Err(Error::Input(
                "seen_counts length differs from num_classes".into(),
            ));
        }
        let mut buf = Self::new(dump.per_class_budget, dump.num_classes, seed);
        buf.seen = dump.seen_counts;
        for e in dump.entries {
            if e.label >= buf.num_classes {
                return Err(Error::Input(format!(
                    "entry label {} out of range",
                    e.label
                )));
            }
            let slots = &mut buf.class_slots[e.label];
            if slots.len() >= buf.per_class_budget {
                return Err(Error::Input(format!(
                    "class {} exceeds its budget",
                    e.label
                )));
            }
            slots.push(buf.entries.len());
            buf.entries.push(e);
        }
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s, seed)
    }
}

/// Stack replay entries into features, labels and (if every entry has them)
/// stored logits.
pub fn entries_to_matrices(
    entries: &[&BufferEntry],
) -> (DenseMatrix, Vec<usize>, Option<DenseMatrix>) {
    let dim = entries.first().map_or(0, |e| e.features.len());
    let mut x = Vec::with_capacity(entries.len() * dim);
    let mut labels = Vec::with_capacity(entries.len());
    let mut logits: Option<Vec<f64>> = Some(Vec::new());
    let mut k = 0;
    for e in entries {
        x.extend_from_slice(&e.features);
        labels.push(e.label);
        match (&mut logits, &e.stored_logits) {
            (Some(acc), Some(l)) => {
                k = l.len();
                acc.extend_from_slice(l);
            }
            _ => logits = None,
        }
    }
    let logits = logits.map(|l| DenseMatrix::from_raw(entries.len(), k, l));
    (DenseMatrix::from_raw(entries.len(), dim, x), labels, logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(label: usize, tag: f64) -> BufferEntry {
        BufferEntry {
            features: vec![tag],
            label,
            stored_logits: None,
            insert_task: 0,
        }
    }

    #[test]
    fn under_budget_appends() {
        let mut b = ReplayBuffer::new(5, 2, 0);
        for i in 0..3 {
            b.insert(entry(0, i as f64)).unwrap();
        }
        assert_eq!(b.per_class_counts(), BTreeMap::from([(0, 3)]));
    }

    #[test]
    fn cap_is_enforced() {
        let mut b = ReplayBuffer::new(5, 2, 0);
        for i in 0..100 {
            b.insert(entry(0, i as f64)).unwrap();
        }
        assert_eq!(b.per_class_counts(), BTreeMap::from([(0, 5)]));
        assert_eq!(b.seen_count(0), 100);
        assert_eq!(b.capacity(), 10);
    }

    #[test]
    fn empty_buffer_has_no_replay() {
        let b = ReplayBuffer::new(5, 2, 0);
        assert!(b.per_class_counts().is_empty());
        assert_eq!(b.sample_batch(4, &mut seeded(0, 1)), Err(ReplayUnavailable));
    }

    #[test]
    fn single_entry_repeats() {
        let mut b = ReplayBuffer::new(5, 2, 0);
        b.insert(entry(1, 7.0)).unwrap();
        let s = b.sample_batch(4, &mut seeded(0, 1)).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|e| e.features == vec![7.0]));
    }

    #[test]
    fn bad_label_is_rejected() {
        let mut b = ReplayBuffer::new(5, 2, 0);
        assert!(b.insert(entry(2, 0.0)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut b = ReplayBuffer::new(3, 3, 4);
        for i in 0..20 {
            let mut e = entry(i % 3, i as f64);
            e.stored_logits = Some(vec![i as f64; 3]);
            e.insert_task = i / 7;
            b.insert(e).unwrap();
        }
        let back = ReplayBuffer::from_json(&b.to_json().unwrap(), 4).unwrap();
        assert_eq!(back.entries(), b.entries());
        assert_eq!(back.per_class_counts(), b.per_class_counts());
        assert_eq!(back.seen_count(1), b.seen_count(1));
    }

    #[test]
    fn stacking_keeps_logits_only_when_all_present() {
        let mut a = entry(0, 1.0);
        a.stored_logits = Some(vec![1.0, 2.0]);
        let b = entry(1, 2.0);
        let (x, y, l) = entries_to_matrices(&[&a, &a]);
        assert_eq!((x.rows(), y, l.unwrap().cols()), (2, vec![0, 0], 2));
        let (_, _, l) = entries_to_matrices(&[&a, &b]);
        assert!(l.is_none());
    }
}
