//! Datasets and class-incremental task streams.
//!
//! A [`Dataset`] carries a per-class train/test split. [`split_class_incremental`]
//! partitions its classes into `T` disjoint groups, one task per group, and
//! keeps global class ids so a single `K_total`-way head serves every task.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::DenseMatrix;
use crate::rng::{seeded, STREAM_DATA, STREAM_SPLIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Labelled samples with a fixed train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    pub dim: usize,
    /// Original label for each dense class id.
    pub label_map: Vec<i64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of training samples kept from a class with `n` samples.
fn train_share(n: usize) -> usize {
    (n * 4 / 5).max(1).min(n)
}

/// Gaussian blobs around `K` seeded points on the unit sphere.
///
/// Each class contributes `per_class` samples, the first 80% to train and
/// the rest to test.
pub fn make_synthetic_gaussian(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Input(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if dim < 2 {
        return Err(Error::Input(format!(
            "need at least 2 dimensions, got {dim}"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Input(format!("spread must be > 0, got {spread}")));
    }
    if per_class < 5 {
        return Err(Error::Input(format!(
            "per_class = {per_class} is too small for an 80/20 split (need ≥ 5)"
        )));
    }
    let mut rng = seeded(seed, STREAM_DATA);
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if v.iter().any(|x: &f64| *x != 0.0) {
                break v;
            }
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        means.push(v);
    }
    let n_train = train_share(per_class);
    let mut train = Vec::with_capacity(num_classes * n_train);
    let mut test = Vec::with_capacity(num_classes * (per_class - n_train));
    for (label, mean) in means.iter().enumerate() {
        for s in 0..per_class {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spread * z
                })
                .collect();
            let sample = Sample { features, label };
            if s < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok(Dataset {
        train,
        test,
        num_classes,
        dim,
        label_map: (0..num_classes as i64).collect(),
    })
}

/// One task of a class-incremental stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub index: usize,
    /// Sorted global class ids seen in this task.
    pub class_ids: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskSpec {
    pub fn train_matrix(&self) -> (DenseMatrix, Vec<usize>) {
        samples_to_matrix(&self.train)
    }

    pub fn test_matrix(&self) -> (DenseMatrix, Vec<usize>) {
        samples_to_matrix(&self.test)
    }
}

/// Stack samples into a feature matrix and a label vector.
pub fn samples_to_matrix(samples: &[Sample]) -> (DenseMatrix, Vec<usize>) {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut data = Vec::with_capacity(samples.len() * dim);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend_from_slice(&s.features);
        labels.push(s.label);
    }
    (DenseMatrix::from_raw(samples.len(), dim, data), labels)
}

/// Ordered tasks with pairwise-disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<TaskSpec>,
    pub num_classes: usize,
    pub dim: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Check the mutual-exclusivity and coverage invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            for &c in &t.class_ids {
                if !seen.insert(c) {
                    return Err(Error::Input(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
            if let Some(s) = t
                .train
                .iter()
                .chain(&t.test)
                .find(|s| !t.class_ids.contains(&s.label))
            {
                return Err(Error::Input(format!(
                    "task {} holds a sample of foreign class {}",
                    t.index, s.label
                )));
            }
        }
        if seen.len() != self.num_classes
            || seen.iter().next_back() != Some(&(self.num_classes - 1))
        {
            return Err(Error::Input("task classes do not cover [0, K)".into()));
        }
        Ok(())
    }
}

/// Partition classes into `tasks` equal contiguous groups after a seeded
/// class permutation (identity for seed 0).
pub fn split_class_incremental(dataset: &Dataset, tasks: usize, seed: u64) -> Result<TaskStream> {
    let k = dataset.num_classes;
    if tasks == 0 || !k.is_multiple_of(tasks) {
        return Err(Error::Input(format!(
            "{k} classes cannot be split evenly into {tasks} tasks"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    if seed != 0 {
        order.shuffle(&mut seeded(seed, STREAM_SPLIT));
    }
    let group = k / tasks;
    let mut task_of = vec![0usize; k];
    let mut specs: Vec<TaskSpec> = order
        .chunks(group)
        .enumerate()
        .map(|(index, chunk)| {
            let mut class_ids = chunk.to_vec();
            class_ids.sort_unstable();
            for &c in chunk {
                task_of[c] = index;
            }
            TaskSpec {
                index,
                class_ids,
                train: Vec::new(),
                test: Vec::new(),
            }
        })
        .collect();
    for s in &dataset.train {
        specs[task_of[s.label]].train.push(s.clone());
    }
    for s in &dataset.test {
        specs[task_of[s.label]].test.push(s.clone());
    }
    let stream = TaskStream {
        tasks: specs,
        num_classes: k,
        dim: dataset.dim,
    };
    stream.validate()?;
    Ok(stream)
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Read a `label,f0,f1,…` CSV file.
///
/// Labels are remapped to a dense `[0, K)` range in ascending order of the
/// original values; within each class the first 80% of rows (file order)
/// become training data.
pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_err(1, "empty file")),
        Some(r) => r.map_err(|e| parse_err(e.position().map_or(1, |p| p.line()), e.to_string()))?,
    };
    if header.get(0) != Some("label") {
        return Err(parse_err(1, "header must start with \"label\""));
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(parse_err(1, "header declares no feature columns"));
    }

    let mut raw: Vec<(i64, Vec<f64>)> = Vec::new();
    for rec in records {
        let rec =
            rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, rec.len()),
            ));
        }
        let label: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(line, format!("label {:?} is not an integer", &rec[0])))?;
        let mut features = Vec::with_capacity(dim);
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("feature {c} {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature {c} is not finite")));
            }
            features.push(v);
        }
        raw.push((label, features));
    }
    if raw.is_empty() {
        return Err(parse_err(1, "no samples"));
    }

    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for (l, _) in &raw {
        *counts.entry(*l).or_default() += 1;
    }
    let label_map: Vec<i64> = counts.keys().copied().collect();
    let dense: BTreeMap<i64, usize> = label_map.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut taken: BTreeMap<i64, usize> = BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (l, features) in raw {
        let seen = taken.entry(l).or_default();
        let sample = Sample {
            features,
            label: dense[&l],
        };
        if *seen < train_share(counts[&l]) {
            train.push(sample);
        } else {
            test.push(sample);
        }
        *seen += 1;
    }
    Ok(Dataset {
        train,
        test,
        num_classes: label_map.len(),
        dim,
        label_map,
    })
}

/// Write a dataset in the format read by [`load_dataset_csv`]: training rows
/// first, then test rows, with original labels.
pub fn write_dataset_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        write!(w, "label")?;
        for c in 0..dataset.dim {
            write!(w, ",f{c}")?;
        }
        writeln!(w)?;
        for s in dataset.train.iter().chain(&dataset.test) {
            write!(w, "{}", dataset.label_map[s.label])?;
            for v in &s.features {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}
