//! Average accuracy and forgetting rate over a task sequence.
//!
//! `a_ij` is the accuracy on task `i` measured right after training task `j`,
//! defined only for `i ≤ j`. Indices here are 0-based; the JSON form stores
//! one row per task `i` holding `a_ii, a_i(i+1), …` in order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular grid of per-task accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    #[serde(rename = "T")]
    tasks: usize,
    #[serde(rename = "a")]
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: vec![Vec::new(); tasks],
        }
    }

    /// Build from fully specified rows (`rows[i]` holds `j = i..T`).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let tasks = rows.len();
        let m = Self { tasks, rows };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.rows.len() != self.tasks {
            return Err(Error::Input(format!(
                "matrix declares {} tasks but has {} rows",
                self.tasks,
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() > self.tasks - i {
                return Err(Error::Input(format!("row {i} is too long")));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Input(format!("row {i} has accuracy outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Record `a_ij`. Columns must be filled in order for each row.
    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if i > j || j >= self.tasks {
            return Err(Error::Input(format!("a[{i}][{j}] is outside the triangle")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Input(format!("accuracy {acc} outside [0, 1]")));
        }
        let row = &mut self.rows[i];
        let offset = j - i;
        match offset.cmp(&row.len()) {
            std::cmp::Ordering::Less => row[offset] = acc,
            std::cmp::Ordering::Equal => row.push(acc),
            std::cmp::Ordering::Greater => {
                return Err(Error::Input(format!(
                    "a[{i}][{j}] set before earlier columns of row {i}"
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i > j {
            return None;
        }
        self.rows.get(i)?.get(j - i).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Every `a_iT` present.
    pub fn is_complete(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.len() == self.tasks - i)
    }

    /// Accuracies after the final task, `a_iT` for each `i`.
    pub fn final_column(&self) -> Result<Vec<f64>> {
        if self.tasks == 0 {
            return Err(Error::Input("empty accuracy matrix".into()));
        }
        let last = self.tasks - 1;
        (0..self.tasks)
            .map(|i| {
                self.get(i, last)
                    .ok_or_else(|| Error::Input(format!("a[{i}][{last}] is missing")))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Mean accuracy over tasks after the last task was learned.
pub fn compute_acc(m: &AccuracyMatrix) -> Result<f64> {
    let col = m.final_column()?;
    Ok(col.iter().sum::<f64>() / col.len() as f64)
}

/// Mean over earlier tasks of peak accuracy before the last task minus the
/// final accuracy. The peak ranges over `j ∈ [i, T−1)`.
pub fn compute_fr(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::Undefined(
            "forgetting rate needs at least two tasks".into(),
        ));
    }
    let last = m.final_column()?;
    let mut total = 0.0;
    for (i, row) in m.rows()[..t - 1].iter().enumerate() {
        // row[k] is a_{i,i+k}; the final column sits at k = t-1-i.
        let peak = row[..t - 1 - i]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        total += peak - last[i];
    }
    Ok(total / (t - 1) as f64)
}
