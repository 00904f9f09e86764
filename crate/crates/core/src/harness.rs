//! Declarative experiment grids.
//!
//! An [`ExperimentConfig`] is a TOML document:
//!
//! ```toml
//! [dataset]
//! kind = "synthetic"        # or "csv" with `path = "data.csv"`
//! classes = 10
//! per_class = 100
//! dim = 16
//! spread = 0.3
//! seed = 0
//!
//! [stream]
//! tasks = 5
//! class_order_seed = 0      # 0 keeps classes in label order
//!
//! [grid]
//! methods = ["er", "der", "derpp"]
//! regularizers = ["none", "im", "em", "ewc", "si"]
//! budgets = [5, 10, 20]     # samples per class
//! seeds = [0, 1, 2]
//!
//! [hyper]
//! lambda = 0.5
//! reg_target = "ct"         # ct | bf | all
//! lr = 0.1
//! method_lr = { der = 0.03, derpp = 0.03 }
//!
//! [output]
//! dir = "results"
//! ```
//!
//! Every field except `dataset` and `grid.methods` has a default. Unknown
//! keys are rejected. [`run_grid`] trains one model per
//! (method, regularizer, budget, seed) cell and [`emit_results`] writes the
//! tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffer::InsertAt;
use crate::error::{Error, Result};
use crate::methods::{run_sequence, EpochLog, Method, MethodKind, TrainConfig};
use crate::metrics::{compute_acc, compute_fr, AccuracyMatrix};
use crate::regularizers::{EwcState, RegTarget, Regularizer, RegularizerKind, SiState};
use crate::rng::derive_seed;
use crate::streams::{
    load_dataset_csv, make_synthetic_gaussian, split_class_incremental, Dataset, TaskStream,
};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn build(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => make_synthetic_gaussian(*classes, *per_class, *dim, *spread, *seed),
            DatasetSpec::Csv { path } => load_dataset_csv(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub tasks: usize,
    pub class_order_seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            class_order_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub methods: Vec<MethodKind>,
    #[serde(default = "default_regularizers")]
    pub regularizers: Vec<RegularizerKind>,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_regularizers() -> Vec<RegularizerKind> {
    vec![RegularizerKind::None]
}

fn default_budgets() -> Vec<usize> {
    vec![5]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperSpec {
    pub lambda: f64,
    pub reg_target: RegTarget,
    pub alpha: f64,
    pub beta: f64,
    pub ewc_strength: f64,
    pub si_strength: f64,
    pub si_damping: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-method learning rates overriding `lr`.
    pub method_lr: BTreeMap<MethodKind, f64>,
    pub hidden: Vec<usize>,
    pub insert_at: InsertAt,
}

impl Default for HyperSpec {
    fn default() -> Self {
        Self {
            lambda: Regularizer::DEFAULT_WEIGHT,
            reg_target: RegTarget::Ct,
            alpha: Method::DEFAULT_ALPHA,
            beta: Method::DEFAULT_BETA,
            ewc_strength: EwcState::DEFAULT_STRENGTH,
            si_strength: SiState::DEFAULT_STRENGTH,
            si_damping: SiState::DEFAULT_DAMPING,
            epochs_per_task: 5,
            batch_size: 32,
            lr: 0.1,
            method_lr: BTreeMap::new(),
            hidden: vec![64],
            insert_at: InsertAt::Batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// When false the `seconds` column is written as 0 so repeated runs
    /// produce byte-identical files.
    pub record_timing: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            record_timing: true,
        }
    }
}

/// Full description of one experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub stream: StreamSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub hyper: HyperSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn line_col(text: &str, offset: usize) -> (u64, u64) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() as u64 + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) as u64 + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parse and validate TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            Error::Parse {
                line,
                message: format!("column {col}: {}", e.message()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                dim,
                spread,
                ..
            } => {
                if *classes < 2 {
                    return Err(field_err("dataset.classes", "must be ≥ 2"));
                }
                if *per_class < 5 {
                    return Err(field_err("dataset.per_class", "must be ≥ 5"));
                }
                if *dim < 2 {
                    return Err(field_err("dataset.dim", "must be ≥ 2"));
                }
                if !(*spread > 0.0) {
                    return Err(field_err("dataset.spread", "must be > 0"));
                }
                if classes % self.stream.tasks.max(1) != 0 {
                    return Err(field_err(
                        "stream.tasks",
                        format!(
                            "{} classes are not divisible into {} tasks",
                            classes, self.stream.tasks
                        ),
                    ));
                }
            }
            DatasetSpec::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(field_err("dataset.path", "must not be empty"));
                }
            }
        }
        if self.stream.tasks == 0 {
            return Err(field_err("stream.tasks", "must be ≥ 1"));
        }
        let g = &self.grid;
        if g.methods.is_empty() {
            return Err(field_err("grid.methods", "must not be empty"));
        }
        if g.regularizers.is_empty() {
            return Err(field_err("grid.regularizers", "must not be empty"));
        }
        if g.seeds.is_empty() {
            return Err(field_err("grid.seeds", "must not be empty"));
        }
        if g.budgets.is_empty() || g.budgets.contains(&0) {
            return Err(field_err("grid.budgets", "must be nonempty and ≥ 1"));
        }
        let h = &self.hyper;
        if !(0.0..=1.0).contains(&h.lambda) {
            return Err(field_err("hyper.lambda", "must lie in [0, 1]"));
        }
        if !(h.alpha >= 0.0) {
            return Err(field_err("hyper.alpha", "must be ≥ 0"));
        }
        if !(h.beta >= 0.0) {
            return Err(field_err("hyper.beta", "must be ≥ 0"));
        }
        if !(h.ewc_strength >= 0.0) {
            return Err(field_err("hyper.ewc_strength", "must be ≥ 0"));
        }
        if !(h.si_strength >= 0.0) {
            return Err(field_err("hyper.si_strength", "must be ≥ 0"));
        }
        if !(h.si_damping > 0.0) {
            return Err(field_err("hyper.si_damping", "must be > 0"));
        }
        if h.batch_size == 0 {
            return Err(field_err("hyper.batch_size", "must be ≥ 1"));
        }
        if !(h.lr > 0.0) || !h.lr.is_finite() {
            return Err(field_err("hyper.lr", "must be > 0"));
        }
        for (m, lr) in &h.method_lr {
            if !(*lr > 0.0) || !lr.is_finite() {
                return Err(field_err(&format!("hyper.method_lr.{m}"), "must be > 0"));
            }
        }
        if h.hidden.contains(&0) {
            return Err(field_err("hyper.hidden", "layer widths must be ≥ 1"));
        }
        Ok(())
    }

    /// Stable identifier of everything that affects results (the output
    /// section is excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output = OutputSpec::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Restrict the grid to cells matching `filter`.
    pub fn apply_filter(&mut self, filter: &CellFilter) -> Result<()> {
        if let Some(m) = filter.method {
            self.grid.methods.retain(|x| *x == m);
            if self.grid.methods.is_empty() {
                return Err(field_err(
                    "filter",
                    format!("method {m} is not in the grid"),
                ));
            }
        }
        if let Some(r) = filter.regularizer {
            self.grid.regularizers.retain(|x| *x == r);
            if self.grid.regularizers.is_empty() {
                return Err(field_err(
                    "filter",
                    format!("regularizer {r} is not in the grid"),
                ));
            }
        }
        if let Some(b) = filter.budget {
            self.grid.budgets.retain(|x| *x == b);
            if self.grid.budgets.is_empty() {
                return Err(field_err(
                    "filter",
                    format!("budget {b} is not in the grid"),
                ));
            }
        }
        Ok(())
    }

    /// Training configuration for one grid cell.
    pub fn train_config(&self, cell: &Cell) -> Result<TrainConfig> {
        let h = &self.hyper;
        let method = match cell.method {
            MethodKind::Er => Method::er(),
            MethodKind::Der => Method::der(h.alpha),
            MethodKind::Derpp => Method::derpp(h.alpha, h.beta),
        };
        let regularizer = match cell.regularizer {
            RegularizerKind::None => Regularizer::none(),
            kind => Regularizer::new(kind, h.lambda)?,
        };
        Ok(TrainConfig {
            epochs_per_task: h.epochs_per_task,
            batch_size: h.batch_size,
            lr: h.method_lr.get(&cell.method).copied().unwrap_or(h.lr),
            seed: cell.run_seed(),
            method,
            regularizer,
            reg_target: h.reg_target,
            per_class_budget: cell.budget,
            hidden_dims: h.hidden.clone(),
            insert_at: h.insert_at,
            ewc_strength: h.ewc_strength,
            si_strength: h.si_strength,
            si_damping: h.si_damping,
        })
    }

    /// All cells in canonical order: method, regularizer, budget, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &method in &g.methods {
            for &regularizer in &g.regularizers {
                for &budget in &g.budgets {
                    for &seed in &g.seeds {
                        out.push(Cell {
                            method,
                            regularizer,
                            budget,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn build_stream(&self) -> Result<TaskStream> {
        let data = self.dataset.build()?;
        split_class_incremental(&data, self.stream.tasks, self.stream.class_order_seed)
    }
}

/// Read, parse and validate a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
}

/// Optional restriction of the grid, parsed from `method=er,reg=im,budget=5`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellFilter {
    pub method: Option<MethodKind>,
    pub regularizer: Option<RegularizerKind>,
    pub budget: Option<usize>,
}

impl std::str::FromStr for CellFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut f = CellFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("filter term {part:?} is not key=value")))?;
            match k.trim() {
                "method" => f.method = Some(v.trim().parse()?),
                "reg" | "regularizer" => f.regularizer = Some(v.trim().parse()?),
                "budget" => {
                    f.budget = Some(
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("budget {v:?} is not a count")))?,
                    )
                }
                other => return Err(Error::Config(format!("unknown filter key {other:?}"))),
            }
        }
        Ok(f)
    }
}

/// One (method, regularizer, budget, seed) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub method: MethodKind,
    pub regularizer: RegularizerKind,
    pub budget: usize,
    pub seed: u64,
}

impl Cell {
    /// Seed for every random stream of this cell.
    ///
    /// Derived from the master seed and the budget only, so cells that differ
    /// in method or regularizer share initialization, data order and replay
    /// draws and can be compared pairwise.
    pub fn run_seed(&self) -> u64 {
        derive_seed(self.seed, &format!("budget={}", self.budget))
    }
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRecord {
    pub fingerprint: String,
    pub seed: u64,
    pub method: MethodKind,
    pub regularizer: RegularizerKind,
    pub budget: usize,
    pub acc: Option<f64>,
    /// Undefined for single-task streams.
    pub fr: Option<f64>,
    pub final_accuracies: Vec<f64>,
    pub seconds: f64,
    pub matrix: Option<AccuracyMatrix>,
    #[serde(skip)]
    pub logs: Vec<EpochLog>,
    /// Set when the cell aborted.
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    cell: &Cell,
    fingerprint: &str,
) -> ResultRecord {
    let start = Instant::now();
    let mut rec = ResultRecord {
        fingerprint: fingerprint.to_string(),
        seed: cell.seed,
        method: cell.method,
        regularizer: cell.regularizer,
        budget: cell.budget,
        acc: None,
        fr: None,
        final_accuracies: Vec::new(),
        seconds: 0.0,
        matrix: None,
        logs: Vec::new(),
        error: None,
    };
    let result = cfg.train_config(cell).and_then(|tc| {
        let out = run_sequence(stream, &tc)?;
        let acc = compute_acc(&out.accuracy)?;
        let fr = match compute_fr(&out.accuracy) {
            Ok(v) => Some(v),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((out, acc, fr))
    });
    match result {
        Ok((out, acc, fr)) => {
            rec.acc = Some(acc);
            rec.fr = fr;
            rec.final_accuracies = out.accuracy.final_column().unwrap_or_default();
            rec.matrix = Some(out.accuracy);
            rec.logs = out.logs;
        }
        Err(e) => {
            log::warn!(
                "cell {}/{}/budget={}/seed={} failed: {e}",
                cell.method,
                cell.regularizer,
                cell.budget,
                cell.seed
            );
            rec.error = Some(e.to_string());
        }
    }
    if cfg.output.record_timing {
        rec.seconds = start.elapsed().as_secs_f64();
    }
    rec
}

/// Run every cell. Cells execute in parallel; the returned records are in
/// canonical cell order. A failing cell is recorded, not propagated.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let stream = cfg.build_stream()?;
    let fingerprint = cfg.fingerprint();
    let cells = cfg.cells();
    log::info!(
        "running {} cells over {} tasks ({} classes)",
        cells.len(),
        stream.len(),
        stream.num_classes
    );
    Ok(cells
        .par_iter()
        .map(|cell| run_cell(cfg, &stream, cell, &fingerprint))
        .collect())
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// Aggregate of one (method, regularizer, budget) series point over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub method: MethodKind,
    pub regularizer: RegularizerKind,
    pub budget: usize,
    pub n: usize,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub fr_mean: Option<f64>,
    pub fr_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub method: MethodKind,
    pub regularizer: RegularizerKind,
    pub budget: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fingerprint: String,
    pub cells: Vec<SummaryCell>,
    pub failures: Vec<FailedCell>,
}

/// Group successful records by series point, in first-seen order.
pub fn summarize(records: &[ResultRecord]) -> Summary {
    type Key = (MethodKind, RegularizerKind, usize);
    let mut groups: Vec<(Key, Vec<&ResultRecord>)> = Vec::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        let key = (r.method, r.regularizer, r.budget);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let cells = groups
        .into_iter()
        .map(|((method, regularizer, budget), rs)| {
            let accs: Vec<f64> = rs.iter().filter_map(|r| r.acc).collect();
            let frs: Vec<f64> = rs.iter().filter_map(|r| r.fr).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let (fr_mean, fr_std) = mean_std(&frs);
            SummaryCell {
                method,
                regularizer,
                budget,
                n: rs.len(),
                acc_mean,
                acc_std,
                fr_mean,
                fr_std,
            }
        })
        .collect();
    let failures = records
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| FailedCell {
                method: r.method,
                regularizer: r.regularizer,
                budget: r.budget,
                seed: r.seed,
                error: e.clone(),
            })
        })
        .collect();
    Summary {
        fingerprint: records
            .first()
            .map(|r| r.fingerprint.clone())
            .unwrap_or_default(),
        cells,
        failures,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header of `results.csv`.
pub const RESULTS_HEADER: &str = "method,regularizer,budget,seed,acc,fr,seconds";

/// Paths written by [`emit_results`].
#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
    pub plotdata_csv: PathBuf,
    pub losses_csv: PathBuf,
    pub matrices_json: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `results.csv`, `summary.json`, `plotdata.csv`, `losses.csv` and
/// `matrices.json` under `dir`. Numbers use shortest round-trip formatting.
pub fn emit_results(records: &[ResultRecord], dir: impl AsRef<Path>) -> Result<EmittedFiles> {
    if records.is_empty() {
        return Err(Error::Input("no records to emit".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut results = String::from(RESULTS_HEADER);
    results.push('\n');
    for r in records.iter().filter(|r| r.is_ok()) {
        results.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.regularizer,
            r.budget,
            r.seed,
            opt(r.acc),
            opt(r.fr),
            r.seconds
        ));
    }

    let summary = summarize(records);
    let mut plot = String::from("method,regularizer,budget,acc_mean,acc_std,fr_mean,fr_std,n\n");
    let mut cells: Vec<&SummaryCell> = summary.cells.iter().collect();
    cells.sort_by_key(|c| (c.method.name(), c.regularizer.name(), c.budget));
    for c in cells {
        plot.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.method,
            c.regularizer,
            c.budget,
            opt(c.acc_mean),
            opt(c.acc_std),
            opt(c.fr_mean),
            opt(c.fr_std),
            c.n
        ));
    }

    let mut losses = String::from(
        "method,regularizer,budget,seed,task,epoch,total,ce_current,ce_replay,distill,reg\n",
    );
    for r in records.iter().filter(|r| r.is_ok()) {
        for l in &r.logs {
            losses.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.regularizer,
                r.budget,
                r.seed,
                l.task,
                l.epoch,
                l.total,
                l.ce_current,
                l.ce_replay,
                l.distill,
                l.reg
            ));
        }
    }

    #[derive(Serialize)]
    struct MatrixRow<'a> {
        method: MethodKind,
        regularizer: RegularizerKind,
        budget: usize,
        seed: u64,
        matrix: &'a AccuracyMatrix,
    }
    let matrices: Vec<MatrixRow<'_>> = records
        .iter()
        .filter_map(|r| {
            r.matrix.as_ref().map(|matrix| MatrixRow {
                method: r.method,
                regularizer: r.regularizer,
                budget: r.budget,
                seed: r.seed,
                matrix,
            })
        })
        .collect();

    let files = EmittedFiles {
        results_csv: dir.join("results.csv"),
        summary_json: dir.join("summary.json"),
        plotdata_csv: dir.join("plotdata.csv"),
        losses_csv: dir.join("losses.csv"),
        matrices_json: dir.join("matrices.json"),
    };
    write_file(&files.results_csv, &results)?;
    write_file(
        &files.summary_json,
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    write_file(&files.plotdata_csv, &plot)?;
    write_file(&files.losses_csv, &losses)?;
    write_file(
        &files.matrices_json,
        &(serde_json::to_string_pretty(&matrices)? + "\n"),
    )?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "synthetic"
classes = 4
per_class = 10
dim = 3
spread = 0.2

[stream]
tasks = 2

[grid]
methods = ["er"]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.hyper.lambda, 0.5);
        assert_eq!(c.hyper.reg_target, RegTarget::Ct);
        assert_eq!(c.hyper.alpha, 0.3);
        assert_eq!(c.hyper.beta, 0.5);
        assert_eq!(c.hyper.si_damping, 0.1);
        assert_eq!(c.grid.seeds, vec![0]);
        assert_eq!(c.grid.regularizers, vec![RegularizerKind::None]);
        assert!(c.to_toml().contains("lambda = 0.5"));
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("[grid]", "[grid]\nregulariser = [\"im\"]");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("regulariser"), "{err}");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = ExperimentConfig::from_toml("[dataset\nkind=1").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn constraint_violation_names_field() {
        let text = MINIMAL.replace("[grid]", "[hyper]\nlambda = 2.0\n[grid]");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("hyper.lambda"), "{err}");
        let text = MINIMAL.replace("methods = [\"er\"]", "methods = []");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("grid.methods"), "{err}");
    }

    #[test]
    fn fingerprint_survives_round_trip_and_ignores_output() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c.fingerprint(), back.fingerprint());
        let mut moved = c.clone();
        moved.output.dir = PathBuf::from("elsewhere");
        assert_eq!(c.fingerprint(), moved.fingerprint());
        let mut changed = c.clone();
        changed.hyper.lr = 0.05;
        assert_ne!(c.fingerprint(), changed.fingerprint());
    }

    #[test]
    fn filter_parsing_and_application() {
        let f: CellFilter = "method=er, reg=im".parse().unwrap();
        assert_eq!(f.method, Some(MethodKind::Er));
        assert_eq!(f.regularizer, Some(RegularizerKind::Im));
        assert!("colour=red".parse::<CellFilter>().is_err());
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.grid.regularizers = vec![RegularizerKind::None, RegularizerKind::Im];
        c.apply_filter(&f).unwrap();
        assert_eq!(c.cells().len(), 1);
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert!(c.apply_filter(&"method=der".parse().unwrap()).is_err());
    }

    #[test]
    fn run_seed_is_shared_across_methods() {
        let a = Cell {
            method: MethodKind::Er,
            regularizer: RegularizerKind::None,
            budget: 5,
            seed: 1,
        };
        let b = Cell {
            method: MethodKind::Der,
            regularizer: RegularizerKind::Im,
            ..a
        };
        assert_eq!(a.run_seed(), b.run_seed());
        assert_ne!(a.run_seed(), Cell { budget: 10, ..a }.run_seed());
        assert_ne!(a.run_seed(), Cell { seed: 2, ..a }.run_seed());
    }

    #[test]
    fn mean_std_hand_values() {
        let (m, s) = mean_std(&[0.4, 0.6]);
        assert!((m.unwrap() - 0.5).abs() < 1e-15);
        // sample (n − 1) deviation of {0.4, 0.6} is √0.02, not 0.1
        assert!((s.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3]), (Some(0.3), None));
    }
}
