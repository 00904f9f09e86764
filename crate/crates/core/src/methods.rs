//! Rehearsal training loops: ER, DER and DER++ with an optional regularizer.
//!
//! Each optimizer step stacks the current batch and the replay batches into
//! one matrix, runs a single forward pass, builds the upstream gradient row
//! block by row block and runs a single backward pass. The objective is
//!
//! ```text
//! total = (1 − λ)·(CE(current) + replay terms) + λ·R
//! ```
//!
//! where the supervised factor is exactly 1 when no regularizer is attached.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::buffer::{entries_to_matrices, BufferEntry, InsertAt, ReplayBuffer};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::netcore::{
    argmax_rows, backward, cross_entropy, cross_entropy_grad, forward, sgd_step, softmax,
    DenseMatrix, GradientSet, MlpParams,
};
use crate::regularizers::{
    em_grad_wrt_logits, em_loss, im_grad_wrt_logits, im_loss, EwcState, RegTarget, Regularizer,
    RegularizerKind, SiState,
};
use crate::rng::{seeded, Rng, STREAM_INIT, STREAM_TRAIN};
use crate::streams::{samples_to_matrix, TaskSpec, TaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Er,
    Der,
    Derpp,
}

impl MethodKind {
    pub const ALL: [MethodKind; 3] = [MethodKind::Er, MethodKind::Der, MethodKind::Derpp];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Er => "er",
            MethodKind::Der => "der",
            MethodKind::Derpp => "derpp",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "der++" && *k == MethodKind::Derpp))
            .ok_or_else(|| Error::Input(format!("unknown method {s:?}")))
    }
}

/// A rehearsal method with its distillation (`alpha`) and memory-balancing
/// (`beta`) coefficients. `beta` only matters for DER++.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub kind: MethodKind,
    pub alpha: f64,
    pub beta: f64,
}

impl Method {
    pub const DEFAULT_ALPHA: f64 = 0.3;
    pub const DEFAULT_BETA: f64 = 0.5;

    pub fn er() -> Self {
        Self {
            kind: MethodKind::Er,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn der(alpha: f64) -> Self {
        Self {
            kind: MethodKind::Der,
            alpha,
            beta: 0.0,
        }
    }

    pub fn derpp(alpha: f64, beta: f64) -> Self {
        Self {
            kind: MethodKind::Derpp,
            alpha,
            beta,
        }
    }

    /// Whether buffer entries must carry logits.
    pub fn needs_logits(&self) -> bool {
        matches!(self.kind, MethodKind::Der | MethodKind::Derpp)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be ≥ 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub method: Method,
    pub regularizer: Regularizer,
    pub reg_target: RegTarget,
    pub per_class_budget: usize,
    pub hidden_dims: Vec<usize>,
    pub insert_at: InsertAt,
    pub ewc_strength: f64,
    pub si_strength: f64,
    pub si_damping: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 5,
            batch_size: 32,
            lr: 0.1,
            seed: 0,
            method: Method::er(),
            regularizer: Regularizer::none(),
            reg_target: RegTarget::Ct,
            per_class_budget: 5,
            hidden_dims: vec![64],
            insert_at: InsertAt::Batch,
            ewc_strength: EwcState::DEFAULT_STRENGTH,
            si_strength: SiState::DEFAULT_STRENGTH,
            si_damping: SiState::DEFAULT_DAMPING,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.per_class_budget == 0 {
            return Err(Error::Config("per_class_budget must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be ≥ 1".into()));
        }
        self.method.validate()?;
        Regularizer::new(self.regularizer.kind, self.regularizer.weight)?;
        if !(self.si_damping > 0.0) {
            return Err(Error::Config("si_damping must be > 0".into()));
        }
        if !(self.ewc_strength >= 0.0) || !(self.si_strength >= 0.0) {
            return Err(Error::Config(
                "ewc_strength and si_strength must be ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// Replay samples for one step, already stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySet {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub logits: Option<DenseMatrix>,
}

impl ReplaySet {
    pub fn from_entries(entries: &[&BufferEntry]) -> Self {
        let (features, labels, logits) = entries_to_matrices(entries);
        Self {
            features,
            labels,
            logits,
        }
    }

    fn rows(&self) -> usize {
        self.features.rows()
    }
}

/// The replay batches used by one step. ER and DER use `first`; DER++ uses
/// `first` for logit distillation and `second` for replayed labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayDraw {
    pub first: Option<ReplaySet>,
    pub second: Option<ReplaySet>,
}

/// Weighted contributions to the objective; they sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_current: f64,
    pub ce_replay: f64,
    pub distill: f64,
    pub reg: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.ce_current + self.ce_replay + self.distill + self.reg;
        self
    }
}

/// The regularizer pieces that live outside the prediction batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamPenalties<'a> {
    pub ewc: Option<&'a EwcState>,
    pub si: Option<&'a SiState>,
}

/// Loss value, gradient, and the current-batch logits of one evaluation of
/// the objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub grads: GradientSet,
    pub current_logits: DenseMatrix,
}

/// Mean over all entries of `(z − target)²` and its gradient in `z`.
fn logit_mse(z: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if z.rows() != target.rows() || z.cols() != target.cols() {
        return Err(Error::Config(format!(
            "stored logits are {}×{}, network emits {}×{}",
            target.rows(),
            target.cols(),
            z.rows(),
            z.cols()
        )));
    }
    let n = (z.rows() * z.cols()).max(1) as f64;
    let mut grad = DenseMatrix::zeros(z.rows(), z.cols());
    let mut sum = 0.0;
    for ((g, a), b) in grad.data_mut().iter_mut().zip(z.data()).zip(target.data()) {
        let d = a - b;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Evaluate the full objective and its gradient at `params`.
///
/// Replay batches that are `None` contribute nothing. A prediction-space
/// regularizer with [`RegTarget::Bf`] and no replay batch contributes zero.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    params: &MlpParams,
    current: &DenseMatrix,
    labels: &[usize],
    replay: &ReplayDraw,
    method: &Method,
    regularizer: &Regularizer,
    target: RegTarget,
    penalties: ParamPenalties<'_>,
) -> Result<Objective> {
    if current.rows() == 0 {
        return Err(Error::Input("current batch is empty".into()));
    }
    let first = replay.first.as_ref();
    let second = match method.kind {
        MethodKind::Derpp => replay.second.as_ref(),
        _ => None,
    };
    if method.needs_logits() {
        if let Some(r) = first {
            if r.logits.is_none() {
                return Err(Error::Config(format!(
                    "{} replay requires stored logits",
                    method.kind
                )));
            }
        }
    }

    let n_cur = current.rows();
    let n_first = first.map_or(0, ReplaySet::rows);
    let mut parts = vec![current];
    parts.extend(first.map(|r| &r.features));
    parts.extend(second.map(|r| &r.features));
    let stacked = DenseMatrix::vstack(&parts)?;
    let cache = forward(params, &stacked)?;
    let probs = softmax(&cache.logits)?;
    let mut upstream = DenseMatrix::zeros(cache.logits.rows(), cache.logits.cols());

    let scale = regularizer.supervised_scale();
    let mut br = LossBreakdown::default();

    let cur_probs = probs.slice_rows(0, n_cur);
    br.ce_current = scale * cross_entropy(&cur_probs, labels)?;
    upstream.add_block(0, &cross_entropy_grad(&cur_probs, labels)?.scaled(scale));

    if let Some(r) = first {
        let rows = (n_cur, n_cur + n_first);
        match method.kind {
            MethodKind::Er => {
                let p = probs.slice_rows(rows.0, rows.1);
                br.ce_replay = scale * cross_entropy(&p, &r.labels)?;
                upstream.add_block(rows.0, &cross_entropy_grad(&p, &r.labels)?.scaled(scale));
            }
            MethodKind::Der | MethodKind::Derpp => {
                let z = cache.logits.slice_rows(rows.0, rows.1);
                let stored = r.logits.as_ref().expect("checked above");
                let (mse, g) = logit_mse(&z, stored)?;
                let w = scale * method.alpha;
                br.distill = w * mse;
                upstream.add_block(rows.0, &g.scaled(w));
            }
        }
    }
    if let Some(r) = second {
        let start = n_cur + n_first;
        let p = probs.slice_rows(start, start + r.rows());
        let w = scale * method.beta;
        br.ce_replay = w * cross_entropy(&p, &r.labels)?;
        upstream.add_block(start, &cross_entropy_grad(&p, &r.labels)?.scaled(w));
    }

    let lambda = regularizer.weight;
    let mut param_grad: Option<GradientSet> = None;
    match regularizer.kind {
        RegularizerKind::None => {}
        RegularizerKind::Im | RegularizerKind::Em => {
            let span = match target {
                RegTarget::Ct => Some((0, n_cur)),
                RegTarget::Bf => (n_first > 0).then_some((n_cur, n_cur + n_first)),
                RegTarget::All => Some((0, n_cur + n_first)),
            };
            if let Some((s, e)) = span {
                let p = probs.slice_rows(s, e);
                let (value, g) = if regularizer.kind == RegularizerKind::Im {
                    (im_loss(&p), im_grad_wrt_logits(&p))
                } else {
                    (em_loss(&p), em_grad_wrt_logits(&p))
                };
                br.reg = lambda * value;
                if lambda != 0.0 {
                    upstream.add_block(s, &g.scaled(lambda));
                }
            }
        }
        RegularizerKind::Ewc => {
            let state = penalties
                .ewc
                .ok_or_else(|| Error::Config("EWC regularizer without EWC state".into()))?;
            br.reg = lambda * state.penalty(params)?;
            if lambda != 0.0 {
                param_grad = Some(state.penalty_grad(params)?);
            }
        }
        RegularizerKind::Si => {
            let state = penalties
                .si
                .ok_or_else(|| Error::Config("SI regularizer without SI state".into()))?;
            br.reg = lambda * state.penalty(params)?;
            if lambda != 0.0 {
                param_grad = Some(state.penalty_grad(params)?);
            }
        }
    }

    let mut grads = backward(params, &cache, &upstream)?;
    if let Some(pg) = param_grad {
        grads.add_scaled(&pg, lambda);
    }
    let breakdown = br.finish();
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", breakdown.total)));
    }
    Ok(Objective {
        breakdown,
        grads,
        current_logits: cache.logits.slice_rows(0, n_cur),
    })
}

fn plain(method: Method) -> (Method, Regularizer) {
    (method, Regularizer::none())
}

/// Experience replay: `CE(current) + CE(replay)`, or `CE(current)` alone when
/// no replay batch is available.
pub fn er_loss(
    params: &MlpParams,
    current: &DenseMatrix,
    labels: &[usize],
    replay: Option<&ReplaySet>,
) -> Result<(f64, GradientSet)> {
    let (m, r) = plain(Method::er());
    let draw = ReplayDraw {
        first: replay.cloned(),
        second: None,
    };
    let o = objective(
        params,
        current,
        labels,
        &draw,
        &m,
        &r,
        RegTarget::Ct,
        Default::default(),
    )?;
    Ok((o.breakdown.total, o.grads))
}

/// Dark experience replay: `CE(current) + α·MSE(logits(replay), stored)`.
pub fn der_loss(
    params: &MlpParams,
    current: &DenseMatrix,
    labels: &[usize],
    replay: Option<&ReplaySet>,
    alpha: f64,
) -> Result<(f64, GradientSet)> {
    let (m, r) = plain(Method::der(alpha));
    let draw = ReplayDraw {
        first: replay.cloned(),
        second: None,
    };
    let o = objective(
        params,
        current,
        labels,
        &draw,
        &m,
        &r,
        RegTarget::Ct,
        Default::default(),
    )?;
    Ok((o.breakdown.total, o.grads))
}

/// DER++: `CE(current) + α·MSE(logits(replay₁), stored) + β·CE(replay₂)`.
pub fn derpp_loss(
    params: &MlpParams,
    current: &DenseMatrix,
    labels: &[usize],
    replay_logits: Option<&ReplaySet>,
    replay_labels: Option<&ReplaySet>,
    alpha: f64,
    beta: f64,
) -> Result<(f64, GradientSet)> {
    let (m, r) = plain(Method::derpp(alpha, beta));
    let draw = ReplayDraw {
        first: replay_logits.cloned(),
        second: replay_labels.cloned(),
    };
    let o = objective(
        params,
        current,
        labels,
        &draw,
        &m,
        &r,
        RegTarget::Ct,
        Default::default(),
    )?;
    Ok((o.breakdown.total, o.grads))
}

/// Mean loss breakdown over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub total: f64,
    pub ce_current: f64,
    pub ce_replay: f64,
    pub distill: f64,
    pub reg: f64,
}

/// All mutable state of one training run.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: MlpParams,
    pub ewc: Option<EwcState>,
    pub si: Option<SiState>,
    pub buffer: ReplayBuffer,
    rng: Rng,
}

impl Learner {
    pub fn new(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let params = MlpParams::init(
            input_dim,
            &cfg.hidden_dims,
            num_classes,
            &mut seeded(cfg.seed, STREAM_INIT),
        )?;
        Self::with_params(cfg, params)
    }

    /// Start from given parameters instead of a fresh initialization.
    pub fn with_params(cfg: &TrainConfig, params: MlpParams) -> Result<Self> {
        cfg.validate()?;
        let ewc = match cfg.regularizer.kind {
            RegularizerKind::Ewc => Some(EwcState::new(&params, cfg.ewc_strength)?),
            _ => None,
        };
        let si = match cfg.regularizer.kind {
            RegularizerKind::Si => Some(SiState::new(&params, cfg.si_damping, cfg.si_strength)?),
            _ => None,
        };
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.per_class_budget, params.num_classes(), cfg.seed),
            rng: seeded(cfg.seed, STREAM_TRAIN),
            params,
            ewc,
            si,
        })
    }

    /// Sample the replay batches a step of `cfg.method` uses.
    pub fn draw_replay(&mut self, cfg: &TrainConfig, rows: usize) -> ReplayDraw {
        let mut draw = ReplayDraw::default();
        if let Ok(entries) = self.buffer.sample_batch(rows, &mut self.rng) {
            draw.first = Some(ReplaySet::from_entries(&entries));
            if cfg.method.kind == MethodKind::Derpp {
                let entries = self
                    .buffer
                    .sample_batch(rows, &mut self.rng)
                    .expect("buffer is nonempty");
                draw.second = Some(ReplaySet::from_entries(&entries));
            }
        }
        draw
    }

    /// One optimizer step on `current` with a given replay draw. Returns the
    /// objective evaluated before the update.
    pub fn step(
        &mut self,
        cfg: &TrainConfig,
        current: &DenseMatrix,
        labels: &[usize],
        replay: &ReplayDraw,
    ) -> Result<Objective> {
        let obj = objective(
            &self.params,
            current,
            labels,
            replay,
            &cfg.method,
            &cfg.regularizer,
            cfg.reg_target,
            ParamPenalties {
                ewc: self.ewc.as_ref(),
                si: self.si.as_ref(),
            },
        )?;
        let next = sgd_step(&self.params, &obj.grads, cfg.lr)?;
        if let Some(si) = &mut self.si {
            si.accumulate(&obj.grads, &self.params, &next)?;
        }
        self.params = next;
        Ok(obj)
    }

    /// Offer samples to the buffer, attaching `logits` rows when the method
    /// replays logits.
    pub fn offer(
        &mut self,
        cfg: &TrainConfig,
        features: &DenseMatrix,
        labels: &[usize],
        logits: &DenseMatrix,
        task: usize,
    ) -> Result<()> {
        for (r, &label) in labels.iter().enumerate() {
            self.buffer.insert(BufferEntry {
                features: features.row(r).to_vec(),
                label,
                stored_logits: cfg.method.needs_logits().then(|| logits.row(r).to_vec()),
                insert_task: task,
            })?;
        }
        Ok(())
    }

    /// Draw replay, step, and (with batch cadence) offer the batch to the
    /// buffer with its pre-update logits.
    pub fn train_batch(
        &mut self,
        cfg: &TrainConfig,
        current: &DenseMatrix,
        labels: &[usize],
        task: usize,
    ) -> Result<LossBreakdown> {
        let draw = self.draw_replay(cfg, current.rows());
        let obj = self.step(cfg, current, labels, &draw)?;
        if cfg.insert_at == InsertAt::Batch {
            self.offer(cfg, current, labels, &obj.current_logits, task)?;
        }
        Ok(obj.breakdown)
    }

    /// Train for `cfg.epochs_per_task` shuffled passes, then fire the
    /// task-boundary hooks.
    pub fn train_task(&mut self, cfg: &TrainConfig, task: &TaskSpec) -> Result<Vec<EpochLog>> {
        if task.train.is_empty() {
            return Err(Error::Input(format!(
                "task {} has no training data",
                task.index
            )));
        }
        let mut logs = Vec::with_capacity(cfg.epochs_per_task);
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        for epoch in 0..cfg.epochs_per_task {
            order.shuffle(&mut self.rng);
            let mut sum = LossBreakdown::default();
            let mut batches = 0usize;
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let picked: Vec<_> = chunk.iter().map(|&i| task.train[i].clone()).collect();
                let (x, y) = samples_to_matrix(&picked);
                let br = self
                    .train_batch(cfg, &x, &y, task.index)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!(
                            "task {} epoch {epoch} batch {b}: {m}",
                            task.index
                        )),
                        other => other,
                    })?;
                sum.total += br.total;
                sum.ce_current += br.ce_current;
                sum.ce_replay += br.ce_replay;
                sum.distill += br.distill;
                sum.reg += br.reg;
                batches += 1;
            }
            let n = batches.max(1) as f64;
            logs.push(EpochLog {
                task: task.index,
                epoch,
                total: sum.total / n,
                ce_current: sum.ce_current / n,
                ce_replay: sum.ce_replay / n,
                distill: sum.distill / n,
                reg: sum.reg / n,
            });
        }
        self.end_task(cfg, task)?;
        Ok(logs)
    }

    /// Task-boundary hooks: EWC and SI consolidation, task-end buffer fill.
    pub fn end_task(&mut self, cfg: &TrainConfig, task: &TaskSpec) -> Result<()> {
        let (x, y) = task.train_matrix();
        if let Some(ewc) = &mut self.ewc {
            ewc.consolidate(&self.params, &x, &y)?;
        }
        if let Some(si) = &mut self.si {
            si.consolidate(&self.params)?;
        }
        if cfg.insert_at == InsertAt::TaskEnd {
            let logits = forward(&self.params, &x)?.logits;
            self.offer(cfg, &x, &y, &logits, task.index)?;
        }
        Ok(())
    }
}

/// Fraction of a task's test samples whose arg-max over all classes is the
/// true label.
pub fn evaluate_task(params: &MlpParams, task: &TaskSpec) -> Result<f64> {
    if task.test.is_empty() {
        return Err(Error::Input(format!(
            "task {} has no test samples",
            task.index
        )));
    }
    let (x, y) = task.test_matrix();
    let pred = argmax_rows(&forward(params, &x)?.logits);
    let hits = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Result of training over a full task stream.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub accuracy: AccuracyMatrix,
    pub learner: Learner,
    pub logs: Vec<EpochLog>,
}

/// Train on every task in order, evaluating all tasks seen so far after each.
pub fn run_sequence(stream: &TaskStream, cfg: &TrainConfig) -> Result<RunOutcome> {
    let mut learner = Learner::new(cfg, stream.dim, stream.num_classes)?;
    let mut accuracy = AccuracyMatrix::new(stream.len());
    let mut logs = Vec::new();
    for (j, task) in stream.tasks.iter().enumerate() {
        logs.extend(learner.train_task(cfg, task)?);
        for (i, past) in stream.tasks[..=j].iter().enumerate() {
            accuracy.set(i, j, evaluate_task(&learner.params, past)?)?;
        }
    }
    Ok(RunOutcome {
        accuracy,
        learner,
        logs,
    })
}
