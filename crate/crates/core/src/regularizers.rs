//! Regularizers added to the rehearsal objective.
//!
//! Two families live here:
//!
//! * prediction-space terms (information maximization and entropy
//!   minimization) that only look at a [`PredictionBatch`] and never consume
//!   labels;
//! * parameter-space penalties (EWC and SI) that anchor the weights to values
//!   consolidated at earlier task boundaries.
//!
//! Logarithms are natural and every `log p` is evaluated as `log max(p, ε)`.
//! The prediction-space gradients are returned with respect to the logits so
//! callers can splice them into the upstream gradient of a combined batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{
    backward, forward, softmax, DenseMatrix, GradientSet, MlpParams, PredictionBatch, PROB_EPS,
};

/// `p · log max(p, ε)`.
fn plogp(p: f64) -> f64 {
    p * p.max(PROB_EPS).ln()
}

/// Derivative of [`plogp`] in `p`.
fn plogp_prime(p: f64) -> f64 {
    if p >= PROB_EPS {
        p.ln() + 1.0
    } else {
        PROB_EPS.ln()
    }
}

fn batch_mean(probs: &PredictionBatch) -> Vec<f64> {
    let (b, k) = (probs.batch_size(), probs.num_classes());
    let mut mean = vec![0.0; k];
    for r in 0..b {
        for (m, p) in mean.iter_mut().zip(probs.row(r)) {
            *m += p;
        }
    }
    let inv = 1.0 / b.max(1) as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Mean per-sample Shannon entropy, in `[0, ln K]`.
pub fn entropy_term(probs: &PredictionBatch) -> f64 {
    let b = probs.batch_size();
    if b == 0 {
        return 0.0;
    }
    let total: f64 = (0..b)
        .map(|r| -probs.row(r).iter().map(|&p| plogp(p)).sum::<f64>())
        .sum();
    total / b as f64
}

/// Negative entropy of the batch-mean prediction, in `[−ln K, 0]`.
pub fn diversity_term(probs: &PredictionBatch) -> f64 {
    if probs.batch_size() == 0 {
        return 0.0;
    }
    batch_mean(probs).iter().map(|&m| plogp(m)).sum()
}

/// Information-maximization loss: confident rows, diverse batch mean.
///
/// Equals minus the mutual information between inputs and predicted labels
/// as estimated on this batch, so it lies in `[−ln K, 0]`.
pub fn im_loss(probs: &PredictionBatch) -> f64 {
    entropy_term(probs) + diversity_term(probs)
}

/// Entropy-minimization loss; identical to [`entropy_term`].
pub fn em_loss(probs: &PredictionBatch) -> f64 {
    entropy_term(probs)
}

/// Pull a gradient with respect to probabilities back through softmax.
fn through_softmax(probs: &PredictionBatch, dprobs: &DenseMatrix) -> DenseMatrix {
    let (b, k) = (probs.batch_size(), probs.num_classes());
    let mut out = DenseMatrix::zeros(b, k);
    for r in 0..b {
        let p = probs.row(r);
        let g = dprobs.row(r);
        let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
        for (o, (pi, gi)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pi * (gi - dot);
        }
    }
    out
}

fn entropy_dprobs(probs: &PredictionBatch, out: &mut DenseMatrix) {
    let inv_b = 1.0 / probs.batch_size().max(1) as f64;
    for r in 0..probs.batch_size() {
        for (o, &p) in out.row_mut(r).iter_mut().zip(probs.row(r)) {
            *o -= inv_b * plogp_prime(p);
        }
    }
}

/// Gradient of [`im_loss`] with respect to the logits that produced `probs`.
///
/// The diversity term couples every row through the batch mean.
pub fn im_grad_wrt_logits(probs: &PredictionBatch) -> DenseMatrix {
    let (b, k) = (probs.batch_size(), probs.num_classes());
    let mut dprobs = DenseMatrix::zeros(b, k);
    entropy_dprobs(probs, &mut dprobs);
    let inv_b = 1.0 / b.max(1) as f64;
    let mean_prime: Vec<f64> = batch_mean(probs).iter().map(|&m| plogp_prime(m)).collect();
    for r in 0..b {
        for (o, mp) in dprobs.row_mut(r).iter_mut().zip(&mean_prime) {
            *o += inv_b * mp;
        }
    }
    through_softmax(probs, &dprobs)
}

/// Gradient of [`em_loss`] with respect to the logits that produced `probs`.
pub fn em_grad_wrt_logits(probs: &PredictionBatch) -> DenseMatrix {
    let mut dprobs = DenseMatrix::zeros(probs.batch_size(), probs.num_classes());
    entropy_dprobs(probs, &mut dprobs);
    through_softmax(probs, &dprobs)
}

/// Which samples a prediction-space regularizer is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegTarget {
    /// Current-task batch.
    #[default]
    Ct,
    /// Replay batch.
    Bf,
    /// Current and replay batches concatenated.
    All,
}

/// The regularizer family attached to a rehearsal method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    #[default]
    None,
    Im,
    Em,
    Ewc,
    Si,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 5] = [
        RegularizerKind::None,
        RegularizerKind::Im,
        RegularizerKind::Em,
        RegularizerKind::Ewc,
        RegularizerKind::Si,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Im => "im",
            RegularizerKind::Em => "em",
            RegularizerKind::Ewc => "ewc",
            RegularizerKind::Si => "si",
        }
    }

    /// True for regularizers that act on predictions rather than weights.
    pub fn is_prediction_space(self) -> bool {
        matches!(self, RegularizerKind::Im | RegularizerKind::Em)
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Input(format!("unknown regularizer {s:?}")))
    }
}

impl fmt::Display for RegTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegTarget::Ct => "ct",
            RegTarget::Bf => "bf",
            RegTarget::All => "all",
        })
    }
}

/// A regularizer together with its loss-balancing weight `λ ∈ [0, 1]`.
///
/// The combined objective is `(1 − λ)·supervised + λ·R`; with
/// [`RegularizerKind::None`] the supervised loss is used unscaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub weight: f64,
}

impl Regularizer {
    pub const DEFAULT_WEIGHT: f64 = 0.5;

    pub fn new(kind: RegularizerKind, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Config(format!(
                "regularizer weight must lie in [0, 1], got {weight}"
            )));
        }
        Ok(Self { kind, weight })
    }

    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            weight: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != RegularizerKind::None
    }

    /// Factor applied to the supervised part of the objective.
    pub fn supervised_scale(&self) -> f64 {
        if self.is_active() {
            1.0 - self.weight
        } else {
            1.0
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!(
            "{what} has {got} parameters, model has {want}"
        )));
    }
    Ok(())
}

/// Elastic weight consolidation: diagonal Fisher and anchor weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    anchor: Vec<f64>,
    fisher: Vec<f64>,
    strength: f64,
}

impl EwcState {
    pub const DEFAULT_STRENGTH: f64 = 1.0;

    /// Fresh state anchored at `params` with an all-zero Fisher.
    pub fn new(params: &MlpParams, strength: f64) -> Result<Self> {
        if !(strength >= 0.0) {
            return Err(Error::Config(format!(
                "EWC strength must be ≥ 0, got {strength}"
            )));
        }
        let n = params.num_params();
        Ok(Self {
            anchor: params.flatten(),
            fisher: vec![0.0; n],
            strength,
        })
    }

    /// Explicit state, mainly for tests and checkpoint restore.
    pub fn from_parts(anchor: Vec<f64>, fisher: Vec<f64>, strength: f64) -> Result<Self> {
        if anchor.len() != fisher.len() {
            return Err(Error::Config("anchor and Fisher lengths differ".into()));
        }
        if fisher.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Input("Fisher entries must be nonnegative".into()));
        }
        Ok(Self {
            anchor,
            fisher,
            strength,
        })
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn fisher(&self) -> &[f64] {
        &self.fisher
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// `Σ_i (λ_ewc / 2)·F_i·(θ_i − anchor_i)²`.
    pub fn penalty(&self, params: &MlpParams) -> Result<f64> {
        let theta = params.flatten();
        check_len("EWC state", self.anchor.len(), theta.len())?;
        Ok(theta
            .iter()
            .zip(&self.anchor)
            .zip(&self.fisher)
            .map(|((t, a), f)| 0.5 * self.strength * f * (t - a) * (t - a))
            .sum())
    }

    /// `λ_ewc·F_i·(θ_i − anchor_i)` per parameter.
    pub fn penalty_grad(&self, params: &MlpParams) -> Result<GradientSet> {
        let theta = params.flatten();
        check_len("EWC state", self.anchor.len(), theta.len())?;
        let g: Vec<f64> = theta
            .iter()
            .zip(&self.anchor)
            .zip(&self.fisher)
            .map(|((t, a), f)| self.strength * f * (t - a))
            .collect();
        GradientSet::from_flat(params, &g)
    }

    /// Task-boundary update: re-anchor at `params` and add the empirical
    /// Fisher of `log f^y(x)` over the task data.
    pub fn consolidate(
        &mut self,
        params: &MlpParams,
        features: &DenseMatrix,
        labels: &[usize],
    ) -> Result<()> {
        check_len("EWC state", self.anchor.len(), params.num_params())?;
        let increment = empirical_fisher(params, features, labels)?;
        for (f, inc) in self.fisher.iter_mut().zip(&increment) {
            *f += inc;
        }
        self.anchor = params.flatten();
        Ok(())
    }
}

/// Mean over samples of the squared per-sample gradient of `log f^y(x)`.
pub fn empirical_fisher(
    params: &MlpParams,
    features: &DenseMatrix,
    labels: &[usize],
) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::Input(
            "Fisher estimate needs at least one sample".into(),
        ));
    }
    if labels.len() != features.rows() {
        return Err(Error::Input(format!(
            "{} labels for {} samples",
            labels.len(),
            features.rows()
        )));
    }
    let k = params.num_classes();
    let mut acc = vec![0.0; params.num_params()];
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let x = features.slice_rows(r, r + 1);
        let cache = forward(params, &x)?;
        let probs = softmax(&cache.logits)?;
        if probs.row(0)[y] < PROB_EPS {
            continue;
        }
        // ∂ log p_y / ∂z = onehot(y) − p; the sign vanishes when squared.
        let mut up = probs.probs().clone();
        up.row_mut(0)[y] -= 1.0;
        let g = backward(params, &cache, &up)?.flatten();
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi * gi;
        }
    }
    let inv = 1.0 / labels.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Synaptic intelligence: online path-integral importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiState {
    omega: Vec<f64>,
    importance: Vec<f64>,
    ref_params: Vec<f64>,
    task_start: Vec<f64>,
    damping: f64,
    strength: f64,
}

impl SiState {
    pub const DEFAULT_DAMPING: f64 = 0.1;
    pub const DEFAULT_STRENGTH: f64 = 1.0;

    pub fn new(params: &MlpParams, damping: f64, strength: f64) -> Result<Self> {
        if !(damping > 0.0) {
            return Err(Error::Config(format!(
                "SI damping must be > 0, got {damping}"
            )));
        }
        if !(strength >= 0.0) {
            return Err(Error::Config(format!(
                "SI strength must be ≥ 0, got {strength}"
            )));
        }
        let theta = params.flatten();
        Ok(Self {
            omega: vec![0.0; theta.len()],
            importance: vec![0.0; theta.len()],
            ref_params: theta.clone(),
            task_start: theta,
            damping,
            strength,
        })
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    pub fn ref_params(&self) -> &[f64] {
        &self.ref_params
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Overwrite the consolidated importance, e.g. when restoring a run.
    pub fn with_importance(mut self, importance: Vec<f64>) -> Result<Self> {
        check_len("SI importance", importance.len(), self.importance.len())?;
        if importance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Input("SI importance must be nonnegative".into()));
        }
        self.importance = importance;
        Ok(self)
    }

    /// After an optimizer step: `ω ← ω − g·(θ_new − θ_prev)`.
    pub fn accumulate(
        &mut self,
        grads: &GradientSet,
        prev: &MlpParams,
        next: &MlpParams,
    ) -> Result<()> {
        let g = grads.flatten();
        let (p, n) = (prev.flatten(), next.flatten());
        check_len("SI gradient", g.len(), self.omega.len())?;
        check_len("SI parameters", p.len(), self.omega.len())?;
        check_len("SI parameters", n.len(), self.omega.len())?;
        for (((w, gi), pi), ni) in self.omega.iter_mut().zip(&g).zip(&p).zip(&n) {
            *w += -gi * (ni - pi);
        }
        Ok(())
    }

    /// Task boundary: fold `max(0, ω)/((Δθ)² + ξ)` into the importance,
    /// reset `ω`, and re-anchor.
    pub fn consolidate(&mut self, params: &MlpParams) -> Result<()> {
        let theta = params.flatten();
        check_len("SI state", self.omega.len(), theta.len())?;
        for (((imp, w), t), s) in self
            .importance
            .iter_mut()
            .zip(&self.omega)
            .zip(&theta)
            .zip(&self.task_start)
        {
            let delta = t - s;
            *imp += w.max(0.0) / (delta * delta + self.damping);
        }
        self.omega.iter_mut().for_each(|w| *w = 0.0);
        self.ref_params = theta.clone();
        self.task_start = theta;
        Ok(())
    }

    /// `c·Σ_k Ω_k·(θ_k − ref_k)²`.
    pub fn penalty(&self, params: &MlpParams) -> Result<f64> {
        let theta = params.flatten();
        check_len("SI state", self.ref_params.len(), theta.len())?;
        Ok(self.strength
            * theta
                .iter()
                .zip(&self.ref_params)
                .zip(&self.importance)
                .map(|((t, r), o)| o * (t - r) * (t - r))
                .sum::<f64>())
    }

    /// `2·c·Ω_k·(θ_k − ref_k)` per parameter.
    pub fn penalty_grad(&self, params: &MlpParams) -> Result<GradientSet> {
        let theta = params.flatten();
        check_len("SI state", self.ref_params.len(), theta.len())?;
        let g: Vec<f64> = theta
            .iter()
            .zip(&self.ref_params)
            .zip(&self.importance)
            .map(|((t, r), o)| 2.0 * self.strength * o * (t - r))
            .collect();
        GradientSet::from_flat(params, &g)
    }
}
