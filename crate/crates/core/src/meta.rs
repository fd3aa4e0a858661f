//! Inner-loop adaptation and exact meta-gradients.
//!
//! The meta-gradient of `θ ↦ L(θ_K(θ); D')` is computed by a reverse sweep
//! over the stored inner trajectory: starting from `v = ∇L(θ_K; D')`, each
//! inner step contributes `v ← v − β_low·H_j·P·v`, where `H_j` is the support
//! Hessian at the point the step's gradient was evaluated and `P` is the
//! identity or the ANIL head projection. Perturbation offsets are constants
//! of that map; nothing is differentiated through them.

use std::collections::VecDeque;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::params::ParamVector;
use crate::rng::{self, StreamTag};
use crate::tasks::Task;
use crate::theory::ConvergenceTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    /// Inner step size. Zero is accepted and turns adaptation into the identity.
    pub beta_low: f64,
    pub steps: usize,
    /// Drop the Hessian terms (first-order MAML).
    pub first_order: bool,
    /// Restrict adaptation to parameters at or after the model's head split.
    pub anil: bool,
    /// Evaluate each inner gradient on a random subset of this many support points.
    pub subsample: Option<usize>,
}

impl InnerConfig {
    pub fn new(beta_low: f64, steps: usize) -> Result<Self> {
        let cfg = InnerConfig { beta_low, steps, first_order: false, anil: false, subsample: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn first_order(mut self, on: bool) -> Self {
        self.first_order = on;
        self
    }

    pub fn anil(mut self, on: bool) -> Self {
        self.anil = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_low >= 0.0) || !self.beta_low.is_finite() {
            return Err(Error::config("beta_low must be a finite non-negative number"));
        }
        if self.steps == 0 {
            return Err(Error::config("inner steps must be >= 1"));
        }
        if self.subsample == Some(0) {
            return Err(Error::config("inner subsample size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub beta_up: f64,
    /// Tasks per meta-batch (`M`).
    pub meta_batch: usize,
    /// Meta-iterations (`T`).
    pub iterations: usize,
}

impl MetaConfig {
    pub fn new(beta_up: f64, meta_batch: usize, iterations: usize) -> Result<Self> {
        let cfg = MetaConfig { beta_up, meta_batch, iterations };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_up > 0.0) || !self.beta_up.is_finite() {
            return Err(Error::config("beta_up must be positive"));
        }
        if self.meta_batch == 0 || self.iterations == 0 {
            return Err(Error::config("meta_batch and iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Bias applied to the first inner step:
/// `θ_0 = θ + start`, first gradient taken at `θ_0 + grad`, optionally on
/// the `sds_ratio` fraction of support points whose loss rises most there.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Perturbation {
    pub start: Option<ParamVector>,
    pub grad: Option<ParamVector>,
    pub sds_ratio: Option<f64>,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation::default()
    }

    /// The biased gradient-descent offsets `(ε, ε_m)`; exact zeros are dropped.
    pub fn bgd(start: &ParamVector, grad: &ParamVector) -> Self {
        Perturbation {
            start: (!start.is_zero()).then(|| start.clone()),
            grad: (!grad.is_zero()).then(|| grad.clone()),
            sds_ratio: None,
        }
    }
}

/// Gradient and Hessian-vector product evaluations spent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub grads: u64,
    pub hvps: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.grads += o.grads;
        self.hvps += o.hvps;
    }
}

#[derive(Debug, Clone)]
struct StepEval {
    at: ParamVector,
    /// Support subset used by this step; `None` means the full support set.
    data: Option<Dataset>,
}

/// Inner-loop iterates `θ_0..θ_K` and where each step's gradient was taken.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub points: Vec<ParamVector>,
    evals: Vec<StepEval>,
}

impl Trajectory {
    pub fn adapted(&self) -> &ParamVector {
        self.points.last().expect("at least θ_0")
    }

    /// Point at which step `j`'s support gradient was evaluated.
    pub fn eval_point(&self, j: usize) -> &ParamVector {
        &self.evals[j].at
    }
}

pub(crate) fn project_head(g: &mut ParamVector, split: usize) {
    for x in &mut g.as_mut_slice()[..split] {
        *x = 0.0;
    }
}

/// Indices of the `⌈ratio·n⌉` largest entries of `increase`, ties to the
/// lower index, returned in ascending index order.
pub(crate) fn top_fraction(increase: &[f64], ratio: f64) -> Vec<usize> {
    let n = increase.len();
    let keep = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| increase[b].total_cmp(&increase[a]).then(a.cmp(&b)));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    chosen
}

fn with_step(err: Error, step: usize) -> Error {
    match err {
        Error::Divergence(mut site) => {
            site.step.get_or_insert(step);
            Error::Divergence(site)
        }
        other => other,
    }
}

fn check_dim(model: &ModelSpec, v: &ParamVector, what: &str) -> Result<()> {
    if v.dim() != model.dim() {
        return Err(Error::config(format!("{what} has dimension {} but the model has {}", v.dim(), model.dim())));
    }
    Ok(())
}

/// Runs `cfg.steps` gradient steps on the support set:
/// `θ_{j+1} = θ_j − β_low·P·∇L(θ_j + δ_j; D_m)` with `δ_0` the gradient
/// offset of `pert` and `δ_j = 0` afterwards.
pub fn inner_adapt(
    model: &ModelSpec,
    theta: &ParamVector,
    task: &Task,
    cfg: &InnerConfig,
    pert: &Perturbation,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_dim(model, theta, "theta")?;
    for off in [&pert.start, &pert.grad].into_iter().flatten() {
        check_dim(model, off, "perturbation")?;
    }
    let split = model.head_split();
    let mut current = match &pert.start {
        Some(eps) => theta.add(eps),
        None => theta.clone(),
    };
    let mut points = Vec::with_capacity(cfg.steps + 1);
    let mut evals = Vec::with_capacity(cfg.steps);
    let mut batch_rng = cfg.subsample.map(|_| rng::stream(task.master_seed, StreamTag::Subsample, task.task_id));
    for j in 0..cfg.steps {
        let mut data = match (cfg.subsample, batch_rng.as_mut()) {
            (Some(b), Some(rng)) if b < task.support.len() => {
                let mut idx = index::sample(rng, task.support.len(), b).into_vec();
                idx.sort_unstable();
                Some(task.support.subset(&idx))
            }
            _ => None,
        };
        let at = match (&pert.grad, j) {
            (Some(eps_m), 0) => current.add(eps_m),
            _ => current.clone(),
        };
        if let (Some(ratio), 0) = (pert.sds_ratio, j) {
            let base = data.as_ref().unwrap_or(&task.support);
            let after = diffcore::per_sample_losses(model, &at, base).map_err(|e| with_step(e, j))?;
            let before = diffcore::per_sample_losses(model, &current, base).map_err(|e| with_step(e, j))?;
            let increase: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            let chosen = top_fraction(&increase, ratio);
            if chosen.len() < base.len() {
                data = Some(base.subset(&chosen));
            }
        }
        let mut g = diffcore::grad(model, &at, data.as_ref().unwrap_or(&task.support)).map_err(|e| with_step(e, j))?;
        if cfg.anil {
            project_head(&mut g, split);
        }
        let next = current.plus_scaled(-cfg.beta_low, &g);
        if !next.is_finite() {
            return Err(Error::diverged("inner iterate", Some(j)));
        }
        points.push(std::mem::replace(&mut current, next));
        evals.push(StepEval { at, data });
    }
    points.push(current);
    Ok(Trajectory { points, evals })
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grad: ParamVector,
    /// `L(θ_K; D')`
    pub query_loss: f64,
    pub cost: Cost,
}

/// Meta-gradient of one task against an explicit query set.
pub fn meta_gradient_on(
    model: &ModelSpec,
    theta: &ParamVector,
    task: &Task,
    query: &Dataset,
    cfg: &InnerConfig,
    pert: &Perturbation,
) -> Result<MetaGradient> {
    let traj = inner_adapt(model, theta, task, cfg, pert)?;
    let (query_loss, mut v) = diffcore::value_and_grad(model, traj.adapted(), query)?;
    let mut cost = Cost { grads: cfg.steps as u64 + 1, hvps: 0 };
    if pert.sds_ratio.is_some() {
        cost.grads += 1;
    }
    if !cfg.first_order {
        let split = model.head_split();
        for (j, eval) in traj.evals.iter().enumerate().rev() {
            let mut u = v.clone();
            if cfg.anil {
                project_head(&mut u, split);
            }
            let hv = diffcore::hvp(model, &eval.at, eval.data.as_ref().unwrap_or(&task.support), &u)
                .map_err(|e| with_step(e, j))?;
            v.axpy(-cfg.beta_low, &hv);
            cost.hvps += 1;
        }
        if !v.is_finite() {
            return Err(Error::diverged("meta-gradient", None));
        }
    }
    Ok(MetaGradient { grad: v, query_loss, cost })
}

/// Per-task meta-gradient `∇_θ L(θ_K(θ); D'_m)` and the query loss at `θ_K`.
pub fn meta_gradient(
    model: &ModelSpec,
    theta: &ParamVector,
    task: &Task,
    cfg: &InnerConfig,
    pert: &Perturbation,
) -> Result<MetaGradient> {
    meta_gradient_on(model, theta, task, &task.query, cfg, pert)
}

/// Unperturbed second-order meta-gradient averaged over `tasks`: the
/// gradient of the MAML objective restricted to those tasks.
pub fn maml_objective_gradient(
    model: &ModelSpec,
    theta: &ParamVector,
    tasks: &[Task],
    cfg: &InnerConfig,
) -> Result<(ParamVector, f64, Cost)> {
    if tasks.is_empty() {
        return Err(Error::config("objective gradient needs at least one task"));
    }
    let exact = InnerConfig { first_order: false, ..cfg.clone() };
    let none = Perturbation::none();
    let parts = par::map_slice(tasks, |m, task| {
        meta_gradient(model, theta, task, &exact, &none).map_err(|e| e.in_task(m))
    });
    let mut sum = ParamVector::zeros(model.dim());
    let mut loss = 0.0;
    let mut cost = Cost::default();
    for part in parts {
        let part = part?;
        sum.axpy(1.0, &part.grad);
        loss += part.query_loss;
        cost += part.cost;
    }
    let inv = 1.0 / tasks.len() as f64;
    Ok((sum.scaled(inv), loss * inv, cost))
}

/// One meta-iteration's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based iteration this report closes.
    pub iter: u64,
    /// Mean query loss at the adapted parameters used by the update.
    pub meta_loss: f64,
    /// `‖∇F(θ^t)‖²` at the unperturbed pre-update iterate.
    pub grad_norm_sq: f64,
    pub running_avg_grad_norm_sq: f64,
    pub eps_norm: f64,
    pub mean_eps_m_norm: f64,
    /// Perturbations that fell back to zero because their gradient vanished.
    pub degenerate_flags: u32,
    pub cost: Cost,
}

const RECENT_CAPACITY: usize = 64;

/// Meta-parameters and bookkeeping owned by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: ParamVector,
    /// Completed meta-iterations.
    pub iter: u64,
    pub trace: ConvergenceTrace,
    /// Most recent step reports, oldest first.
    pub recent: VecDeque<StepReport>,
}

impl TrainState {
    pub fn new(theta: ParamVector) -> Self {
        TrainState { theta, iter: 0, trace: ConvergenceTrace::default(), recent: VecDeque::new() }
    }

    pub fn last_report(&self) -> Option<&StepReport> {
        self.recent.back()
    }

    pub(crate) fn advance(mut self, theta: ParamVector, mut report: StepReport) -> Self {
        self.iter += 1;
        report.iter = self.iter;
        report.running_avg_grad_norm_sq = self.trace.push(self.iter, report.grad_norm_sq);
        if self.recent.len() == RECENT_CAPACITY {
            self.recent.pop_front();
        }
        self.recent.push_back(report);
        self.theta = theta;
        self
    }
}

/// Summary of the perturbations used for an update.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PerturbStats {
    pub eps_norm: f64,
    pub mean_eps_m_norm: f64,
    pub degenerate: u32,
    pub cost: Cost,
}

/// `θ^{t+1} = θ^t − β_up·Σ_m g_m`, summing in task order.
pub(crate) fn meta_update(
    model: &ModelSpec,
    state: TrainState,
    tasks: &[Task],
    inner: &InnerConfig,
    meta: &MetaConfig,
    perts: &[Perturbation],
    stats: PerturbStats,
    diagnostic: Option<&[Task]>,
) -> Result<TrainState> {
    if tasks.is_empty() {
        return Err(Error::config("meta step needs at least one task"));
    }
    debug_assert_eq!(tasks.len(), perts.len());
    let theta = &state.theta;
    let parts = par::map_slice(tasks, |m, task| {
        meta_gradient_on(model, theta, task, task.update_query(), inner, &perts[m]).map_err(|e| e.in_task(m))
    });
    let mut sum = ParamVector::zeros(model.dim());
    let mut loss = 0.0;
    let mut cost = stats.cost;
    for part in parts {
        let part = part?;
        sum.axpy(1.0, &part.grad);
        loss += part.query_loss;
        cost += part.cost;
    }
    let m = tasks.len() as f64;
    let unperturbed = perts.iter().all(|p| *p == Perturbation::none());
    let reusable = unperturbed && !inner.first_order && tasks.iter().all(|t| t.alt_query.is_none());
    let grad_norm_sq = match diagnostic {
        Some(diag) => {
            let (g, _, c) = maml_objective_gradient(model, theta, diag, inner)?;
            cost += c;
            g.norm_sq()
        }
        None if reusable => sum.scaled(1.0 / m).norm_sq(),
        None => {
            let (g, _, c) = maml_objective_gradient(model, theta, tasks, inner)?;
            cost += c;
            g.norm_sq()
        }
    };
    let next = theta.plus_scaled(-meta.beta_up, &sum);
    if !next.is_finite() {
        return Err(Error::diverged("meta-parameters", None));
    }
    let report = StepReport {
        iter: 0,
        meta_loss: loss / m,
        grad_norm_sq,
        running_avg_grad_norm_sq: 0.0,
        eps_norm: stats.eps_norm,
        mean_eps_m_norm: stats.mean_eps_m_norm,
        degenerate_flags: stats.degenerate,
        cost,
    };
    Ok(state.advance(next, report))
}

/// Plain (or first-order) MAML meta-step over `tasks`.
pub fn maml_meta_step(
    model: &ModelSpec,
    state: TrainState,
    tasks: &[Task],
    inner: &InnerConfig,
    meta: &MetaConfig,
) -> Result<TrainState> {
    let perts = vec![Perturbation::none(); tasks.len()];
    meta_update(model, state, tasks, inner, meta, &perts, PerturbStats::default(), None)
}

/// Gradient descent on the task-averaged support loss (multi-task ERM).
pub fn erm_step(model: &ModelSpec, state: TrainState, tasks: &[Task], meta: &MetaConfig) -> Result<TrainState> {
    if tasks.is_empty() {
        return Err(Error::config("erm step needs at least one task"));
    }
    let theta = &state.theta;
    let parts = par::map_slice(tasks, |m, task| {
        diffcore::value_and_grad(model, theta, &task.support).map_err(|e| e.in_task(m))
    });
    let mut sum = ParamVector::zeros(model.dim());
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        sum.axpy(1.0, &g);
        loss += l;
    }
    let inv = 1.0 / tasks.len() as f64;
    let avg = sum.scaled(inv);
    let next = theta.plus_scaled(-meta.beta_up, &avg);
    if !next.is_finite() {
        return Err(Error::diverged("meta-parameters", None));
    }
    let report = StepReport {
        iter: 0,
        meta_loss: loss * inv,
        grad_norm_sq: avg.norm_sq(),
        running_avg_grad_norm_sq: 0.0,
        eps_norm: 0.0,
        mean_eps_m_norm: 0.0,
        degenerate_flags: 0,
        cost: Cost { grads: tasks.len() as u64, hvps: 0 },
    };
    Ok(state.advance(next, report))
}
