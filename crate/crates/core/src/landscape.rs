//! Loss-surface instruments: 2-D sections along filter-normalized random
//! directions, a worst-case sharpness estimate over an `ℓ2` ball, and
//! train/held-out generalization gaps after adaptation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::meta::{self, InnerConfig, Perturbation};
use crate::par;
use crate::params::ParamVector;
use crate::rng::{self, StreamTag};
use crate::tasks::{Task, TaskFamily};

/// Loss value stored for cells where evaluation diverged.
pub const DIVERGED: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub d1: ParamVector,
    pub d2: ParamVector,
    /// Parameter groups whose norm in `θ` is zero; their direction entries are zero.
    pub zero_groups: Vec<std::ops::Range<usize>>,
}

fn filter_normalized(model: &ModelSpec, theta: &ParamVector, rng: &mut impl Rng, zero: &mut Vec<std::ops::Range<usize>>) -> ParamVector {
    let mut d: Vec<f64> = (0..theta.dim()).map(|_| rng.sample(StandardNormal)).collect();
    for group in model.filter_groups() {
        let target = theta.as_slice()[group.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        let current = d[group.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        if target == 0.0 || current == 0.0 {
            d[group.clone()].iter_mut().for_each(|x| *x = 0.0);
            if !zero.contains(&group) {
                zero.push(group);
            }
        } else {
            let s = target / current;
            d[group].iter_mut().for_each(|x| *x *= s);
        }
    }
    ParamVector::from_vec(d)
}

/// Two Gaussian directions rescaled group-by-group to the norms of `θ`'s
/// groups (one group per output unit's incoming weights, one per layer's
/// biases), with `d2` then orthogonalized against `d1`.
pub fn random_directions(model: &ModelSpec, theta: &ParamVector, seed: u64) -> Result<Directions> {
    if theta.dim() != model.dim() {
        return Err(Error::config("theta dimension does not match the model"));
    }
    let mut zero_groups = Vec::new();
    let d1 = filter_normalized(model, theta, &mut rng::stream(seed, StreamTag::Directions, 0), &mut zero_groups);
    let mut d2 = filter_normalized(model, theta, &mut rng::stream(seed, StreamTag::Directions, 1), &mut zero_groups);
    let nn = d1.norm_sq();
    if nn > 0.0 {
        d2.axpy(-d1.dot(&d2) / nn, &d1);
    }
    Ok(Directions { d1, d2, zero_groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridObjective {
    /// `L(θ+δ; D)`
    ErmTaskLoss,
    /// `L(θ′(θ+δ); D)` with `θ′` one inner gradient step on `D`.
    MamlTaskLoss,
}

impl GridObjective {
    pub fn name(self) -> &'static str {
        match self {
            GridObjective::ErmTaskLoss => "erm_task_loss",
            GridObjective::MamlTaskLoss => "maml_task_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub d1: ParamVector,
    pub d2: ParamVector,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[i][j]` is the objective at `θ + xs[j]·d1 + ys[i]·d2`.
    pub values: Vec<Vec<f64>>,
    pub diverged: Vec<Vec<bool>>,
    pub objective: GridObjective,
}

/// `resolution` evenly spaced points on `[−extent, extent]`; the middle one
/// of an odd count is exactly zero.
pub fn grid_axis(extent: f64, resolution: usize) -> Vec<f64> {
    let span = (resolution - 1) as f64;
    (0..resolution).map(|j| extent * (2.0 * j as f64 - span) / span).collect()
}

fn objective_value(model: &ModelSpec, p: &ParamVector, data: &Dataset, objective: GridObjective, beta_low: f64) -> Result<f64> {
    match objective {
        GridObjective::ErmTaskLoss => diffcore::loss(model, p, data),
        GridObjective::MamlTaskLoss => {
            let g = diffcore::grad(model, p, data)?;
            let adapted = p.plus_scaled(-beta_low, &g);
            if !adapted.is_finite() {
                return Err(Error::diverged("adapted parameters", Some(0)));
            }
            diffcore::loss(model, &adapted, data)
        }
    }
}

/// Evaluates `objective` on the task's support set over a square grid.
/// Diverging cells hold [`DIVERGED`] and are flagged.
pub fn loss_grid(
    model: &ModelSpec,
    theta: &ParamVector,
    task: &Task,
    dirs: &Directions,
    extent: f64,
    resolution: usize,
    objective: GridObjective,
    beta_low: f64,
) -> Result<LandscapeGrid> {
    if resolution < 2 {
        return Err(Error::config("landscape resolution must be >= 2"));
    }
    if !(extent > 0.0) || !extent.is_finite() {
        return Err(Error::config("landscape extent must be positive"));
    }
    for d in [theta, &dirs.d1, &dirs.d2] {
        if d.dim() != model.dim() {
            return Err(Error::config("direction dimension does not match the model"));
        }
    }
    let axis = grid_axis(extent, resolution);
    let data = &task.support;
    let cells = par::map_indexed(resolution * resolution, |cell| {
        let (i, j) = (cell / resolution, cell % resolution);
        let (x, y) = (axis[j], axis[i]);
        let p = ParamVector::from_vec(
            theta.iter().zip(dirs.d1.iter()).zip(dirs.d2.iter()).map(|((t, a), b)| t + x * a + y * b).collect(),
        );
        match objective_value(model, &p, data, objective, beta_low) {
            Ok(v) if v.is_finite() => Ok((v, false)),
            Ok(_) | Err(Error::Divergence(_)) => Ok((DIVERGED, true)),
            Err(e) => Err(e),
        }
    });
    let mut values = vec![vec![0.0; resolution]; resolution];
    let mut diverged = vec![vec![false; resolution]; resolution];
    for (cell, r) in cells.into_iter().enumerate() {
        let (v, d) = r?;
        values[cell / resolution][cell % resolution] = v;
        diverged[cell / resolution][cell % resolution] = d;
    }
    Ok(LandscapeGrid {
        d1: dirs.d1.clone(),
        d2: dirs.d2.clone(),
        xs: axis.clone(),
        ys: axis,
        values,
        diverged,
        objective,
    })
}

/// A differentiable scalar function of the parameters.
pub trait Objective: Sync {
    fn value(&self, p: &ParamVector) -> Result<f64>;
    fn value_and_grad(&self, p: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Plain data loss `L(θ; D)`.
pub struct DataLoss<'a> {
    pub model: &'a ModelSpec,
    pub data: &'a Dataset,
}

impl Objective for DataLoss<'_> {
    fn value(&self, p: &ParamVector) -> Result<f64> {
        diffcore::loss(self.model, p, self.data)
    }

    fn value_and_grad(&self, p: &ParamVector) -> Result<(f64, ParamVector)> {
        diffcore::value_and_grad(self.model, p, self.data)
    }
}

/// MAML objective over a task set: mean query loss after inner adaptation.
pub struct MamlLoss<'a> {
    pub model: &'a ModelSpec,
    pub tasks: &'a [Task],
    pub inner: &'a InnerConfig,
}

impl Objective for MamlLoss<'_> {
    fn value(&self, p: &ParamVector) -> Result<f64> {
        let parts = par::map_slice(self.tasks, |m, task| {
            meta::inner_adapt(self.model, p, task, self.inner, &Perturbation::none())
                .and_then(|traj| diffcore::loss(self.model, traj.adapted(), &task.query))
                .map_err(|e| e.in_task(m))
        });
        let mut sum = 0.0;
        for v in parts {
            sum += v?;
        }
        Ok(sum / self.tasks.len() as f64)
    }

    fn value_and_grad(&self, p: &ParamVector) -> Result<(f64, ParamVector)> {
        let (g, loss, _) = meta::maml_objective_gradient(self.model, p, self.tasks, self.inner)?;
        Ok((loss, g))
    }
}

/// Ascent steps per restart.
pub const ASCENT_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessReport {
    pub alpha: f64,
    /// Best `L(θ+ε) − L(θ)` found with `‖ε‖ ≤ α`; never negative.
    pub sharpness: f64,
    pub argmax: ParamVector,
    pub restarts: usize,
}

impl SharpnessReport {
    pub fn argmax_norm(&self) -> f64 {
        self.argmax.norm()
    }
}

fn random_on_sphere(dim: usize, alpha: f64, rng: &mut impl Rng) -> ParamVector {
    loop {
        let u = ParamVector::from_vec((0..dim).map(|_| rng.sample(StandardNormal)).collect());
        let n = u.norm();
        if n > 0.0 {
            return u.scaled(alpha / n);
        }
    }
}

fn project_ball(eps: &mut ParamVector, alpha: f64) {
    let n = eps.norm();
    if n > alpha {
        *eps = eps.scaled(alpha / n);
    }
}

/// Projected ascent from `eps`. On the sphere with an outward gradient only
/// the tangential component moves the iterate; the step length is `α/10`.
fn ascend(obj: &dyn Objective, theta: &ParamVector, mut eps: ParamVector, alpha: f64, best: &mut (f64, ParamVector)) -> Result<()> {
    let step = alpha / 10.0;
    for k in 0..=ASCENT_STEPS {
        let (v, g) = obj.value_and_grad(&theta.add(&eps))?;
        if v > best.0 {
            *best = (v, eps.clone());
        }
        if k == ASCENT_STEPS {
            break;
        }
        let en = eps.norm_sq();
        let radial = g.dot(&eps);
        let dir = if en >= alpha * alpha * (1.0 - 1e-9) && radial > 0.0 {
            g.plus_scaled(-radial / en, &eps)
        } else {
            g
        };
        let n = dir.norm();
        if !(n > 1e-14 * alpha) {
            break;
        }
        eps.axpy(step / n, &dir);
        project_ball(&mut eps, alpha);
    }
    Ok(())
}

fn sharpness_from(obj: &dyn Objective, theta: &ParamVector, alpha: f64, budget: usize, seed: u64, warm: Option<&ParamVector>) -> Result<SharpnessReport> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config("sharpness radius must be positive"));
    }
    if budget == 0 {
        return Err(Error::config("sharpness budget must be >= 1"));
    }
    let (base, g) = obj.value_and_grad(theta)?;
    let dim = theta.dim();
    let mut best = (base, ParamVector::zeros(dim));
    if let Some(w) = warm {
        let v = obj.value(&theta.add(w))?;
        if v > best.0 {
            best = (v, w.clone());
        }
        ascend(obj, theta, w.clone(), alpha, &mut best)?;
    }
    let mut rng = rng::stream(seed, StreamTag::Sharpness, alpha.to_bits());
    for r in 0..budget {
        let start = if r == 0 && g.norm() > 0.0 {
            g.scaled(alpha / g.norm())
        } else {
            random_on_sphere(dim, alpha, &mut rng)
        };
        ascend(obj, theta, start, alpha, &mut best)?;
    }
    Ok(SharpnessReport { alpha, sharpness: best.0 - base, argmax: best.1, restarts: budget })
}

/// Worst-case increase of `obj` over the `α`-ball around `θ`, estimated by
/// multi-start projected gradient ascent (`budget` restarts, the first along
/// the gradient).
pub fn sharpness_of(obj: &dyn Objective, theta: &ParamVector, alpha: f64, budget: usize, seed: u64) -> Result<SharpnessReport> {
    sharpness_from(obj, theta, alpha, budget, seed, None)
}

pub fn sharpness(model: &ModelSpec, theta: &ParamVector, data: &Dataset, alpha: f64, budget: usize, seed: u64) -> Result<SharpnessReport> {
    sharpness_of(&DataLoss { model, data }, theta, alpha, budget, seed)
}

/// Sharpness over an ascending radius schedule. Each radius also starts from
/// the previous maximizer, so the reported values never decrease.
pub fn sharpness_profile(obj: &dyn Objective, theta: &ParamVector, alphas: &[f64], budget: usize, seed: u64) -> Result<Vec<SharpnessReport>> {
    if alphas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::config("sharpness radii must be ascending"));
    }
    let mut out: Vec<SharpnessReport> = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let warm = out.last().map(|r| r.argmax.clone());
        out.push(sharpness_from(obj, theta, alpha, budget, seed, warm.as_ref())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub train_pre: f64,
    pub train_post: f64,
    pub test_pre: f64,
    pub test_post: f64,
    /// `test_post − train_post`
    pub gap: f64,
}

fn adapted_metrics(model: &ModelSpec, theta: &ParamVector, inner: &InnerConfig, tasks: &[Task]) -> Result<(f64, f64)> {
    let parts = par::map_slice(tasks, |m, task: &Task| {
        let eval = || -> Result<(f64, f64)> {
            let pre = diffcore::metric(model, theta, &task.query)?;
            let traj = meta::inner_adapt(model, theta, task, inner, &Perturbation::none())?;
            Ok((pre, diffcore::metric(model, traj.adapted(), &task.query)?))
        };
        eval().map_err(|e| e.in_task(m))
    });
    let (mut pre, mut post) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        pre += a;
        post += b;
    }
    let n = tasks.len() as f64;
    Ok((pre / n, post / n))
}

/// Mean query metric before and after adaptation on two task sets.
pub fn gap_between(model: &ModelSpec, theta: &ParamVector, inner: &InnerConfig, train: &[Task], test: &[Task]) -> Result<GapReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("generalization gap needs at least one task on each side"));
    }
    let (train_pre, train_post) = adapted_metrics(model, theta, inner, train)?;
    let (test_pre, test_post) = adapted_metrics(model, theta, inner, test)?;
    Ok(GapReport { train_pre, train_post, test_pre, test_post, gap: test_post - train_post })
}

/// Gap between the first `n_train` tasks of the training stream and
/// `n_test` held-out tasks.
pub fn generalization_gap(
    model: &ModelSpec,
    theta: &ParamVector,
    family: &TaskFamily,
    inner: &InnerConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<GapReport> {
    let train: Vec<Task> = (0..n_train as u64).map(|i| family.sample_task(seed, i)).collect::<Result<_>>()?;
    let test: Vec<Task> = (0..n_test as u64).map(|i| family.held_out_task(seed, i)).collect::<Result<_>>()?;
    gap_between(model, theta, inner, &train, &test)
}
