//! Sharpness-aware perturbations layered on the MAML step.
//!
//! Each meta-iteration computes a per-task inner perturbation `ε_m` (normalized
//! support gradient), then an outer perturbation `ε` (normalized gradient of
//! the summed query losses after the `ε_m`-biased inner step), and finally
//! updates `θ` with meta-gradients taken at the biased trajectories with both
//! offsets held constant. ESAM's weight masking and data selection and the
//! ANIL head restriction are switches on the same path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, ModelSpec};
use crate::error::{Error, Result};
use crate::meta::{self, Cost, InnerConfig, MetaConfig, PerturbStats, Perturbation, TrainState};
use crate::par;
use crate::params::ParamVector;
use crate::rng::{self, StreamTag};
use crate::tasks::Task;

/// Gradients with a smaller norm are treated as exactly stationary.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Maml,
    Fomaml,
    SharpLow,
    SharpUp,
    SharpBoth,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Maml, Variant::Fomaml, Variant::SharpLow, Variant::SharpUp, Variant::SharpBoth];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Maml => "maml",
            Variant::Fomaml => "fomaml",
            Variant::SharpLow => "sharp_low",
            Variant::SharpUp => "sharp_up",
            Variant::SharpBoth => "sharp_both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpConfig {
    pub variant: Variant,
    pub alpha_low: f64,
    pub alpha_up: f64,
    pub esam_enabled: bool,
    /// Bernoulli keep-rate of the weight mask applied to `ε_m`.
    pub xi: f64,
    /// Fraction of support points kept by data selection.
    pub mu: f64,
    pub anil_enabled: bool,
}

impl SharpConfig {
    pub fn new(variant: Variant, alpha_low: f64, alpha_up: f64) -> Result<Self> {
        let cfg = SharpConfig { variant, alpha_low, alpha_up, esam_enabled: false, xi: 1.0, mu: 1.0, anil_enabled: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn maml() -> Self {
        SharpConfig::new(Variant::Maml, 0.0, 0.0).expect("valid")
    }

    pub fn esam(mut self, xi: f64, mu: f64) -> Result<Self> {
        self.esam_enabled = true;
        self.xi = xi;
        self.mu = mu;
        self.validate()?;
        Ok(self)
    }

    pub fn anil(mut self, on: bool) -> Self {
        self.anil_enabled = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_low", self.alpha_low), ("alpha_up", self.alpha_up)] {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::config(format!("{name} must be a finite non-negative number")));
            }
        }
        let (low_ok, up_ok) = match self.variant {
            Variant::Maml | Variant::Fomaml => (self.alpha_low == 0.0, self.alpha_up == 0.0),
            Variant::SharpLow => (true, self.alpha_up == 0.0),
            Variant::SharpUp => (self.alpha_low == 0.0, true),
            Variant::SharpBoth => (true, true),
        };
        if !low_ok {
            return Err(Error::config(format!("variant {} requires alpha_low = 0", self.variant.name())));
        }
        if !up_ok {
            return Err(Error::config(format!("variant {} requires alpha_up = 0", self.variant.name())));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::config("esam xi must lie in [0, 1]"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::config("esam mu must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Inner-loop settings this configuration trains with.
    pub fn effective_inner(&self, inner: &InnerConfig) -> InnerConfig {
        InnerConfig {
            first_order: inner.first_order || self.variant == Variant::Fomaml,
            anil: inner.anil || self.anil_enabled,
            ..inner.clone()
        }
    }
}

/// A perturbation and whether it collapsed to zero on a vanishing gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturb {
    pub vector: ParamVector,
    pub degenerate: bool,
}

/// `α·g/‖g‖`, or zero when `α = 0` or `g` vanishes.
pub fn normalized(g: &ParamVector, alpha: f64) -> Perturb {
    if alpha == 0.0 {
        return Perturb { vector: ParamVector::zeros(g.dim()), degenerate: false };
    }
    let norm = g.norm();
    if norm < DEGENERATE_NORM {
        return Perturb { vector: ParamVector::zeros(g.dim()), degenerate: true };
    }
    Perturb { vector: g.scaled(alpha / norm), degenerate: false }
}

/// Inner ascent direction `ε_m = α_low·g/‖g‖` with `g` the support gradient
/// (projected onto the head under ANIL).
pub fn lower_perturbation(model: &ModelSpec, theta: &ParamVector, task: &Task, alpha_low: f64, anil: bool) -> Result<Perturb> {
    if alpha_low == 0.0 {
        return Ok(normalized(theta, 0.0));
    }
    let mut g = diffcore::grad(model, theta, &task.support)?;
    if anil {
        g = anil_project(&g, model)?;
    }
    Ok(normalized(&g, alpha_low))
}

/// Outer ascent direction `ε = α_up·∇h/‖∇h‖`, where `∇h` sums the
/// second-order meta-gradients of the `lower`-biased inner steps.
pub fn upper_perturbation(
    model: &ModelSpec,
    theta: &ParamVector,
    tasks: &[Task],
    inner: &InnerConfig,
    lower: &[Perturbation],
    alpha_up: f64,
) -> Result<(Perturb, Cost)> {
    if alpha_up == 0.0 {
        return Ok((normalized(theta, 0.0), Cost::default()));
    }
    if lower.len() != tasks.len() {
        return Err(Error::config("one lower perturbation per task is required"));
    }
    let exact = InnerConfig { first_order: false, ..inner.clone() };
    let parts = par::map_slice(tasks, |m, task| {
        meta::meta_gradient(model, theta, task, &exact, &lower[m]).map_err(|e| e.in_task(m))
    });
    let mut grad_h = ParamVector::zeros(model.dim());
    let mut cost = Cost::default();
    for part in parts {
        let part = part?;
        grad_h.axpy(1.0, &part.grad);
        cost += part.cost;
    }
    Ok((normalized(&grad_h, alpha_up), cost))
}

/// I.i.d. Bernoulli(`xi`) 0/1 mask.
pub fn swp_mask(dim: usize, xi: f64, rng: &mut impl Rng) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::config("xi must lie in [0, 1]"));
    }
    Ok(ParamVector::from_vec((0..dim).map(|_| if rng.random_bool(xi) { 1.0 } else { 0.0 }).collect()))
}

/// Indices of the `⌈μ·n⌉` samples whose loss rises most under the
/// perturbation, ties to the lower index, in ascending order.
pub fn sds_select(perturbed: &[f64], base: &[f64], mu: f64) -> Result<Vec<usize>> {
    if perturbed.is_empty() || perturbed.len() != base.len() {
        return Err(Error::config("sds_select needs two non-empty loss vectors of equal length"));
    }
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::config("mu must lie in (0, 1]"));
    }
    let increase: Vec<f64> = perturbed.iter().zip(base).map(|(a, b)| a - b).collect();
    Ok(meta::top_fraction(&increase, mu))
}

/// Zeroes the body coordinates (indices below the model's head split).
pub fn anil_project(g: &ParamVector, model: &ModelSpec) -> Result<ParamVector> {
    if g.dim() != model.dim() {
        return Err(Error::config("gradient dimension does not match the model"));
    }
    let split = model.head_split();
    if split > g.dim() {
        return Err(Error::config("head_split exceeds the parameter dimension"));
    }
    let mut out = g.clone();
    meta::project_head(&mut out, split);
    Ok(out)
}

/// One Sharp-MAML meta-iteration. `diagnostic`, when given, is the task set
/// over which the unperturbed MAML gradient norm is recorded in the trace.
pub fn sharp_meta_step_with(
    model: &ModelSpec,
    state: TrainState,
    tasks: &[Task],
    inner: &InnerConfig,
    meta: &MetaConfig,
    sharp: &SharpConfig,
    diagnostic: Option<&[Task]>,
) -> Result<TrainState> {
    sharp.validate()?;
    if tasks.is_empty() {
        return Err(Error::config("meta step needs at least one task"));
    }
    let inner = sharp.effective_inner(inner);
    let theta = &state.theta;
    let mut stats = PerturbStats::default();

    let lower = par::map_slice(tasks, |m, task| {
        lower_perturbation(model, theta, task, sharp.alpha_low, inner.anil).map_err(|e| e.in_task(m))
    });
    let mut eps_ms = Vec::with_capacity(tasks.len());
    for p in lower {
        let p = p?;
        stats.degenerate += p.degenerate as u32;
        eps_ms.push(p.vector);
    }
    if sharp.alpha_low > 0.0 {
        stats.cost.grads += tasks.len() as u64;
    }
    if sharp.esam_enabled && sharp.alpha_low > 0.0 {
        let seed = tasks[0].master_seed;
        let mask = swp_mask(model.dim(), sharp.xi, &mut rng::stream(seed, StreamTag::WeightMask, state.iter))?;
        for eps_m in &mut eps_ms {
            *eps_m = eps_m.hadamard(&mask);
        }
    }
    let sds = (sharp.esam_enabled).then_some(sharp.mu);
    let lower_perts: Vec<Perturbation> = eps_ms
        .iter()
        .map(|eps_m| {
            let mut p = Perturbation::bgd(&ParamVector::zeros(model.dim()), eps_m);
            if p.grad.is_some() {
                p.sds_ratio = sds;
            }
            p
        })
        .collect();

    let (eps, up_cost) = upper_perturbation(model, theta, tasks, &inner, &lower_perts, sharp.alpha_up)?;
    stats.degenerate += eps.degenerate as u32;
    stats.cost += up_cost;
    stats.eps_norm = eps.vector.norm();
    stats.mean_eps_m_norm = eps_ms.iter().map(ParamVector::norm).sum::<f64>() / tasks.len() as f64;

    let perts: Vec<Perturbation> = lower_perts
        .into_iter()
        .map(|p| Perturbation { start: (!eps.vector.is_zero()).then(|| eps.vector.clone()), ..p })
        .collect();
    meta::meta_update(model, state, tasks, &inner, meta, &perts, stats, diagnostic)
}

pub fn sharp_meta_step(
    model: &ModelSpec,
    state: TrainState,
    tasks: &[Task],
    inner: &InnerConfig,
    meta: &MetaConfig,
    sharp: &SharpConfig,
) -> Result<TrainState> {
    sharp_meta_step_with(model, state, tasks, inner, meta, sharp, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Dataset, Quadratic};
    use crate::params::rel_err;
    use crate::tasks::{FamilyKind, TaskFamily};
    use rand::SeedableRng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn quad_task(diag: &[f64], c: &[f64]) -> (ModelSpec, Task) {
        let q = Dataset::Quadratic(Quadratic::diagonal(diag, c).unwrap());
        let task = Task { support: q.clone(), query: q, alt_query: None, task_id: 0, source_id: 0, master_seed: 0 };
        (ModelSpec::quadratic(diag.len()).unwrap(), task)
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalized(&pv(&[3.0, 4.0]), 0.05).vector, pv(&[0.03, 0.04]));
        let z = normalized(&pv(&[3.0, 4.0]), 0.0);
        assert!(z.vector.is_zero() && !z.degenerate);
        let d = normalized(&pv(&[0.0, 0.0]), 0.1);
        assert!(d.vector.is_zero() && d.degenerate);
        assert_eq!(normalized(&pv(&[0.0, 2.0]), 0.1).vector, pv(&[0.0, 0.1]));
        let a = normalized(&pv(&[0.3, -1.7, 2.2]), 0.2).vector;
        let b = normalized(&pv(&[-0.3, 1.7, -2.2]), 0.2).vector;
        assert_eq!(a, b.scaled(-1.0));
    }

    #[test]
    fn lower_perturbation_is_scale_invariant() {
        let (m, task) = quad_task(&[2.0, 5.0], &[0.1, -0.4]);
        let (_, task_scaled) = quad_task(&[6.0, 15.0], &[0.1, -0.4]);
        let theta = pv(&[0.7, 0.2]);
        let a = lower_perturbation(&m, &theta, &task, 0.05, false).unwrap().vector;
        let b = lower_perturbation(&m, &theta, &task_scaled, 0.05, false).unwrap().vector;
        assert!(rel_err(a.as_slice(), b.as_slice()) < 1e-15);
        assert!((a.norm() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn config_invariants() {
        assert!(SharpConfig::new(Variant::SharpLow, 0.1, 0.1).is_err());
        assert!(SharpConfig::new(Variant::SharpUp, 0.1, 0.0).is_err());
        assert!(SharpConfig::new(Variant::Maml, 0.0, 0.1).is_err());
        assert!(SharpConfig::new(Variant::SharpBoth, 0.1, 0.1).unwrap().esam(1.5, 1.0).is_err());
        assert!(SharpConfig::new(Variant::SharpBoth, 0.1, 0.1).unwrap().esam(0.5, 0.0).is_err());
        assert_eq!(Variant::parse("sharp_both").unwrap(), Variant::SharpBoth);
        assert!(Variant::parse("sam").is_err());
    }

    #[test]
    fn sharp_low_quadratic_oracle() {
        let (m, task) = quad_task(&[2.0], &[0.0]);
        let inner = InnerConfig::new(0.1, 1).unwrap();
        let meta = MetaConfig::new(0.5, 1, 1).unwrap();
        let sharp = SharpConfig::new(Variant::SharpLow, 0.1, 0.0).unwrap();
        let s = sharp_meta_step(&m, TrainState::new(pv(&[1.0])), &[task], &inner, &meta, &sharp).unwrap();
        // ε_m = 0.1, θ̃ = 1 − 0.1·2·1.1 = 0.78, meta-gradient 0.8·2·0.78 = 1.248
        assert!((s.theta[0] - (1.0 - 0.5 * 1.248)).abs() < 1e-14);
        let r = s.last_report().unwrap();
        assert!((r.mean_eps_m_norm - 0.1).abs() < 1e-15);
        assert_eq!(r.eps_norm, 0.0);
    }

    #[test]
    fn sharp_up_equals_maml_gradient_at_shifted_point() {
        let (m, task) = quad_task(&[2.0, 0.5], &[0.3, -0.2]);
        let inner = InnerConfig::new(0.1, 1).unwrap();
        let meta = MetaConfig::new(0.2, 1, 1).unwrap();
        let theta = pv(&[1.0, -1.0]);
        let sharp = SharpConfig::new(Variant::SharpUp, 0.0, 0.05).unwrap();
        let s = sharp_meta_step(&m, TrainState::new(theta.clone()), std::slice::from_ref(&task), &inner, &meta, &sharp).unwrap();
        let g = meta::meta_gradient(&m, &theta, &task, &inner, &Perturbation::none()).unwrap().grad;
        let eps = g.scaled(0.05 / g.norm());
        let shifted = meta::meta_gradient(&m, &theta.add(&eps), &task, &inner, &Perturbation::none()).unwrap().grad;
        let expected = theta.plus_scaled(-0.2, &shifted);
        assert!(rel_err(s.theta.as_slice(), expected.as_slice()) < 1e-14);
        assert!((s.last_report().unwrap().eps_norm - 0.05).abs() < 1e-15);
    }

    fn run(variant_cfg: &SharpConfig, inner: &InnerConfig, steps: u64) -> Vec<(ParamVector, f64)> {
        let model = ModelSpec::mlp(vec![1, 8, 1], Activation::Tanh).unwrap().with_head_split(0).unwrap();
        let fam = TaskFamily::new(FamilyKind::Sinusoid { shots: 5, query: 5 }).unwrap();
        let meta = MetaConfig::new(0.01, 3, steps as usize).unwrap();
        let mut state = TrainState::new(model.init_params(3, 1.0));
        let mut out = Vec::new();
        for t in 0..steps {
            let tasks = fam.sample_task_batch(3, t, 3).unwrap();
            state = sharp_meta_step(&model, state, &tasks, inner, &meta, variant_cfg).unwrap();
            out.push((state.theta.clone(), state.last_report().unwrap().grad_norm_sq));
        }
        out
    }

    #[test]
    fn reductions_are_bit_exact() {
        let inner = InnerConfig::new(0.05, 2).unwrap();
        let maml = run(&SharpConfig::maml(), &inner, 5);
        assert_eq!(run(&SharpConfig::new(Variant::SharpBoth, 0.0, 0.0).unwrap(), &inner, 5), maml);
        let low = run(&SharpConfig::new(Variant::SharpLow, 0.05, 0.0).unwrap(), &inner, 5);
        assert_ne!(low, maml);
        assert_eq!(run(&SharpConfig::new(Variant::SharpBoth, 0.05, 0.0).unwrap(), &inner, 5), low);
        assert_eq!(run(&SharpConfig::new(Variant::SharpLow, 0.05, 0.0).unwrap().esam(1.0, 1.0).unwrap(), &inner, 5), low);
        assert_eq!(run(&SharpConfig::new(Variant::SharpLow, 0.05, 0.0).unwrap().anil(true), &inner, 5), low);
        let up = run(&SharpConfig::new(Variant::SharpUp, 0.0, 0.05).unwrap(), &inner, 5);
        assert_eq!(run(&SharpConfig::new(Variant::SharpBoth, 0.0, 0.05).unwrap(), &inner, 5), up);
        // ξ = 0 masks every coordinate of ε_m away.
        assert_eq!(run(&SharpConfig::new(Variant::SharpLow, 0.05, 0.0).unwrap().esam(0.0, 1.0).unwrap(), &inner, 5), maml);
    }

    #[test]
    fn masks_and_selection() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert!(swp_mask(50, 1.0, &mut rng).unwrap().iter().all(|&x| x == 1.0));
        assert!(swp_mask(50, 0.0, &mut rng).unwrap().is_zero());
        let mean = swp_mask(10_000, 0.5, &mut rng).unwrap().iter().sum::<f64>() / 1e4;
        assert!((0.47..=0.53).contains(&mean));
        assert_eq!(sds_select(&[0.5, -0.1, 0.3], &[0.0; 3], 2.0 / 3.0).unwrap(), vec![0, 2]);
        assert_eq!(sds_select(&[1.0; 4], &[0.0; 4], 0.5).unwrap(), vec![0, 1]);
        assert!(sds_select(&[], &[], 0.5).is_err());
    }

    #[test]
    fn anil_projection_examples() {
        let m = ModelSpec::quadratic(3).unwrap();
        let g = pv(&[1.0, 2.0, 3.0]);
        assert_eq!(anil_project(&g, &m).unwrap(), g);
        assert_eq!(anil_project(&g, &m.clone().with_head_split(1).unwrap()).unwrap(), pv(&[0.0, 2.0, 3.0]));
        assert!(anil_project(&g, &m.with_head_split(3).unwrap()).unwrap().is_zero());
    }

    #[test]
    fn anil_full_split_gives_query_gradient() {
        let (m, mut task) = quad_task(&[2.0, 3.0], &[0.0, 0.0]);
        task.query = Dataset::Quadratic(Quadratic::diagonal(&[1.0, 4.0], &[0.5, 0.5]).unwrap());
        let m = m.with_head_split(2).unwrap();
        let inner = InnerConfig::new(0.1, 3).unwrap().anil(true);
        let theta = pv(&[0.2, -0.3]);
        let g = meta::meta_gradient(&m, &theta, &task, &inner, &Perturbation::none()).unwrap().grad;
        assert_eq!(g, diffcore::grad(&m, &theta, &task.query).unwrap());
    }

    #[test]
    fn frozen_offset_meta_gradient_matches_fd() {
        let model = ModelSpec::mlp(vec![1, 10, 1], Activation::Tanh).unwrap();
        let fam = TaskFamily::new(FamilyKind::Sinusoid { shots: 5, query: 6 }).unwrap();
        let task = fam.sample_task(11, 0).unwrap();
        let theta = model.init_params(11, 1.0);
        let inner = InnerConfig::new(0.05, 1).unwrap();
        let eps_m = lower_perturbation(&model, &theta, &task, 0.05, false).unwrap().vector;
        let low = Perturbation::bgd(&ParamVector::zeros(model.dim()), &eps_m);
        let (eps, _) = upper_perturbation(&model, &theta, std::slice::from_ref(&task), &inner, &[low], 0.05).unwrap();
        let pert = Perturbation::bgd(&eps.vector, &eps_m);
        let g = meta::meta_gradient(&model, &theta, &task, &inner, &pert).unwrap().grad;
        let f = |p: &ParamVector| {
            let traj = meta::inner_adapt(&model, p, &task, &inner, &pert).unwrap();
            diffcore::loss(&model, traj.adapted(), &task.query).unwrap()
        };
        let h = 1e-4;
        let mut fd = ParamVector::zeros(theta.dim());
        for i in 0..theta.dim() {
            let mut up = theta.clone();
            up[i] += h;
            let mut down = theta.clone();
            down[i] -= h;
            fd[i] = (f(&up) - f(&down)) / (2.0 * h);
        }
        assert!(rel_err(g.as_slice(), fd.as_slice()) < 1e-4);
    }
}
