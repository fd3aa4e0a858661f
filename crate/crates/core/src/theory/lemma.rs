use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Dataset, ModelSpec};
use crate::error::{Error, Result};
use crate::meta::{self, InnerConfig, Perturbation};
use crate::par;
use crate::params::ParamVector;
use crate::rng::{self, StreamTag};
use crate::tasks::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaConfig {
    pub n_probes: usize,
    /// Gradient norm at which a probe counts as stationary.
    pub tol_grad: f64,
    /// Most negative curvature still accepted as non-negative.
    pub tol_min: f64,
    /// Newton iterations allowed per probe.
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        LemmaConfig { n_probes: 5, tol_grad: 1e-9, tol_min: 1e-6, max_iters: 200, seed: 0 }
    }
}

impl LemmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_probes == 0 {
            return Err(Error::config("lemma check needs at least one probe"));
        }
        if !(self.tol_grad > 0.0) || !(self.tol_min >= 0.0) {
            return Err(Error::config("lemma tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStatus {
    Verified,
    Violated,
    /// The probe never reached a stationary point.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: usize,
    pub status: ProbeStatus,
    pub iterations: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub meta_grad_norm: f64,
    /// Largest meta-gradient norm compatible with stationarity at `tol_grad`.
    pub meta_grad_bound: f64,
    /// Estimated spectral norm of the support Hessian.
    pub hessian_norm: f64,
    /// Smallest sampled curvature of the adapted loss.
    pub min_curvature_maml: f64,
    /// Smallest sampled curvature of the plain loss.
    pub min_curvature_erm: f64,
    /// The stationary point is a local minimizer of the plain loss, so the
    /// adapted loss must have non-negative curvature there too.
    pub minimizer_checked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub layout: String,
    pub status: ProbeStatus,
    pub probes: Vec<ProbeReport>,
}

fn overall(probes: &[ProbeReport]) -> ProbeStatus {
    if probes.iter().any(|p| p.status == ProbeStatus::Violated) {
        ProbeStatus::Violated
    } else if probes.iter().all(|p| p.status == ProbeStatus::Verified) {
        ProbeStatus::Verified
    } else {
        ProbeStatus::Inconclusive
    }
}

/// Checks that stationary points and local minimizers of a task's loss are
/// stationary points and local minimizers of its adapted (MAML) loss.
/// The task is evaluated with its support set doubling as the query set.
pub fn lemma1_check(model: &ModelSpec, task: &Task, inner: &InnerConfig, cfg: &LemmaConfig) -> Result<LemmaReport> {
    cfg.validate()?;
    inner.validate()?;
    let task = task.with_query_as_support();
    let inner = InnerConfig { first_order: false, anil: false, subsample: None, ..inner.clone() };
    let probes = match &task.support {
        Dataset::Quadratic(q) => vec![quadratic_probe(model, &task, q, &inner, cfg)?],
        Dataset::Supervised { .. } => par::map_indexed(cfg.n_probes, |p| mlp_probe(model, &task, &inner, cfg, p))
            .into_iter()
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(LemmaReport { layout: model.layout(), status: overall(&probes), probes })
}

fn quadratic_probe(model: &ModelSpec, task: &Task, q: &diffcore::Quadratic, inner: &InnerConfig, cfg: &LemmaConfig) -> Result<ProbeReport> {
    let theta = ParamVector::from_vec(q.center.clone());
    let g = diffcore::grad(model, &theta, &task.support)?;
    let mg = meta::meta_gradient(model, &theta, task, inner, &Perturbation::none())?;
    let eig = q.eigenvalues();
    // K steps from the minimizer: Hessian (I−βA)^K A (I−βA)^K.
    let maml_curv = eig
        .iter()
        .map(|&l| (1.0 - inner.beta_low * l).powi(2 * inner.steps as i32) * l)
        .fold(f64::INFINITY, f64::min);
    let erm_curv = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let h = eig.iter().cloned().fold(0.0, f64::max);
    let bound = cfg.tol_grad * (1.0 + inner.beta_low * h).powi(2 * inner.steps as i32);
    let stationary_ok = mg.grad.norm() <= bound;
    let status = if stationary_ok && maml_curv >= -cfg.tol_min { ProbeStatus::Verified } else { ProbeStatus::Violated };
    Ok(ProbeReport {
        probe: 0,
        status,
        iterations: 0,
        loss: diffcore::loss(model, &theta, &task.support)?,
        grad_norm: g.norm(),
        meta_grad_norm: mg.grad.norm(),
        meta_grad_bound: bound,
        hessian_norm: h,
        min_curvature_maml: maml_curv,
        min_curvature_erm: erm_curv,
        minimizer_checked: erm_curv > 0.0,
    })
}

fn dense_hessian(model: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<DMatrix<f64>> {
    let k = theta.dim();
    let mut h = DMatrix::zeros(k, k);
    let mut e = ParamVector::zeros(k);
    for j in 0..k {
        e[j] = 1.0;
        let col = diffcore::hvp(model, theta, data, &e)?;
        e[j] = 0.0;
        for i in 0..k {
            h[(i, j)] = col[i];
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Levenberg-damped Newton descent on the support loss.
fn minimize(model: &ModelSpec, mut theta: ParamVector, data: &Dataset, cfg: &LemmaConfig) -> Result<(ParamVector, usize)> {
    let k = theta.dim();
    let mut lambda = 1e-3;
    let (mut loss, mut g) = diffcore::value_and_grad(model, &theta, data)?;
    for it in 0..cfg.max_iters {
        if g.norm() < cfg.tol_grad {
            return Ok((theta, it));
        }
        let h = dense_hessian(model, &theta, data)?;
        let rhs = DVector::from_column_slice(g.as_slice());
        let mut accepted = false;
        for _ in 0..60 {
            let damped = &h + DMatrix::identity(k, k) * lambda;
            if let Some(ch) = damped.cholesky() {
                let step = ch.solve(&rhs);
                let trial = theta.plus_scaled(-1.0, &ParamVector::from_vec(step.as_slice().to_vec()));
                if let Ok((l, tg)) = diffcore::value_and_grad(model, &trial, data) {
                    if l < loss || (l <= loss && tg.norm() < g.norm()) {
                        theta = trial;
                        loss = l;
                        g = tg;
                        lambda = (lambda / 3.0).max(1e-15);
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            return Ok((theta, it));
        }
    }
    Ok((theta, cfg.max_iters))
}

fn spectral_norm(model: &ModelSpec, theta: &ParamVector, data: &Dataset, rng: &mut impl Rng) -> Result<f64> {
    let mut v = ParamVector::from_vec((0..theta.dim()).map(|_| rng.sample(StandardNormal)).collect());
    let mut est = 0.0;
    for _ in 0..50 {
        let n = v.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        v = v.scaled(1.0 / n);
        let hv = diffcore::hvp(model, theta, data, &v)?;
        est = hv.norm();
        v = hv;
    }
    Ok(est)
}

fn second_difference(f: &dyn Fn(&ParamVector) -> Result<f64>, theta: &ParamVector, v: &ParamVector, h: f64) -> Result<f64> {
    let up = f(&theta.plus_scaled(h, v))?;
    let mid = f(theta)?;
    let down = f(&theta.plus_scaled(-h, v))?;
    Ok((up - 2.0 * mid + down) / (h * h))
}

const CURVATURE_STEP: f64 = 1e-4;

fn mlp_probe(model: &ModelSpec, task: &Task, inner: &InnerConfig, cfg: &LemmaConfig, p: usize) -> Result<ProbeReport> {
    let mut rng = rng::stream(cfg.seed, StreamTag::Probes, p as u64);
    let start = model.init_params(rng.random(), 1.0);
    let data = &task.support;
    let (theta, iterations) = minimize(model, start, data, cfg)?;
    let (loss, g) = diffcore::value_and_grad(model, &theta, data)?;
    let mg = meta::meta_gradient(model, &theta, task, inner, &Perturbation::none())?;
    let h = spectral_norm(model, &theta, data, &mut rng)?;
    let bound = cfg.tol_grad * (1.0 + inner.beta_low * h).powi(2 * inner.steps as i32);

    let maml = |x: &ParamVector| -> Result<f64> {
        let traj = meta::inner_adapt(model, x, task, inner, &Perturbation::none())?;
        diffcore::loss(model, traj.adapted(), data)
    };
    let erm = |x: &ParamVector| diffcore::loss(model, x, data);
    let (mut min_maml, mut min_erm) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..cfg.n_probes {
        let v = ParamVector::from_vec((0..theta.dim()).map(|_| rng.sample(StandardNormal)).collect());
        let v = v.scaled(1.0 / v.norm());
        min_maml = min_maml.min(second_difference(&maml, &theta, &v, CURVATURE_STEP)?);
        min_erm = min_erm.min(second_difference(&erm, &theta, &v, CURVATURE_STEP)?);
    }
    let minimizer_checked = min_erm >= -cfg.tol_min;
    let status = if g.norm() > cfg.tol_grad {
        ProbeStatus::Inconclusive
    } else if mg.grad.norm() > bound || (minimizer_checked && min_maml < -cfg.tol_min) {
        ProbeStatus::Violated
    } else {
        ProbeStatus::Verified
    };
    Ok(ProbeReport {
        probe: p,
        status,
        iterations,
        loss,
        grad_norm: g.norm(),
        meta_grad_norm: mg.grad.norm(),
        meta_grad_bound: bound,
        hessian_norm: h,
        min_curvature_maml: min_maml,
        min_curvature_erm: min_erm,
        minimizer_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Quadratic};
    use crate::tasks::{FamilyKind, TaskFamily};

    fn quad_task(a: f64, c: f64) -> Task {
        let q = Dataset::Quadratic(Quadratic::diagonal(&[a], &[c]).unwrap());
        Task { support: q.clone(), query: q, alt_query: None, task_id: 0, source_id: 0, master_seed: 0 }
    }

    #[test]
    fn quadratic_minimizer_transfers_exactly() {
        let m = ModelSpec::quadratic(1).unwrap();
        let r = lemma1_check(&m, &quad_task(2.0, 0.3), &InnerConfig::new(0.1, 1).unwrap(), &LemmaConfig::default()).unwrap();
        assert_eq!(r.status, ProbeStatus::Verified);
        assert_eq!(r.probes[0].meta_grad_norm, 0.0);
        assert!((r.probes[0].min_curvature_maml - 2.0 * 0.64).abs() < 1e-15);
    }

    #[test]
    fn large_inner_step_keeps_minimizer() {
        let m = ModelSpec::quadratic(1).unwrap();
        let r = lemma1_check(&m, &quad_task(2.0, 0.3), &InnerConfig::new(1.5, 1).unwrap(), &LemmaConfig::default()).unwrap();
        assert_eq!(r.status, ProbeStatus::Verified);
        assert!((r.probes[0].min_curvature_maml - 2.0 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn mlp_fit_verifies() {
        let model = ModelSpec::mlp(vec![1, 8, 1], Activation::Tanh).unwrap();
        let fam = TaskFamily::new(FamilyKind::Sinusoid { shots: 5, query: 5 }).unwrap();
        let task = fam.sample_task(1, 0).unwrap();
        let cfg = LemmaConfig { n_probes: 2, ..LemmaConfig::default() };
        let r = lemma1_check(&model, &task, &InnerConfig::new(0.01, 1).unwrap(), &cfg).unwrap();
        for p in &r.probes {
            assert_eq!(p.status, ProbeStatus::Verified, "{p:?}");
            assert!(p.grad_norm < 1e-9 && p.meta_grad_norm < 1e-7);
        }
    }

    #[test]
    fn capped_budget_is_inconclusive() {
        let model = ModelSpec::mlp(vec![1, 8, 1], Activation::Tanh).unwrap();
        let fam = TaskFamily::new(FamilyKind::Sinusoid { shots: 5, query: 5 }).unwrap();
        let task = fam.sample_task(1, 0).unwrap();
        let cfg = LemmaConfig { n_probes: 1, max_iters: 1, ..LemmaConfig::default() };
        let r = lemma1_check(&model, &task, &InnerConfig::new(0.01, 1).unwrap(), &cfg).unwrap();
        assert_eq!(r.status, ProbeStatus::Inconclusive);
    }
}
