//! Experiment runner: executes a [`RunConfig`] and writes its artifacts.
//!
//! Artifacts (all under `out_dir`):
//! `trace.csv`, `eval.csv`, `checkpoint.bin`, `summary.json` and `config.txt`
//! for training; `eval_checkpoint.csv` for evaluation; `landscape_*.csv`,
//! `sharpness.csv`, `bound.csv` + `bound_report.json`, `lemma_report.json`
//! for the instruments. Numeric output depends only on the config and seed.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{GridChoice, RunConfig};
use crate::diffcore::ModelSpec;
use crate::error::{Error, Result};
use crate::landscape::{self, DataLoss, GapReport, GridObjective, LandscapeGrid, MamlLoss, SharpnessReport};
use crate::meta::{Cost, TrainState};
use crate::params::ParamVector;
use crate::sharp;
use crate::tasks::{Task, TaskFamily};
use crate::theory::{self, LemmaReport, SweepInputs, SweepReport};

pub const TRACE_HEADER: &str = "iter,meta_loss,grad_norm_sq,running_avg_grad_norm_sq,wall_ms,eps_norm,mean_eps_m_norm,degenerate_flags";
pub const EVAL_HEADER: &str = "seed,variant,iter,pre_adapt_metric,post_adapt_metric,gen_gap";
pub const LANDSCAPE_HEADER: &str = "i,j,x,y,loss,diverged";
pub const SHARPNESS_HEADER: &str = "alpha,sharpness,argmax_norm,restarts";
pub const BOUND_HEADER: &str = "alpha,empirical_term,sqrt_term,gamma_A,bound";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_meta_loss: f64,
    pub final_running_avg: f64,
    pub last_eval: Option<GapReport>,
    pub cost: Cost,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Copies `header` and the rows of an existing CSV whose first numeric column
/// satisfies `keep`, then leaves the file open for appending.
fn reopen_csv(path: &Path, header: &str, column: usize, keep: impl Fn(u64) -> bool) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let v = line.split(',').nth(column).and_then(|s| s.parse::<u64>().ok());
            if v.is_some_and(&keep) {
                kept.push(line);
            }
        }
    }
    let mut w = create(path)?;
    writeln!(w, "{header}")?;
    for line in kept {
        writeln!(w, "{line}")?;
    }
    Ok(w)
}

fn training_tasks(family: &TaskFamily, cfg: &RunConfig, iteration: u64) -> Result<Vec<Task>> {
    let mut tasks = family.sample_task_batch(cfg.seed, iteration, cfg.train.meta_batch)?;
    if cfg.train.resample_query {
        for t in &mut tasks {
            t.alt_query = Some(family.resampled_query(t)?);
        }
    }
    Ok(tasks)
}

fn evaluate(cfg: &RunConfig, model: &ModelSpec, theta: &ParamVector) -> Result<GapReport> {
    let inner = cfg.sharp()?.effective_inner(&cfg.inner()?);
    landscape::generalization_gap(model, theta, &cfg.family()?, &inner, cfg.eval.n_test_tasks, cfg.eval.n_test_tasks, cfg.seed)
}

fn eval_row(cfg: &RunConfig, iter: u64, r: &GapReport) -> String {
    format!("{},{},{},{},{},{}", cfg.seed, cfg.train.variant.name(), iter, r.test_pre, r.test_post, r.gap)
}

/// Trains for `train.iterations` meta-iterations. With `resume`, continues
/// from the checkpoint in `out_dir`, keeping earlier trace rows.
pub fn run_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    ensure_dir(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let family = cfg.family()?;
    let model = cfg.model_spec()?;
    let inner = cfg.inner()?;
    let meta = cfg.meta()?;
    let sharp_cfg = cfg.sharp()?;
    let layout = model.layout();

    let mut state = if resume {
        let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
        ck.expect_layout(&layout)?;
        if ck.seed != cfg.seed {
            return Err(Error::config(format!("checkpoint seed {} differs from configured seed {}", ck.seed, cfg.seed)));
        }
        ck.to_state()
    } else {
        TrainState::new(model.init_params(cfg.seed, cfg.model.init_scale))
    };
    let start_iter = state.iter;
    let mut trace = reopen_csv(&out.join("trace.csv"), TRACE_HEADER, 0, |i| resume && i <= start_iter)?;
    let mut evals = reopen_csv(&out.join("eval.csv"), EVAL_HEADER, 2, |i| resume && i <= start_iter)?;
    let diagnostic = if family.pool_size > 0 { Some(family.pool(cfg.seed)?) } else { None };

    let clock = Instant::now();
    let mut cost = Cost::default();
    let mut last_eval = None;
    let total = meta.iterations as u64;
    let mut failure = None;
    while state.iter < total {
        let resume_point = Checkpoint::from_state(layout.clone(), cfg.seed, &state);
        let stepped = training_tasks(&family, cfg, state.iter).and_then(|tasks| {
            sharp::sharp_meta_step_with(&model, state, &tasks, &inner, &meta, &sharp_cfg, diagnostic.as_deref())
        });
        state = match stepped {
            Ok(s) => s,
            Err(e) => {
                state = resume_point.to_state();
                failure = Some(e);
                break;
            }
        };
        let r = state.last_report().expect("step recorded").clone();
        cost += r.cost;
        let wall_ms = if cfg.train.wall_clock { clock.elapsed().as_millis() } else { 0 };
        writeln!(
            trace,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.meta_loss, r.grad_norm_sq, r.running_avg_grad_norm_sq, wall_ms, r.eps_norm, r.mean_eps_m_norm, r.degenerate_flags
        )?;
        let every = cfg.eval.eval_every as u64;
        if state.iter == total || (every > 0 && state.iter % every == 0) {
            let gap = evaluate(cfg, &model, &state.theta)?;
            writeln!(evals, "{}", eval_row(cfg, state.iter, &gap))?;
            last_eval = Some(gap);
        }
    }
    trace.flush()?;
    evals.flush()?;
    Checkpoint::from_state(layout.clone(), cfg.seed, &state).save(&out.join(CHECKPOINT_FILE))?;
    if let Some(err) = failure {
        return Err(err);
    }

    let final_meta_loss = state.last_report().map_or(f64::NAN, |r| r.meta_loss);
    let diag = theory::convergence_diagnostic(&state.trace).ok();
    let mut summary = json!({
        "variant": cfg.train.variant.name(),
        "seed": cfg.seed,
        "layout": layout,
        "iterations": state.iter,
        "final_meta_loss": final_meta_loss,
        "final_running_avg_grad_norm_sq": state.trace.running_avg(),
        "grad_evals": cost.grads,
        "hvp_evals": cost.hvps,
        "convergence": diag,
        "last_eval": last_eval,
    });
    if cfg.train.wall_clock {
        summary["wall_ms"] = json!(clock.elapsed().as_millis() as u64);
    }
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    Ok(TrainSummary {
        iterations: state.iter,
        final_meta_loss,
        final_running_avg: state.trace.running_avg(),
        last_eval,
        cost,
    })
}

/// Loads parameters from `checkpoint`, or `out_dir/checkpoint.bin` when it
/// exists, or falls back to the seeded initialization.
pub fn load_theta(cfg: &RunConfig, model: &ModelSpec, checkpoint: Option<&Path>) -> Result<ParamVector> {
    let default = cfg.out_dir.join(CHECKPOINT_FILE);
    let path = match checkpoint {
        Some(p) => Some(p.to_path_buf()),
        None => default.exists().then_some(default),
    };
    match path {
        Some(p) => {
            let ck = Checkpoint::load(&p)?;
            ck.expect_layout(&model.layout())?;
            Ok(ck.theta)
        }
        None => Ok(model.init_params(cfg.seed, cfg.model.init_scale)),
    }
}

/// Post-adaptation metrics of a checkpoint on training vs held-out tasks.
pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<GapReport> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let model = cfg.model_spec()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path)?;
    ck.expect_layout(&model.layout())?;
    let gap = evaluate(cfg, &model, &ck.theta)?;
    let mut w = create(&cfg.out_dir.join("eval_checkpoint.csv"))?;
    writeln!(w, "{EVAL_HEADER}")?;
    writeln!(w, "{}", eval_row(cfg, ck.iter, &gap))?;
    w.flush()?;
    Ok(gap)
}

pub fn write_grid(grid: &LandscapeGrid, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{LANDSCAPE_HEADER}")?;
    for (i, (row, flags)) in grid.values.iter().zip(&grid.diverged).enumerate() {
        for (j, (v, d)) in row.iter().zip(flags).enumerate() {
            writeln!(w, "{i},{j},{},{},{v},{}", grid.xs[j], grid.ys[i], u8::from(*d))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// 2-D loss sections around the checkpoint; `both` shares one pair of directions.
pub fn run_landscape(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let model = cfg.model_spec()?;
    let theta = load_theta(cfg, &model, checkpoint)?;
    let task = cfg.family()?.sample_task(cfg.seed, cfg.landscape.task_id)?;
    let dirs = landscape::random_directions(&model, &theta, cfg.seed)?;
    let objectives: &[GridObjective] = match cfg.landscape.objective {
        GridChoice::Erm => &[GridObjective::ErmTaskLoss],
        GridChoice::Maml => &[GridObjective::MamlTaskLoss],
        GridChoice::Both => &[GridObjective::ErmTaskLoss, GridObjective::MamlTaskLoss],
    };
    let mut paths = Vec::new();
    let mut diverged = Vec::new();
    for &obj in objectives {
        let grid = landscape::loss_grid(&model, &theta, &task, &dirs, cfg.landscape.extent, cfg.landscape.resolution, obj, cfg.train.beta_low)?;
        let name = match obj {
            GridObjective::ErmTaskLoss => "landscape_erm.csv",
            GridObjective::MamlTaskLoss => "landscape_maml.csv",
        };
        let path = cfg.out_dir.join(name);
        write_grid(&grid, &path)?;
        diverged.push(json!({ "objective": obj.name(), "diverged_cells": grid.diverged.iter().flatten().filter(|d| **d).count() }));
        paths.push(path);
    }
    let meta = json!({
        "layout": model.layout(),
        "extent": cfg.landscape.extent,
        "resolution": cfg.landscape.resolution,
        "task_id": cfg.landscape.task_id,
        "zero_norm_groups": dirs.zero_groups.len(),
        "grids": diverged,
    });
    fs::write(cfg.out_dir.join("landscape.json"), serde_json::to_string_pretty(&meta).expect("json") + "\n")?;
    Ok(paths)
}

/// Sharpness of the support loss of one task over `sharpness.alphas`.
pub fn run_sharpness(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<SharpnessReport>> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let model = cfg.model_spec()?;
    let theta = load_theta(cfg, &model, checkpoint)?;
    let task = cfg.family()?.sample_task(cfg.seed, cfg.sharpness.task_id)?;
    let obj = DataLoss { model: &model, data: &task.support };
    let reports = landscape::sharpness_profile(&obj, &theta, &cfg.sharpness.alphas, cfg.sharpness.budget, cfg.seed)?;
    let mut w = create(&cfg.out_dir.join("sharpness.csv"))?;
    writeln!(w, "{SHARPNESS_HEADER}")?;
    for r in &reports {
        writeln!(w, "{},{},{},{}", r.alpha, r.sharpness, r.argmax_norm(), r.restarts)?;
    }
    w.flush()?;
    Ok(reports)
}

/// Bound sweep over the configured radii. With a checkpoint, `‖θ‖²` and the
/// worst-case empirical term (clamped to `[0, 1]`) are measured on the
/// first `bound.n_tasks` training tasks; otherwise the configured values are used.
pub fn run_bound(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<SweepReport> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let model = cfg.model_spec()?;
    let family = cfg.family()?;
    let b = &cfg.bound;
    let n = if b.n > 0 { b.n } else { family.n_support() };
    let m = match (b.m, family.pool_size) {
        (0, 0) => cfg.train.meta_batch * cfg.train.iterations,
        (0, pool) => pool,
        (m, _) => m,
    };
    let alphas = cfg.bound_alphas();
    let mut inputs = SweepInputs {
        k: if b.k > 0 { b.k } else { model.dim() },
        n,
        m,
        delta: b.delta,
        theta_norm_sq: b.theta_norm_sq,
        gamma_a: b.gamma_a + b.gamma_c / n as f64,
        form: b.form,
    };
    let measured = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.expect_layout(&model.layout())?;
            inputs.theta_norm_sq = ck.theta.norm_sq();
            let tasks: Vec<Task> = (0..b.n_tasks as u64).map(|i| family.sample_task(cfg.seed, i)).collect::<Result<_>>()?;
            let inner = cfg.sharp()?.effective_inner(&cfg.inner()?);
            let obj = MamlLoss { model: &model, tasks: &tasks, inner: &inner };
            let base = landscape::Objective::value(&obj, &ck.theta)?;
            let prof = landscape::sharpness_profile(&obj, &ck.theta, &alphas, cfg.sharpness.budget, cfg.seed)?;
            Some(prof.iter().map(|r| (base + r.sharpness).clamp(0.0, 1.0)).collect::<Vec<f64>>())
        }
        None => None,
    };
    let mut idx = 0;
    let report = theory::bound_alpha_sweep(&inputs, &alphas, |_| {
        let v = measured.as_ref().map_or(b.empirical_term, |m| m[idx]);
        idx += 1;
        Ok(v)
    })?;
    let mut w = create(&cfg.out_dir.join("bound.csv"))?;
    writeln!(w, "{BOUND_HEADER}")?;
    for r in &report.rows {
        writeln!(w, "{},{},{},{},{}", r.alpha, r.empirical_term, r.sqrt_term, r.gamma_a, r.bound)?;
    }
    w.flush()?;
    let meta = json!({
        "inputs": inputs,
        "empirical_term_source": if measured.is_some() { "measured" } else { "configured" },
        "empirical_term_range": [0.0, 1.0],
        "best_alpha": report.best_alpha(),
        "threshold": report.threshold,
        "worst_case_threshold": report.worst_case_threshold,
        "claim_holds": report.claim_holds(),
        "checks": report.checks,
        "assumption": "the population loss at the trained parameters is assumed not to exceed its expectation under isotropic Gaussian perturbation of scale alpha; the bound is conditional on it",
    });
    fs::write(cfg.out_dir.join("bound_report.json"), serde_json::to_string_pretty(&meta).expect("json") + "\n")?;
    Ok(report)
}

pub fn run_lemma_check(cfg: &RunConfig) -> Result<LemmaReport> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let model = cfg.model_spec()?;
    let task = cfg.family()?.sample_task(cfg.seed, cfg.lemma.task_id)?;
    let report = theory::lemma1_check(&model, &task, &cfg.inner()?, &cfg.lemma_config())?;
    fs::write(cfg.out_dir.join("lemma_report.json"), serde_json::to_string_pretty(&report).expect("json") + "\n")?;
    Ok(report)
}
