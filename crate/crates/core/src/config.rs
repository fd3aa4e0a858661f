//! Run configuration: a flat `section.key = value` text format.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key has a default; unknown or repeated keys are rejected.
//! [`RunConfig::to_text`] writes every key, and parsing its output gives back
//! an equal configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::diffcore::{Activation, ModelSpec};
use crate::error::{Error, Result};
use crate::meta::{InnerConfig, MetaConfig};
use crate::sharp::{SharpConfig, Variant};
use crate::tasks::{FamilyKind, TaskFamily};
use crate::theory::{log_grid, BoundForm, LemmaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Sinusoid,
    Blobs,
    Quadratic,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Sinusoid => "sinusoid",
            Family::Blobs => "blobs",
            Family::Quadratic => "quadratic",
        }
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sinusoid" => Ok(Family::Sinusoid),
            "blobs" => Ok(Family::Blobs),
            "quadratic" => Ok(Family::Quadratic),
            _ => Err("expected sinusoid, blobs or quadratic".into()),
        }
    }
}

/// Which landscape grids to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridChoice {
    Erm,
    Maml,
    Both,
}

impl GridChoice {
    fn name(self) -> &'static str {
        match self {
            GridChoice::Erm => "erm",
            GridChoice::Maml => "maml",
            GridChoice::Both => "both",
        }
    }
}

impl FromStr for GridChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "erm" => Ok(GridChoice::Erm),
            "maml" => Ok(GridChoice::Maml),
            "both" => Ok(GridChoice::Both),
            _ => Err("expected erm, maml or both".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSection {
    pub family: Family,
    /// Classes per blob task.
    pub ways: usize,
    /// Support points per task (per class for blobs).
    pub n_support: usize,
    /// Query points per task (per class for blobs).
    pub n_query: usize,
    /// Input dimension for blobs, parameter dimension for quadratics.
    pub dim: usize,
    pub noise: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Finite task pool size; 0 draws a fresh task every time.
    pub pool_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `None` puts the head at the final layer.
    pub head_split: Option<usize>,
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub variant: Variant,
    pub meta_batch: usize,
    pub iterations: usize,
    pub inner_steps: usize,
    pub beta_low: f64,
    pub beta_up: f64,
    /// Support points per inner gradient; 0 uses the full support set.
    pub subsample: usize,
    /// Draw a fresh query set for the final meta-update.
    pub resample_query: bool,
    /// Record wall-clock milliseconds in the trace (otherwise 0, keeping traces reproducible).
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub n_test_tasks: usize,
    /// Iterations between evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSection {
    pub extent: f64,
    pub resolution: usize,
    pub objective: GridChoice,
    pub task_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessSection {
    pub alphas: Vec<f64>,
    pub budget: usize,
    pub task_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundSection {
    /// 0 takes the model dimension.
    pub k: usize,
    /// 0 takes the support size.
    pub n: usize,
    /// 0 takes the number of distinct training tasks.
    pub m: usize,
    pub delta: f64,
    pub theta_norm_sq: f64,
    /// Constant empirical term used without a checkpoint.
    pub empirical_term: f64,
    pub gamma_a: f64,
    /// Adds `gamma_c / n` to `gamma_a`.
    pub gamma_c: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub n_alphas: usize,
    pub form: BoundForm,
    /// Training tasks the empirical term is measured on.
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaSection {
    pub n_probes: usize,
    pub tol_grad: f64,
    pub tol_min: f64,
    pub max_iters: usize,
    pub task_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub alpha_low: f64,
    pub alpha_up: f64,
    pub esam_enabled: bool,
    pub esam_xi: f64,
    pub esam_mu: f64,
    pub anil_enabled: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub eval: EvalSection,
    pub landscape: LandscapeSection,
    pub sharpness: SharpnessSection,
    pub bound: BoundSection,
    pub lemma: LemmaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSection {
                family: Family::Sinusoid,
                ways: 5,
                n_support: 5,
                n_query: 10,
                dim: 2,
                noise: 0.5,
                lambda_min: 0.5,
                lambda_max: 2.0,
                pool_size: 0,
            },
            model: ModelSection { hidden: vec![40, 40], activation: Activation::Tanh, head_split: None, init_scale: 1.0 },
            train: TrainSection {
                variant: Variant::Maml,
                meta_batch: 4,
                iterations: 1000,
                inner_steps: 1,
                beta_low: 0.01,
                beta_up: 0.001,
                subsample: 0,
                resample_query: false,
                wall_clock: false,
            },
            alpha_low: 0.0,
            alpha_up: 0.0,
            esam_enabled: false,
            esam_xi: 1.0,
            esam_mu: 1.0,
            anil_enabled: false,
            seed: 0,
            out_dir: PathBuf::from("out"),
            eval: EvalSection { n_test_tasks: 20, eval_every: 0 },
            landscape: LandscapeSection { extent: 1.0, resolution: 51, objective: GridChoice::Both, task_id: 0 },
            sharpness: SharpnessSection { alphas: vec![0.01, 0.05, 0.1], budget: 8, task_id: 0 },
            bound: BoundSection {
                k: 0,
                n: 0,
                m: 0,
                delta: 0.05,
                theta_norm_sq: 1.0,
                empirical_term: 0.0,
                gamma_a: 0.0,
                gamma_c: 0.0,
                alpha_min: 1e-4,
                alpha_max: 1.0,
                n_alphas: 50,
                form: BoundForm::Main,
                n_tasks: 8,
            },
            lemma: LemmaSection { n_probes: 5, tol_grad: 1e-9, tol_min: 1e-6, max_iters: 200, task_id: 0 },
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::config(format!("{key}: invalid value `{raw}` ({e})")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|item| parse_value(key, item.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task.family" => self.task.family = parse_value(key, v)?,
            "task.ways" => self.task.ways = parse_value(key, v)?,
            "task.n_support" => self.task.n_support = parse_value(key, v)?,
            "task.n_query" => self.task.n_query = parse_value(key, v)?,
            "task.dim" => self.task.dim = parse_value(key, v)?,
            "task.noise" => self.task.noise = parse_value(key, v)?,
            "task.lambda_min" => self.task.lambda_min = parse_value(key, v)?,
            "task.lambda_max" => self.task.lambda_max = parse_value(key, v)?,
            "task.pool_size" => self.task.pool_size = parse_value(key, v)?,
            "model.hidden" => self.model.hidden = parse_list(key, v)?,
            "model.activation" => self.model.activation = Activation::parse(v)?,
            "model.head_split" => {
                self.model.head_split = if v == "auto" { None } else { Some(parse_value(key, v)?) }
            }
            "model.init_scale" => self.model.init_scale = parse_value(key, v)?,
            "train.variant" => self.train.variant = Variant::parse(v)?,
            "train.meta_batch" => self.train.meta_batch = parse_value(key, v)?,
            "train.iterations" => self.train.iterations = parse_value(key, v)?,
            "train.inner_steps" => self.train.inner_steps = parse_value(key, v)?,
            "train.beta_low" => self.train.beta_low = parse_value(key, v)?,
            "train.beta_up" => self.train.beta_up = parse_value(key, v)?,
            "train.subsample" => self.train.subsample = parse_value(key, v)?,
            "train.resample_query" => self.train.resample_query = parse_value(key, v)?,
            "train.wall_clock" => self.train.wall_clock = parse_value(key, v)?,
            "sharp.alpha_low" => self.alpha_low = parse_value(key, v)?,
            "sharp.alpha_up" => self.alpha_up = parse_value(key, v)?,
            "esam.enabled" => self.esam_enabled = parse_value(key, v)?,
            "esam.xi" => self.esam_xi = parse_value(key, v)?,
            "esam.mu" => self.esam_mu = parse_value(key, v)?,
            "anil.enabled" => self.anil_enabled = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "eval.n_test_tasks" => self.eval.n_test_tasks = parse_value(key, v)?,
            "eval.eval_every" => self.eval.eval_every = parse_value(key, v)?,
            "landscape.extent" => self.landscape.extent = parse_value(key, v)?,
            "landscape.resolution" => self.landscape.resolution = parse_value(key, v)?,
            "landscape.objective" => self.landscape.objective = parse_value(key, v)?,
            "landscape.task_id" => self.landscape.task_id = parse_value(key, v)?,
            "sharpness.alphas" => self.sharpness.alphas = parse_list(key, v)?,
            "sharpness.budget" => self.sharpness.budget = parse_value(key, v)?,
            "sharpness.task_id" => self.sharpness.task_id = parse_value(key, v)?,
            "bound.k" => self.bound.k = parse_value(key, v)?,
            "bound.n" => self.bound.n = parse_value(key, v)?,
            "bound.m" => self.bound.m = parse_value(key, v)?,
            "bound.delta" => self.bound.delta = parse_value(key, v)?,
            "bound.theta_norm_sq" => self.bound.theta_norm_sq = parse_value(key, v)?,
            "bound.empirical_term" => self.bound.empirical_term = parse_value(key, v)?,
            "bound.gamma_a" => self.bound.gamma_a = parse_value(key, v)?,
            "bound.gamma_c" => self.bound.gamma_c = parse_value(key, v)?,
            "bound.alpha_min" => self.bound.alpha_min = parse_value(key, v)?,
            "bound.alpha_max" => self.bound.alpha_max = parse_value(key, v)?,
            "bound.n_alphas" => self.bound.n_alphas = parse_value(key, v)?,
            "bound.form" => self.bound.form = BoundForm::parse(v)?,
            "bound.n_tasks" => self.bound.n_tasks = parse_value(key, v)?,
            "lemma.n_probes" => self.lemma.n_probes = parse_value(key, v)?,
            "lemma.tol_grad" => self.lemma.tol_grad = parse_value(key, v)?,
            "lemma.tol_min" => self.lemma.tol_min = parse_value(key, v)?,
            "lemma.max_iters" => self.lemma.max_iters = parse_value(key, v)?,
            "lemma.task_id" => self.lemma.task_id = parse_value(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.task;
        let b = &self.bound;
        vec![
            ("task.family", t.family.name().into()),
            ("task.ways", t.ways.to_string()),
            ("task.n_support", t.n_support.to_string()),
            ("task.n_query", t.n_query.to_string()),
            ("task.dim", t.dim.to_string()),
            ("task.noise", t.noise.to_string()),
            ("task.lambda_min", t.lambda_min.to_string()),
            ("task.lambda_max", t.lambda_max.to_string()),
            ("task.pool_size", t.pool_size.to_string()),
            ("model.hidden", join(&self.model.hidden)),
            ("model.activation", self.model.activation.name().into()),
            ("model.head_split", self.model.head_split.map_or("auto".into(), |s| s.to_string())),
            ("model.init_scale", self.model.init_scale.to_string()),
            ("train.variant", self.train.variant.name().into()),
            ("train.meta_batch", self.train.meta_batch.to_string()),
            ("train.iterations", self.train.iterations.to_string()),
            ("train.inner_steps", self.train.inner_steps.to_string()),
            ("train.beta_low", self.train.beta_low.to_string()),
            ("train.beta_up", self.train.beta_up.to_string()),
            ("train.subsample", self.train.subsample.to_string()),
            ("train.resample_query", self.train.resample_query.to_string()),
            ("train.wall_clock", self.train.wall_clock.to_string()),
            ("sharp.alpha_low", self.alpha_low.to_string()),
            ("sharp.alpha_up", self.alpha_up.to_string()),
            ("esam.enabled", self.esam_enabled.to_string()),
            ("esam.xi", self.esam_xi.to_string()),
            ("esam.mu", self.esam_mu.to_string()),
            ("anil.enabled", self.anil_enabled.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("eval.n_test_tasks", self.eval.n_test_tasks.to_string()),
            ("eval.eval_every", self.eval.eval_every.to_string()),
            ("landscape.extent", self.landscape.extent.to_string()),
            ("landscape.resolution", self.landscape.resolution.to_string()),
            ("landscape.objective", self.landscape.objective.name().into()),
            ("landscape.task_id", self.landscape.task_id.to_string()),
            ("sharpness.alphas", join(&self.sharpness.alphas)),
            ("sharpness.budget", self.sharpness.budget.to_string()),
            ("sharpness.task_id", self.sharpness.task_id.to_string()),
            ("bound.k", b.k.to_string()),
            ("bound.n", b.n.to_string()),
            ("bound.m", b.m.to_string()),
            ("bound.delta", b.delta.to_string()),
            ("bound.theta_norm_sq", b.theta_norm_sq.to_string()),
            ("bound.empirical_term", b.empirical_term.to_string()),
            ("bound.gamma_a", b.gamma_a.to_string()),
            ("bound.gamma_c", b.gamma_c.to_string()),
            ("bound.alpha_min", b.alpha_min.to_string()),
            ("bound.alpha_max", b.alpha_max.to_string()),
            ("bound.n_alphas", b.n_alphas.to_string()),
            ("bound.form", b.form.name().into()),
            ("bound.n_tasks", b.n_tasks.to_string()),
            ("lemma.n_probes", self.lemma.n_probes.to_string()),
            ("lemma.tol_grad", self.lemma.tol_grad.to_string()),
            ("lemma.tol_min", self.lemma.tol_min.to_string()),
            ("lemma.max_iters", self.lemma.max_iters.to_string()),
            ("lemma.task_id", self.lemma.task_id.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.family()?;
        self.model_spec()?;
        self.inner()?;
        self.meta()?;
        self.sharp()?;
        if !(self.model.init_scale > 0.0) || !self.model.init_scale.is_finite() {
            return Err(Error::config("model.init_scale must be positive"));
        }
        if self.eval.n_test_tasks == 0 {
            return Err(Error::config("eval.n_test_tasks must be >= 1"));
        }
        if self.landscape.resolution < 2 || !(self.landscape.extent > 0.0) {
            return Err(Error::config("landscape needs resolution >= 2 and a positive extent"));
        }
        if self.sharpness.budget == 0 || self.sharpness.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::config("sharpness needs budget >= 1 and positive radii"));
        }
        if self.sharpness.alphas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("sharpness.alphas must be strictly ascending"));
        }
        let b = &self.bound;
        if !(b.alpha_min > 0.0 && b.alpha_max > b.alpha_min) || b.n_alphas < 2 || b.n_tasks == 0 {
            return Err(Error::config("bound needs 0 < alpha_min < alpha_max, n_alphas >= 2 and n_tasks >= 1"));
        }
        if !(b.gamma_c >= 0.0) {
            return Err(Error::config("bound.gamma_c must be non-negative"));
        }
        self.lemma_config().validate()?;
        Ok(())
    }

    pub fn family(&self) -> Result<TaskFamily> {
        let t = &self.task;
        let kind = match t.family {
            Family::Sinusoid => FamilyKind::Sinusoid { shots: t.n_support, query: t.n_query },
            Family::Blobs => FamilyKind::Blobs { ways: t.ways, dim: t.dim, noise: t.noise, shots: t.n_support, query: t.n_query },
            Family::Quadratic => FamilyKind::Quadratic { dim: t.dim, lambda_min: t.lambda_min, lambda_max: t.lambda_max },
        };
        Ok(TaskFamily::new(kind)?.with_pool(t.pool_size))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let family = self.family()?;
        let spec = match family.io_dims() {
            Some((d_in, d_out)) => {
                let mut widths = vec![d_in];
                widths.extend(&self.model.hidden);
                widths.push(d_out);
                ModelSpec::mlp(widths, self.model.activation)?
            }
            None => ModelSpec::quadratic(self.task.dim)?,
        };
        match self.model.head_split {
            Some(split) => spec.with_head_split(split),
            None => Ok(spec),
        }
    }

    pub fn inner(&self) -> Result<InnerConfig> {
        if !(self.train.beta_low > 0.0) {
            return Err(Error::config("train.beta_low must be positive"));
        }
        let mut inner = InnerConfig::new(self.train.beta_low, self.train.inner_steps)?;
        inner.subsample = (self.train.subsample > 0).then_some(self.train.subsample);
        Ok(inner)
    }

    pub fn meta(&self) -> Result<MetaConfig> {
        MetaConfig::new(self.train.beta_up, self.train.meta_batch, self.train.iterations)
    }

    pub fn sharp(&self) -> Result<SharpConfig> {
        // ξ and μ are range-checked even while ESAM is off.
        let mut cfg = SharpConfig::new(self.train.variant, self.alpha_low, self.alpha_up)?.anil(self.anil_enabled);
        (cfg.esam_enabled, cfg.xi, cfg.mu) = (self.esam_enabled, self.esam_xi, self.esam_mu);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lemma_config(&self) -> LemmaConfig {
        LemmaConfig {
            n_probes: self.lemma.n_probes,
            tol_grad: self.lemma.tol_grad,
            tol_min: self.lemma.tol_min,
            max_iters: self.lemma.max_iters,
            seed: self.seed,
        }
    }

    pub fn bound_alphas(&self) -> Vec<f64> {
        log_grid(self.bound.alpha_min, self.bound.alpha_max, self.bound.n_alphas)
    }
}
