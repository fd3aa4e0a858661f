//! Seeded few-shot task families.
//!
//! A task is a pure function of `(master_seed, task_id)`: its hyperparameters,
//! support set and query set come from three separate keyed streams, so
//! changing the query size never changes the support set.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Dataset, Quadratic};
use crate::error::{Error, Result};
use crate::rng::{self, StreamTag};

/// First id of the held-out task stream; training never reaches it.
pub const HELD_OUT_BASE: u64 = 1 << 48;
pub const SINE_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINE_PHASE: (f64, f64) = (0.0, std::f64::consts::PI);
pub const SINE_INPUT: (f64, f64) = (-5.0, 5.0);
pub const BLOB_MEAN_RANGE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum FamilyKind {
    /// `y = a·sin(x + φ)`; `shots` support and `query` query points per task.
    Sinusoid { shots: usize, query: usize },
    /// Gaussian class blobs; `shots`/`query` are per class.
    Blobs { ways: usize, dim: usize, noise: f64, shots: usize, query: usize },
    /// Analytic quadratic with random SPD curvature; support and query coincide.
    Quadratic { dim: usize, lambda_min: f64, lambda_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    /// When non-zero, tasks are drawn uniformly from a fixed pool of this
    /// many tasks (each with fixed data), i.e. a finite empirical task set.
    pub pool_size: usize,
}

/// One few-shot episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub support: Dataset,
    pub query: Dataset,
    /// Fresh query draw for the final meta-update, when resampling is on.
    pub alt_query: Option<Dataset>,
    pub task_id: u64,
    /// Identity the task's data is keyed by (the pool slot for pooled families).
    pub source_id: u64,
    pub master_seed: u64,
}

impl Task {
    /// Copy whose query set is its support set (the setting where a task's
    /// stationary points carry over to its one-step adapted loss).
    pub fn with_query_as_support(&self) -> Task {
        Task { query: self.support.clone(), alt_query: None, ..self.clone() }
    }

    /// Query set used by the final meta-update.
    pub fn update_query(&self) -> &Dataset {
        self.alt_query.as_ref().unwrap_or(&self.query)
    }
}

impl TaskFamily {
    pub fn new(kind: FamilyKind) -> Result<Self> {
        let fam = TaskFamily { kind, pool_size: 0 };
        fam.validate()?;
        Ok(fam)
    }

    pub fn with_pool(mut self, pool_size: usize) -> Self {
        self.pool_size = pool_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            FamilyKind::Sinusoid { shots, query } => {
                if *shots == 0 || *query == 0 {
                    return Err(Error::config("sinusoid: n_support and n_query must be >= 1"));
                }
            }
            FamilyKind::Blobs { ways, dim, noise, shots, query } => {
                if *ways < 2 || *dim == 0 || *shots == 0 || *query == 0 {
                    return Err(Error::config("blobs: need ways >= 2, dim >= 1, n_support >= 1, n_query >= 1"));
                }
                if !(*noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::config("blobs: noise must be a finite non-negative number"));
                }
            }
            FamilyKind::Quadratic { dim, lambda_min, lambda_max } => {
                if *dim == 0 {
                    return Err(Error::config("quadratic: dim must be >= 1"));
                }
                if !(*lambda_min > 0.0) || !(lambda_max >= lambda_min) || !lambda_max.is_finite() {
                    return Err(Error::config("quadratic: need 0 < lambda_min <= lambda_max"));
                }
            }
        }
        Ok(())
    }

    /// Model input and output widths this family needs (`None` for quadratics).
    pub fn io_dims(&self) -> Option<(usize, usize)> {
        match &self.kind {
            FamilyKind::Sinusoid { .. } => Some((1, 1)),
            FamilyKind::Blobs { ways, dim, .. } => Some((*dim, *ways)),
            FamilyKind::Quadratic { .. } => None,
        }
    }

    pub fn n_support(&self) -> usize {
        match &self.kind {
            FamilyKind::Sinusoid { shots, .. } => *shots,
            FamilyKind::Blobs { ways, shots, .. } => ways * shots,
            FamilyKind::Quadratic { .. } => 1,
        }
    }

    pub fn n_query(&self) -> usize {
        match &self.kind {
            FamilyKind::Sinusoid { query, .. } => *query,
            FamilyKind::Blobs { ways, query, .. } => ways * query,
            FamilyKind::Quadratic { .. } => 1,
        }
    }

    fn source_id(&self, master_seed: u64, task_id: u64) -> u64 {
        if self.pool_size == 0 {
            task_id
        } else {
            rng::stream(master_seed, StreamTag::PoolIndex, task_id).random_range(0..self.pool_size as u64)
        }
    }

    /// Draws task `task_id` of the stream keyed by `master_seed`.
    pub fn sample_task(&self, master_seed: u64, task_id: u64) -> Result<Task> {
        self.validate()?;
        let source_id = self.source_id(master_seed, task_id);
        self.build(master_seed, task_id, source_id)
    }

    /// The `slot`-th task of a finite pool.
    pub fn pool_task(&self, master_seed: u64, slot: u64) -> Result<Task> {
        self.validate()?;
        if self.pool_size == 0 || slot >= self.pool_size as u64 {
            return Err(Error::config("pool_task: slot outside the task pool"));
        }
        self.build(master_seed, slot, slot)
    }

    /// The `index`-th held-out task: keyed outside both the training stream and any pool.
    pub fn held_out_task(&self, master_seed: u64, index: u64) -> Result<Task> {
        self.validate()?;
        let id = HELD_OUT_BASE + index;
        self.build(master_seed, id, id)
    }

    pub fn pool(&self, master_seed: u64) -> Result<Vec<Task>> {
        (0..self.pool_size as u64).map(|s| self.pool_task(master_seed, s)).collect()
    }

    /// `M` tasks with ids `iteration·M + j`, in order.
    pub fn sample_task_batch(&self, master_seed: u64, iteration: u64, m: usize) -> Result<Vec<Task>> {
        if m == 0 {
            return Err(Error::config("meta-batch size must be >= 1"));
        }
        (0..m as u64).map(|j| self.sample_task(master_seed, iteration * m as u64 + j)).collect()
    }

    /// Independent second query draw for `task`.
    pub fn resampled_query(&self, task: &Task) -> Result<Dataset> {
        let mut params = rng::stream(task.master_seed, StreamTag::TaskParams, task.source_id);
        let mut rng = rng::stream(task.master_seed, StreamTag::QueryResample, task.task_id);
        match &self.kind {
            FamilyKind::Sinusoid { query, .. } => {
                let (a, phase) = sine_params(&mut params);
                sine_points(&mut rng, a, phase, *query)
            }
            FamilyKind::Blobs { ways, dim, noise, query, .. } => {
                let means = blob_means(&mut params, *ways, *dim);
                blob_points(&mut rng, &means, *dim, *noise, *query)
            }
            FamilyKind::Quadratic { .. } => Ok(task.query.clone()),
        }
    }

    fn build(&self, master_seed: u64, task_id: u64, source_id: u64) -> Result<Task> {
        let mut params = rng::stream(master_seed, StreamTag::TaskParams, source_id);
        let mut support_rng = rng::stream(master_seed, StreamTag::Support, source_id);
        let mut query_rng = rng::stream(master_seed, StreamTag::Query, source_id);
        let (support, query) = match &self.kind {
            FamilyKind::Sinusoid { shots, query } => {
                let (a, phase) = sine_params(&mut params);
                (
                    sine_points(&mut support_rng, a, phase, *shots)?,
                    sine_points(&mut query_rng, a, phase, *query)?,
                )
            }
            FamilyKind::Blobs { ways, dim, noise, shots, query } => {
                let means = blob_means(&mut params, *ways, *dim);
                (
                    blob_points(&mut support_rng, &means, *dim, *noise, *shots)?,
                    blob_points(&mut query_rng, &means, *dim, *noise, *query)?,
                )
            }
            FamilyKind::Quadratic { dim, lambda_min, lambda_max } => {
                let q = random_quadratic(&mut params, *dim, *lambda_min, *lambda_max)?;
                (Dataset::Quadratic(q.clone()), Dataset::Quadratic(q))
            }
        };
        Ok(Task { support, query, alt_query: None, task_id, source_id, master_seed })
    }
}

/// Draws `(amplitude, phase)`; exposed so tests can recover the generating function.
pub fn sine_params(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a = rng.random_range(SINE_AMPLITUDE.0..=SINE_AMPLITUDE.1);
    let phase = rng.random_range(SINE_PHASE.0..=SINE_PHASE.1);
    (a, phase)
}

fn sine_points(rng: &mut ChaCha8Rng, a: f64, phase: f64, n: usize) -> Result<Dataset> {
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(SINE_INPUT.0..=SINE_INPUT.1)).collect();
    let ys = xs.iter().map(|x| a * (x + phase).sin()).collect();
    Dataset::regression(xs, 1, ys, 1)
}

fn blob_means(rng: &mut ChaCha8Rng, ways: usize, dim: usize) -> Vec<f64> {
    (0..ways * dim).map(|_| rng.random_range(-BLOB_MEAN_RANGE..=BLOB_MEAN_RANGE)).collect()
}

/// `per_class` points per class, class-major order.
fn blob_points(rng: &mut ChaCha8Rng, means: &[f64], dim: usize, noise: f64, per_class: usize) -> Result<Dataset> {
    let ways = means.len() / dim;
    let mut inputs = Vec::with_capacity(ways * per_class * dim);
    let mut labels = Vec::with_capacity(ways * per_class);
    for c in 0..ways {
        for _ in 0..per_class {
            for k in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                inputs.push(means[c * dim + k] + noise * z);
            }
            labels.push(c);
        }
    }
    Dataset::classification(inputs, dim, labels)
}

/// `A = QᵀΛQ` with `Q` a random orthogonal matrix and eigenvalues uniform on
/// `[lambda_min, lambda_max]`; center uniform on `[−1, 1]^d`.
pub fn random_quadratic(rng: &mut ChaCha8Rng, dim: usize, lambda_min: f64, lambda_max: f64) -> Result<Quadratic> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let g = DMatrix::from_fn(dim, dim, |_, _| normal.sample(rng));
    let q = g.qr().q();
    let lambdas: Vec<f64> = (0..dim).map(|_| rng.random_range(lambda_min..=lambda_max)).collect();
    let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambdas));
    let a = q.transpose() * lam * &q;
    let mut flat = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            flat[i * dim + j] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    let center = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Quadratic::new(dim, flat, center)
}
