use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over samples and output coordinates of the squared error.
    Mse,
    /// Softmax cross-entropy, log-sum-exp stabilized.
    CrossEntropy,
    /// `½(θ−c)ᵀA(θ−c)`, evaluated analytically.
    QuadraticAnalytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// Row-major `n × d_out`.
    Real { values: Vec<f64>, d_out: usize },
    Labels(Vec<usize>),
}

/// Input/target pairs for a supervised loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    /// Row-major `n × d_in`.
    pub inputs: Vec<f64>,
    pub d_in: usize,
    pub targets: Targets,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.d_in
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let mut inputs = Vec::with_capacity(idx.len() * self.d_in);
        for &i in idx {
            inputs.extend_from_slice(self.input(i));
        }
        let targets = match &self.targets {
            Targets::Real { values, d_out } => {
                let mut v = Vec::with_capacity(idx.len() * d_out);
                for &i in idx {
                    v.extend_from_slice(&values[i * d_out..(i + 1) * d_out]);
                }
                Targets::Real { values: v, d_out: *d_out }
            }
            Targets::Labels(labels) => Targets::Labels(idx.iter().map(|&i| labels[i]).collect()),
        };
        Samples { inputs, d_in: self.d_in, targets }
    }
}

/// Analytic quadratic `½(θ−c)ᵀA(θ−c)` with symmetric positive definite `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub a: Vec<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    /// Validates symmetry and strict positive definiteness.
    pub fn new(dim: usize, a: Vec<f64>, center: Vec<f64>) -> Result<Self> {
        if dim == 0 || a.len() != dim * dim || center.len() != dim {
            return Err(Error::config("quadratic: inconsistent dimensions"));
        }
        for i in 0..dim {
            for j in 0..i {
                let (x, y) = (a[i * dim + j], a[j * dim + i]);
                if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                    return Err(Error::config("quadratic: A is not symmetric"));
                }
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(dim, dim, &a);
        let min_eig = m.symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(Error::config(format!(
                "quadratic: A must be positive definite (min eigenvalue {min_eig})"
            )));
        }
        Ok(Quadratic { dim, a, center })
    }

    /// Diagonal `A`, handy for closed-form checks.
    pub fn diagonal(diag: &[f64], center: &[f64]) -> Result<Self> {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, &v) in diag.iter().enumerate() {
            a[i * d + i] = v;
        }
        Quadratic::new(d, a, center.to_vec())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| self.a[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.a);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        ev
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Dataset {
    Supervised { samples: Samples, loss: LossKind },
    Quadratic(Quadratic),
}

impl Dataset {
    pub fn regression(inputs: Vec<f64>, d_in: usize, targets: Vec<f64>, d_out: usize) -> Result<Self> {
        let ds = Dataset::Supervised {
            samples: Samples { inputs, d_in, targets: Targets::Real { values: targets, d_out } },
            loss: LossKind::Mse,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn classification(inputs: Vec<f64>, d_in: usize, labels: Vec<usize>) -> Result<Self> {
        let ds = Dataset::Supervised {
            samples: Samples { inputs, d_in, targets: Targets::Labels(labels) },
            loss: LossKind::CrossEntropy,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn loss_kind(&self) -> LossKind {
        match self {
            Dataset::Supervised { loss, .. } => *loss,
            Dataset::Quadratic(_) => LossKind::QuadraticAnalytic,
        }
    }

    /// Number of data points; an analytic quadratic counts as one.
    pub fn len(&self) -> usize {
        match self {
            Dataset::Supervised { samples, .. } => samples.len(),
            Dataset::Quadratic(_) => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` in the given order. Quadratics are returned unchanged.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        match self {
            Dataset::Supervised { samples, loss } => {
                Dataset::Supervised { samples: samples.subset(idx), loss: *loss }
            }
            Dataset::Quadratic(q) => Dataset::Quadratic(q.clone()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Dataset::Supervised { samples, loss } => {
                if samples.d_in == 0 || samples.inputs.is_empty() || samples.inputs.len() % samples.d_in != 0 {
                    return Err(Error::config("dataset: inputs must be a non-empty n × d_in matrix"));
                }
                let n = samples.len();
                match (&samples.targets, loss) {
                    (Targets::Real { values, d_out }, LossKind::Mse) => {
                        if *d_out == 0 || values.len() != n * d_out {
                            return Err(Error::config("dataset: targets must be n × d_out"));
                        }
                    }
                    (Targets::Labels(labels), LossKind::CrossEntropy) => {
                        if labels.len() != n {
                            return Err(Error::config("dataset: one label per input row"));
                        }
                    }
                    _ => return Err(Error::config("dataset: targets do not match loss kind")),
                }
                Ok(())
            }
            Dataset::Quadratic(_) => Ok(()),
        }
    }
}
