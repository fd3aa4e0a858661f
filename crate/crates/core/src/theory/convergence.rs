use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: u64,
    pub grad_norm_sq: f64,
    pub running_avg: f64,
}

/// Series of `‖∇F(θ^t)‖²` with its prefix mean.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub points: Vec<TracePoint>,
    /// Running sum kept separately so resumed traces continue bit-identically.
    pub sum: f64,
    pub count: u64,
}

impl ConvergenceTrace {
    /// Appends a value and returns the updated running mean.
    pub fn push(&mut self, iter: u64, grad_norm_sq: f64) -> f64 {
        self.sum += grad_norm_sq;
        self.count += 1;
        let running_avg = self.sum / self.count as f64;
        self.points.push(TracePoint { iter, grad_norm_sq, running_avg });
        running_avg
    }

    pub fn from_series(series: &[f64]) -> Self {
        let mut trace = ConvergenceTrace::default();
        for (t, &v) in series.iter().enumerate() {
            trace.push(t as u64 + 1, v);
        }
        trace
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn running_avg(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.sum / self.count as f64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub final_avg: f64,
    /// Least-squares slope of `ln(running avg)` against `ln t` over the last half.
    pub loglog_slope: f64,
    /// The slope could not be formed (a non-positive running average).
    pub slope_undefined: bool,
}

pub const MIN_TRACE_LEN: usize = 100;

pub fn convergence_diagnostic(trace: &ConvergenceTrace) -> Result<Diagnostic> {
    if trace.len() < MIN_TRACE_LEN {
        return Err(Error::config(format!(
            "convergence diagnostic needs at least {MIN_TRACE_LEN} iterations, got {}",
            trace.len()
        )));
    }
    let final_avg = trace.points.last().map(|p| p.running_avg).unwrap_or(0.0);
    let tail = &trace.points[trace.len() / 2..];
    if tail.iter().any(|p| !(p.running_avg > 0.0)) {
        return Ok(Diagnostic { final_avg, loglog_slope: 0.0, slope_undefined: true });
    }
    let xs: Vec<f64> = tail.iter().map(|p| (p.iter as f64).ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|p| p.running_avg.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(Diagnostic { final_avg, loglog_slope: sxy / sxx, slope_undefined: false })
}
