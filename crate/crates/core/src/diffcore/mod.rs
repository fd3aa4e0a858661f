//! Exact first- and second-order differentiation for the supported model
//! families.
//!
//! The MLP loss and its reverse-mode gradient are written once, generically
//! over [`Scalar`]. Evaluating that gradient program on dual numbers seeded
//! with a direction `v` produces `H·v` exactly (forward-over-reverse).
//! Finite differences appear only in [`fd_grad`], the test oracle.

mod data;
mod model;
mod scalar;

pub use data::{Dataset, LossKind, Quadratic, Samples, Targets};
pub use model::{Activation, Layer, MlpSpec, ModelSpec};
pub use scalar::{Dual, Scalar};

use crate::error::{Error, Result};
use crate::params::ParamVector;

fn check(model: &ModelSpec, params: &[f64], data: &Dataset) -> Result<()> {
    if params.len() != model.dim() {
        return Err(Error::config(format!(
            "parameter dimension {} does not match model dimension {}",
            params.len(),
            model.dim()
        )));
    }
    match (model, data) {
        (ModelSpec::Mlp(m), Dataset::Supervised { samples, .. }) => {
            if samples.is_empty() {
                return Err(Error::config("empty dataset"));
            }
            if samples.d_in != m.d_in() {
                return Err(Error::config(format!(
                    "input dimension {} does not match model input {}",
                    samples.d_in,
                    m.d_in()
                )));
            }
            match &samples.targets {
                Targets::Real { d_out, .. } if *d_out != m.d_out() => Err(Error::config(format!(
                    "target dimension {d_out} does not match model output {}",
                    m.d_out()
                ))),
                Targets::Labels(labels) if labels.iter().any(|&y| y >= m.d_out()) => {
                    Err(Error::config("class label out of range for model output"))
                }
                _ => Ok(()),
            }
        }
        (ModelSpec::Quadratic { dim, .. }, Dataset::Quadratic(q)) if q.dim == *dim => Ok(()),
        (ModelSpec::Quadratic { .. }, Dataset::Quadratic(_)) => {
            Err(Error::config("quadratic dimension does not match model"))
        }
        _ => Err(Error::config("dataset kind is not compatible with the model family")),
    }
}

fn finite(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::diverged(what, None))
    }
}

fn finite_vec(v: Vec<f64>, what: &'static str) -> Result<ParamVector> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(ParamVector::from_vec(v))
    } else {
        Err(Error::diverged(what, None))
    }
}

/// Scratch buffers for one forward/backward pass.
struct Tape<S> {
    /// Post-activation values per layer; `acts[0]` is the input.
    acts: Vec<Vec<S>>,
    delta: Vec<S>,
    delta_prev: Vec<S>,
}

impl<S: Scalar> Tape<S> {
    fn new(m: &MlpSpec) -> Self {
        Tape {
            acts: m.widths.iter().map(|&w| vec![S::cst(0.0); w]).collect(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }
}

fn activate<S: Scalar>(act: Activation, z: S) -> S {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Softplus => z.softplus(),
        Activation::Identity => z,
    }
}

/// Derivative of the activation given its pre-activation `z` and output `a`.
fn activate_deriv<S: Scalar>(act: Activation, z: S, a: S) -> S {
    match act {
        Activation::Tanh => S::cst(1.0) - a * a,
        Activation::Softplus => z.sigmoid(),
        Activation::Identity => S::cst(1.0),
    }
}

/// Forward pass; returns pre-activations of hidden layers so the backward
/// pass can differentiate softplus.
fn forward<S: Scalar>(m: &MlpSpec, layers: &[Layer], p: &[S], x: &[f64], tape: &mut Tape<S>, pre: &mut [Vec<S>]) {
    for (a, &xi) in tape.acts[0].iter_mut().zip(x) {
        *a = S::cst(xi);
    }
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let (head, tail) = tape.acts.split_at_mut(l + 1);
        let input = &head[l];
        let out = &mut tail[0];
        let zs = &mut pre[l];
        for o in 0..layer.fan_out {
            let row = &p[layer.w_offset + o * layer.fan_in..layer.w_offset + (o + 1) * layer.fan_in];
            let mut z = p[layer.b_offset + o];
            for (w, a) in row.iter().zip(input.iter()) {
                z += *w * *a;
            }
            zs[o] = z;
            out[o] = if l == last { z } else { activate(m.activation, z) };
        }
    }
}

/// Loss of one sample and `dℓ/d(output)` written into `dout` when requested.
fn sample_loss<S: Scalar>(out: &[S], sample: usize, targets: &Targets, dout: Option<&mut Vec<S>>) -> S {
    match targets {
        Targets::Real { values, d_out } => {
            let y = &values[sample * d_out..(sample + 1) * d_out];
            let inv = 1.0 / *d_out as f64;
            let mut loss = S::cst(0.0);
            for (f, &t) in out.iter().zip(y) {
                let r = *f - S::cst(t);
                loss += r * r;
            }
            if let Some(d) = dout {
                d.clear();
                d.extend(out.iter().zip(y).map(|(f, &t)| (*f - S::cst(t)).scale(2.0 * inv)));
            }
            loss.scale(inv)
        }
        Targets::Labels(labels) => {
            let y = labels[sample];
            let shift = out.iter().map(|f| f.re()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = S::cst(0.0);
            for f in out {
                sum += (*f - S::cst(shift)).exp();
            }
            let lse = S::cst(shift) + sum.ln();
            if let Some(d) = dout {
                d.clear();
                d.extend(out.iter().enumerate().map(|(i, f)| {
                    let p = (*f - lse).exp();
                    if i == y {
                        p - S::cst(1.0)
                    } else {
                        p
                    }
                }));
            }
            lse - out[y]
        }
    }
}

/// Mean loss over `samples` and, when `grad` is given, its gradient.
fn mlp_program<S: Scalar>(m: &MlpSpec, p: &[S], samples: &Samples, mut grad: Option<&mut [S]>) -> S {
    let layers = m.layers();
    let mut tape = Tape::new(m);
    let mut pre: Vec<Vec<S>> = layers.iter().map(|l| vec![S::cst(0.0); l.fan_out]).collect();
    let n = samples.len();
    let inv_n = 1.0 / n as f64;
    let mut total = S::cst(0.0);
    for i in 0..n {
        forward(m, &layers, p, samples.input(i), &mut tape, &mut pre);
        let out = tape.acts.last().expect("output layer");
        let Some(g) = grad.as_deref_mut() else {
            total += sample_loss(out, i, &samples.targets, None);
            continue;
        };
        let mut delta = std::mem::take(&mut tape.delta);
        total += sample_loss(out, i, &samples.targets, Some(&mut delta));
        for d in delta.iter_mut() {
            *d = d.scale(inv_n);
        }
        let mut delta_prev = std::mem::take(&mut tape.delta_prev);
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &tape.acts[l];
            for o in 0..layer.fan_out {
                let d = delta[o];
                let row = layer.w_offset + o * layer.fan_in;
                for (j, a) in input.iter().enumerate() {
                    g[row + j] += d * *a;
                }
                g[layer.b_offset + o] += d;
            }
            if l > 0 {
                delta_prev.clear();
                delta_prev.resize(layer.fan_in, S::cst(0.0));
                for o in 0..layer.fan_out {
                    let d = delta[o];
                    let row = &p[layer.w_offset + o * layer.fan_in..layer.w_offset + (o + 1) * layer.fan_in];
                    for (acc, w) in delta_prev.iter_mut().zip(row) {
                        *acc += *w * d;
                    }
                }
                for (j, acc) in delta_prev.iter_mut().enumerate() {
                    *acc = *acc * activate_deriv(m.activation, pre[l - 1][j], input[j]);
                }
                std::mem::swap(&mut delta, &mut delta_prev);
            }
        }
        tape.delta = delta;
        tape.delta_prev = delta_prev;
    }
    total.scale(inv_n)
}

fn quadratic_value(q: &Quadratic, theta: &[f64]) -> f64 {
    let r: Vec<f64> = theta.iter().zip(&q.center).map(|(t, c)| t - c).collect();
    let ar = q.matvec(&r);
    0.5 * r.iter().zip(&ar).map(|(a, b)| a * b).sum::<f64>()
}

/// `L(θ; D)`: mean per-datum loss, or `½(θ−c)ᵀA(θ−c)` for analytic quadratics.
pub fn loss(model: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    check(model, params.as_slice(), data)?;
    let value = match (model, data) {
        (ModelSpec::Mlp(m), Dataset::Supervised { samples, .. }) => {
            mlp_program::<f64>(m, params.as_slice(), samples, None)
        }
        (_, Dataset::Quadratic(q)) => quadratic_value(q, params.as_slice()),
        _ => unreachable!("checked"),
    };
    finite(value, "loss")
}

/// Loss and gradient from one pass.
pub fn value_and_grad(model: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<(f64, ParamVector)> {
    check(model, params.as_slice(), data)?;
    match (model, data) {
        (ModelSpec::Mlp(m), Dataset::Supervised { samples, .. }) => {
            let mut g = vec![0.0; m.dim()];
            let value = mlp_program::<f64>(m, params.as_slice(), samples, Some(&mut g));
            Ok((finite(value, "loss")?, finite_vec(g, "gradient")?))
        }
        (_, Dataset::Quadratic(q)) => {
            let r: Vec<f64> = params.iter().zip(&q.center).map(|(t, c)| t - c).collect();
            let g = q.matvec(&r);
            let value = 0.5 * r.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            Ok((finite(value, "loss")?, finite_vec(g, "gradient")?))
        }
        _ => unreachable!("checked"),
    }
}

/// `∇L(θ; D)`, exact.
pub fn grad(model: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<ParamVector> {
    value_and_grad(model, params, data).map(|(_, g)| g)
}

/// Exact Hessian-vector product `∇²L(θ; D)·v`.
pub fn hvp(model: &ModelSpec, params: &ParamVector, data: &Dataset, v: &ParamVector) -> Result<ParamVector> {
    check(model, params.as_slice(), data)?;
    if v.dim() != params.dim() {
        return Err(Error::config(format!(
            "direction dimension {} does not match parameter dimension {}",
            v.dim(),
            params.dim()
        )));
    }
    match (model, data) {
        (ModelSpec::Mlp(m), Dataset::Supervised { samples, .. }) => {
            let p: Vec<Dual> = params.iter().zip(v.iter()).map(|(&x, &d)| Dual::new(x, d)).collect();
            let mut g = vec![Dual::default(); m.dim()];
            mlp_program::<Dual>(m, &p, samples, Some(&mut g));
            finite_vec(g.into_iter().map(|d| d.du).collect(), "hessian-vector product")
        }
        (_, Dataset::Quadratic(q)) => finite_vec(q.matvec(v.as_slice()), "hessian-vector product"),
        _ => unreachable!("checked"),
    }
}

/// Per-datum losses `ℓ(θ, x_i, y_i)`; a quadratic yields its single value.
pub fn per_sample_losses(model: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<Vec<f64>> {
    check(model, params.as_slice(), data)?;
    match (model, data) {
        (ModelSpec::Mlp(m), Dataset::Supervised { samples, .. }) => {
            let layers = m.layers();
            let mut tape = Tape::<f64>::new(m);
            let mut pre: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.fan_out]).collect();
            (0..samples.len())
                .map(|i| {
                    forward(m, &layers, params.as_slice(), samples.input(i), &mut tape, &mut pre);
                    let out = tape.acts.last().expect("output layer");
                    finite(sample_loss(out, i, &samples.targets, None), "loss")
                })
                .collect()
        }
        (_, Dataset::Quadratic(q)) => Ok(vec![finite(quadratic_value(q, params.as_slice()), "loss")?]),
        _ => unreachable!("checked"),
    }
}

/// Raw network outputs for each input row (`n × d_out`, row-major).
pub fn predict(model: &ModelSpec, params: &ParamVector, samples: &Samples) -> Result<Vec<f64>> {
    let ModelSpec::Mlp(m) = model else {
        return Err(Error::config("predict requires an mlp model"));
    };
    if params.dim() != m.dim() || samples.d_in != m.d_in() {
        return Err(Error::config("predict: dimension mismatch"));
    }
    let layers = m.layers();
    let mut tape = Tape::<f64>::new(m);
    let mut pre: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.fan_out]).collect();
    let mut out = Vec::with_capacity(samples.len() * m.d_out());
    for i in 0..samples.len() {
        forward(m, &layers, params.as_slice(), samples.input(i), &mut tape, &mut pre);
        out.extend_from_slice(tape.acts.last().expect("output layer"));
    }
    Ok(out)
}

/// Task metric: MSE for regression, error rate for classification, the
/// loss value for quadratics.
pub fn metric(model: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    match data {
        Dataset::Supervised { samples, loss: LossKind::CrossEntropy } => {
            check(model, params.as_slice(), data)?;
            let Targets::Labels(labels) = &samples.targets else { unreachable!("validated") };
            let out = predict(model, params, samples)?;
            let k = out.len() / samples.len();
            let wrong = labels
                .iter()
                .enumerate()
                .filter(|(i, &y)| {
                    let row = &out[i * k..(i + 1) * k];
                    let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                    arg != y
                })
                .count();
            Ok(wrong as f64 / samples.len() as f64)
        }
        _ => loss(model, params, data),
    }
}

/// Central-difference gradient estimate with step `h`. Test oracle only.
pub fn fd_grad(model: &ModelSpec, params: &ParamVector, data: &Dataset, h: f64) -> Result<ParamVector> {
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut p = params.clone();
    let mut g = ParamVector::zeros(params.dim());
    for i in 0..params.dim() {
        let x = p[i];
        p[i] = x + h;
        let up = loss(model, &p, data)?;
        p[i] = x - h;
        let down = loss(model, &p, data)?;
        p[i] = x;
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}
