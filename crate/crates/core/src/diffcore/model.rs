use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{self, StreamTag};

/// Hidden-layer nonlinearity. All are twice differentiable everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            "relu" => Err(Error::config(
                "relu is not supported: its second derivative vanishes almost everywhere",
            )),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
///
/// Weights are stored row-major (`fan_out` rows of `fan_in`), followed by
/// the `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl Layer {
    pub fn end(&self) -> usize {
        self.b_offset + self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[d_in, hidden.., d_out]`
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub head_split: usize,
}

impl MlpSpec {
    pub fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    w_offset: offset,
                    b_offset: offset + w[0] * w[1],
                };
                offset = layer.end();
                layer
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

/// The differentiable model families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    /// The parameters are the point at which an analytic quadratic loss is evaluated.
    Quadratic { dim: usize, head_split: usize },
}

impl ModelSpec {
    /// MLP with the given layer widths; the head defaults to the final layer.
    pub fn mlp(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!(
                "mlp widths must list at least input and output sizes, all positive: {widths:?}"
            )));
        }
        let mut spec = MlpSpec { widths, activation, head_split: 0 };
        spec.head_split = spec.layers().last().map(|l| l.w_offset).unwrap_or(0);
        Ok(ModelSpec::Mlp(spec))
    }

    pub fn quadratic(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("quadratic dimension must be positive"));
        }
        Ok(ModelSpec::Quadratic { dim, head_split: 0 })
    }

    pub fn with_head_split(mut self, split: usize) -> Result<Self> {
        let dim = self.dim();
        if split > dim {
            return Err(Error::config(format!("head_split {split} exceeds dimension {dim}")));
        }
        match &mut self {
            ModelSpec::Mlp(m) => m.head_split = split,
            ModelSpec::Quadratic { head_split, .. } => *head_split = split,
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Mlp(m) => m.dim(),
            ModelSpec::Quadratic { dim, .. } => *dim,
        }
    }

    /// Index separating the body (before) from the head (after).
    pub fn head_split(&self) -> usize {
        match self {
            ModelSpec::Mlp(m) => m.head_split,
            ModelSpec::Quadratic { head_split, .. } => *head_split,
        }
    }

    /// Textual layout descriptor stored in checkpoints.
    pub fn layout(&self) -> String {
        match self {
            ModelSpec::Mlp(m) => {
                let widths: Vec<String> = m.widths.iter().map(|w| w.to_string()).collect();
                format!("mlp:{}:{}:head={}", widths.join("-"), m.activation.name(), m.head_split)
            }
            ModelSpec::Quadratic { dim, head_split } => format!("quadratic:{dim}:head={head_split}"),
        }
    }

    /// Parameter groups used by filter normalization: one group per output
    /// unit's incoming weights, plus one group per layer's bias vector.
    /// Quadratic models form a single group.
    pub fn filter_groups(&self) -> Vec<std::ops::Range<usize>> {
        match self {
            ModelSpec::Mlp(m) => {
                let mut groups = Vec::new();
                for l in m.layers() {
                    for o in 0..l.fan_out {
                        let start = l.w_offset + o * l.fan_in;
                        groups.push(start..start + l.fan_in);
                    }
                    groups.push(l.b_offset..l.end());
                }
                groups
            }
            ModelSpec::Quadratic { dim, .. } => vec![0..*dim],
        }
    }

    /// Seeded initialization: Glorot-normal weights and zero biases for
    /// MLPs, standard normal coordinates times `scale` for quadratics.
    pub fn init_params(&self, seed: u64, scale: f64) -> ParamVector {
        let mut rng = rng::stream(seed, StreamTag::Init, 0);
        let mut p = ParamVector::zeros(self.dim());
        match self {
            ModelSpec::Mlp(m) => {
                for l in m.layers() {
                    let std = scale * (2.0 / (l.fan_in + l.fan_out) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for i in l.w_offset..l.b_offset {
                        p[i] = normal.sample(&mut rng);
                    }
                }
            }
            ModelSpec::Quadratic { dim, .. } => {
                for i in 0..*dim {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    p[i] = scale * z;
                }
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets() {
        let m = ModelSpec::mlp(vec![2, 8, 1], Activation::Tanh).unwrap();
        assert_eq!(m.dim(), 2 * 8 + 8 + 8 + 1);
        assert_eq!(m.head_split(), 24);
        let ModelSpec::Mlp(spec) = &m else { unreachable!() };
        let layers = spec.layers();
        assert_eq!(layers[0].b_offset, 16);
        assert_eq!(layers[1].w_offset, 24);
        assert_eq!(layers[1].b_offset, 32);
        assert_eq!(m.layout(), "mlp:2-8-1:tanh:head=24");
    }

    #[test]
    fn head_split_range_checked() {
        let m = ModelSpec::quadratic(3).unwrap();
        assert!(m.clone().with_head_split(3).is_ok());
        assert!(m.with_head_split(4).is_err());
    }

    #[test]
    fn relu_rejected() {
        assert!(matches!(Activation::parse("relu"), Err(Error::Config(_))));
    }

    #[test]
    fn filter_groups_cover_every_parameter_once() {
        let m = ModelSpec::mlp(vec![3, 4, 2], Activation::Softplus).unwrap();
        let mut seen = vec![0; m.dim()];
        for g in m.filter_groups() {
            for i in g {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
}
