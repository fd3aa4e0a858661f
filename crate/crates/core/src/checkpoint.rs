//! Versioned parameter checkpoints: a short text header followed by the
//! flat parameter vector as little-endian `f64`s.
//!
//! ```text
//! SHARPMAML1
//! layout=mlp:1-40-40-1:tanh:head=1680
//! dim=1761
//! seed=0
//! iter=2000
//! grad_sq_sum=3f50624dd2f1a9fc
//! count=2000
//! END
//! <dim × 8 bytes>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::meta::TrainState;
use crate::params::ParamVector;

pub const MAGIC: &str = "SHARPMAML1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layout: String,
    pub seed: u64,
    pub iter: u64,
    /// Running sum and count of the convergence trace, so a resumed run
    /// continues its running average exactly.
    pub grad_sq_sum: f64,
    pub count: u64,
    pub theta: ParamVector,
}

impl Checkpoint {
    pub fn from_state(layout: String, seed: u64, state: &TrainState) -> Self {
        Checkpoint {
            layout,
            seed,
            iter: state.iter,
            grad_sq_sum: state.trace.sum,
            count: state.trace.count,
            theta: state.theta.clone(),
        }
    }

    /// Training state to resume from; the per-iteration history is not stored.
    pub fn to_state(&self) -> TrainState {
        let mut state = TrainState::new(self.theta.clone());
        state.iter = self.iter;
        state.trace.sum = self.grad_sq_sum;
        state.trace.count = self.count;
        state
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        write!(
            w,
            "{MAGIC}\nlayout={}\ndim={}\nseed={}\niter={}\ngrad_sq_sum={:016x}\ncount={}\nEND\n",
            self.layout,
            self.theta.dim(),
            self.seed,
            self.iter,
            self.grad_sq_sum.to_bits(),
            self.count
        )?;
        let mut bytes = Vec::with_capacity(self.theta.dim() * 8);
        for x in self.theta.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::config("checkpoint: truncated header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(Error::config("checkpoint: missing SHARPMAML1 magic"));
        }
        let (mut layout, mut dim, mut seed, mut iter, mut sum, mut count) = (None, None, None, None, None, None);
        loop {
            let l = next_line(&mut r)?;
            if l == "END" {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| Error::config(format!("checkpoint: bad header line `{l}`")))?;
            let bad = || Error::config(format!("checkpoint: bad value for `{k}`"));
            match k {
                "layout" => layout = Some(v.to_string()),
                "dim" => dim = Some(v.parse::<usize>().map_err(|_| bad())?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                "iter" => iter = Some(v.parse::<u64>().map_err(|_| bad())?),
                "grad_sq_sum" => sum = Some(f64::from_bits(u64::from_str_radix(v, 16).map_err(|_| bad())?)),
                "count" => count = Some(v.parse::<u64>().map_err(|_| bad())?),
                _ => return Err(Error::config(format!("checkpoint: unknown header key `{k}`"))),
            }
        }
        let missing = |k: &str| Error::config(format!("checkpoint: header lacks `{k}`"));
        let dim = dim.ok_or_else(|| missing("dim"))?;
        let mut bytes = vec![0u8; dim * 8];
        r.read_exact(&mut bytes).map_err(|_| Error::config("checkpoint: parameter block shorter than dim"))?;
        let theta = ParamVector::from_vec(
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect(),
        );
        Ok(Checkpoint {
            layout: layout.ok_or_else(|| missing("layout"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            iter: iter.unwrap_or(0),
            grad_sq_sum: sum.unwrap_or(0.0),
            count: count.unwrap_or(0),
            theta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read_from(std::fs::File::open(path)?)
    }

    /// Fails unless the checkpoint was written for a model with `layout`.
    pub fn expect_layout(&self, layout: &str) -> Result<()> {
        if self.layout != layout {
            return Err(Error::config(format!(
                "checkpoint layout `{}` does not match the configured model `{layout}`",
                self.layout
            )));
        }
        Ok(())
    }
}
