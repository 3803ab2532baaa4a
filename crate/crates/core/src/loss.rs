//! The training objective `L_X + β·L_Y` and its helpers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Reduce, Tape, Tensor, Var};

/// Weight of the classification term; `Infinite` trains on `L_Y` alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn new(v: f64) -> Result<Self> {
        if v.is_nan() || v < 0.0 {
            return Err(Error::InvalidArgument(format!("beta must be non-negative, got {}", v)));
        }
        Ok(if v.is_infinite() { Beta::Infinite } else { Beta::Finite(v) })
    }

    pub fn is_zero(self) -> bool {
        self == Beta::Finite(0.0)
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(v) => write!(f, "{}", v),
            Beta::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "Inf" | "infinity" => Ok(Beta::Infinite),
            t => Beta::new(
                t.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad beta '{}'", s)))?,
            ),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(v) => s.serialize_f64(*v),
            Beta::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(v) => Beta::new(v),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Batch means of both terms and their combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub l_x: f64,
    pub l_y: f64,
    pub total: f64,
    pub beta: Beta,
}

/// `−½‖z_n − μ_y‖² + w_y` as `[N, M]`.
pub fn logits_var(tape: &mut Tape, z: Var, mu: Var, log_priors: Var) -> Result<Var> {
    let sq = tape.sq_dist(z, mu)?;
    let half = tape.scale(sq, -0.5)?;
    tape.add_along(half, log_priors, 1)
}

/// Per-sample `−logdet − logsumexp_y(−½‖v_y‖² + w_y)`, as `[N]`.
pub fn loss_x_per_sample_var(tape: &mut Tape, logits: Var, logdet: Var) -> Result<Var> {
    let lse = tape.reduce(logits, Reduce::LogSumExp, 1)?;
    let s = tape.add(lse, logdet)?;
    tape.neg(s)
}

/// Batch mean of `−Σ_y target_y · logsoftmax_y(logits)`.
pub fn loss_y_var(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    if targets.shape() != tape.shape(logits) {
        return Err(Error::Shape(format!(
            "targets {:?} for logits {:?}",
            targets.shape(),
            tape.shape(logits)
        )));
    }
    let n = targets.shape()[0] as f64;
    let lsm = tape.reduce(logits, Reduce::LogSoftmax, 1)?;
    let t = tape.constant(targets.clone());
    let prod = tape.mul(lsm, t)?;
    let s = tape.sum_all(prod)?;
    tape.scale(s, -1.0 / n)
}

/// `l_x + β·l_y` on the tape; either input may be absent when its weight is zero.
pub fn ib_total_var(tape: &mut Tape, l_x: Option<Var>, l_y: Option<Var>, beta: Beta) -> Result<Var> {
    let missing = || Error::InvalidArgument("loss term required by beta is missing".into());
    match beta {
        Beta::Infinite => l_y.ok_or_else(missing),
        Beta::Finite(b) if b == 0.0 => l_x.ok_or_else(missing),
        Beta::Finite(b) => {
            let (lx, ly) = (l_x.ok_or_else(missing)?, l_y.ok_or_else(missing)?);
            let weighted = tape.scale(ly, b)?;
            tape.add(lx, weighted)
        }
    }
}

fn plain_logits(z: &[f64], mu: &Tensor, log_priors: &[f64]) -> Vec<f64> {
    let d = z.len();
    log_priors
        .iter()
        .enumerate()
        .map(|(y, w)| {
            let sq: f64 = z
                .iter()
                .zip(&mu.data()[y * d..(y + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            -0.5 * sq + w
        })
        .collect()
}

/// Mixture negative log-likelihood of one code without the `(D/2) ln 2π` term.
pub fn loss_x(z: &[f64], logdet: f64, mu: &Tensor, log_priors: &[f64]) -> Result<f64> {
    if !z.iter().all(|v| v.is_finite()) || !logdet.is_finite() {
        return Err(Error::NonFinite("loss_x input".into()));
    }
    Ok(-logdet - logsumexp(&plain_logits(z, mu, log_priors)))
}

/// Cross-entropy of one code against a label distribution.
pub fn loss_y(z: &[f64], target: &[f64], mu: &Tensor, log_priors: &[f64]) -> Result<f64> {
    let total: f64 = target.iter().sum();
    if target.len() != log_priors.len() || target.iter().any(|&t| t < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("target is not a distribution over classes".into()));
    }
    let logits = plain_logits(z, mu, log_priors);
    let lse = logsumexp(&logits);
    Ok(-target.iter().zip(&logits).map(|(t, l)| t * (l - lse)).sum::<f64>())
}

pub fn ib_total(l_x: f64, l_y: f64, beta: Beta) -> f64 {
    match beta {
        Beta::Infinite => l_y,
        Beta::Finite(b) if b == 0.0 => l_x,
        Beta::Finite(b) => l_x + b * l_y,
    }
}

/// Negative log2-likelihood per dimension; the quantized convention adds 8.
pub fn bits_per_dim(marginal: f64, dim: usize, quantized: bool) -> Result<f64> {
    if dim == 0 {
        return Err(Error::InvalidArgument("bits/dim of a zero-dimensional input".into()));
    }
    let bpd = -marginal / (dim as f64 * std::f64::consts::LN_2);
    Ok(if quantized { bpd + 8.0 } else { bpd })
}

/// Adds i.i.d. `Uniform[0, amplitude)` noise.
pub fn dequantize<R: Rng>(x: &Tensor, amplitude: f64, rng: &mut R) -> Result<Tensor> {
    if !(amplitude >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative noise amplitude {}", amplitude)));
    }
    let mut out = x.clone();
    if amplitude > 0.0 {
        for v in out.data_mut() {
            *v += amplitude * rng.gen::<f64>();
        }
    }
    Ok(out)
}

/// `(1 − α)·onehot(y) + α/M`.
pub fn smooth_labels(y: usize, classes: usize, alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("label smoothing {} outside [0, 1)", alpha)));
    }
    if y >= classes {
        return Err(Error::InvalidArgument(format!("label {} of {} classes", y, classes)));
    }
    let mut v = vec![alpha / classes as f64; classes];
    v[y] += 1.0 - alpha;
    Ok(v)
}
