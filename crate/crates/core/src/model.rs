//! The generative classifier: a stack of invertible blocks ending in a
//! cosine pooling, with one unit-variance Gaussian per class in latent space.

use std::f64::consts::PI;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{Block, CouplingBlock, CouplingSpec, DctPool, Direction, Front};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{stream, Purpose};
use crate::tensor::{logsumexp, LinearOp, Tape, Tensor, Var};

/// Samples per tape when running inference over a batch.
pub const INFERENCE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    Coupling { kernel: usize, hidden: usize },
    Downsample { kernel: usize, hidden: usize },
    Haar,
    Checkerboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `[C, H, W]` of one input.
    pub input: [usize; 3],
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub expand: usize,
    /// Rank of the non-DC part of the class means.
    pub prototypes: usize,
    pub clamp: f64,
    pub s0: f64,
    pub gamma_init: f64,
    /// Std of the initial class means per latent coordinate.
    pub mu_init_scale: f64,
    /// `log p(y)`; uniform when absent.
    pub log_priors: Option<Vec<f64>>,
    pub seed: u64,
}

impl ArchSpec {
    fn base(input: [usize; 3], classes: usize, blocks: Vec<BlockSpec>) -> Self {
        Self {
            input,
            classes,
            blocks,
            expand: 2,
            prototypes: 8,
            clamp: 2.0,
            s0: 0.1,
            gamma_init: 10.0,
            mu_init_scale: 0.3,
            log_priors: None,
            seed: 0,
        }
    }

    /// Entry downsampling coupling with a 7×7 subnet, Haar, two couplings,
    /// a second downsampling coupling and two more couplings.
    pub fn desk(input: [usize; 3], classes: usize, hidden: usize, entry_hidden: usize) -> Self {
        use BlockSpec::*;
        Self::base(
            input,
            classes,
            vec![
                Downsample { kernel: 7, hidden: entry_hidden },
                Haar,
                Coupling { kernel: 3, hidden },
                Coupling { kernel: 3, hidden },
                Downsample { kernel: 3, hidden },
                Coupling { kernel: 3, hidden },
                Coupling { kernel: 3, hidden },
            ],
        )
    }

    /// Two couplings over a 2-dimensional input (a 1×1 image with 2 channels).
    pub fn toy2d(classes: usize, hidden: usize) -> Self {
        let c = BlockSpec::Coupling { kernel: 1, hidden };
        let mut a = Self::base([2, 1, 1], classes, vec![c.clone(), c]);
        a.prototypes = 1;
        a
    }

    /// Resolved block sequence with the shape after each block.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let [mut c, mut h, mut w] = self.input;
        let mut out = vec![(c, h, w)];
        for b in &self.blocks {
            match b {
                BlockSpec::Coupling { .. } => {
                    if c % 2 != 0 {
                        return shape_err(format!("coupling over odd channel count {}", c));
                    }
                }
                _ => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return shape_err(format!("cannot downsample {}×{}", h, w));
                    }
                    c *= 4;
                    h /= 2;
                    w /= 2;
                }
            }
            out.push((c, h, w));
        }
        if h != w {
            return shape_err(format!("final maps must be square, got {}×{}", h, w));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input));
        }
        if self.classes == 0 {
            return bad("at least one class is required".into());
        }
        if !(self.clamp > 0.0 && self.s0 > 0.0 && self.mu_init_scale >= 0.0) {
            return bad("clamp and s0 must be positive, mu_init_scale non-negative".into());
        }
        if self.expand == 0 {
            return bad("expand must be at least 1".into());
        }
        for b in &self.blocks {
            if let BlockSpec::Coupling { kernel, hidden } | BlockSpec::Downsample { kernel, hidden } = b {
                if ![1, 3, 7].contains(kernel) || *hidden == 0 {
                    return bad(format!("unsupported block {:?}", b));
                }
            }
        }
        if let Some(w) = &self.log_priors {
            if w.len() != self.classes {
                return bad(format!("{} log priors for {} classes", w.len(), self.classes));
            }
            let total: f64 = w.iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("class priors sum to {}", total));
            }
        }
        self.shapes().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Class means `μ_y = [mu_mean_y ; Σ_k α_yk μ_k]` and log priors.
#[derive(Clone, Debug)]
pub struct GmmHead {
    pub classes: usize,
    pub dim: usize,
    pub dim_mean: usize,
    pub rank: usize,
    pub mu_mean: ParamId,
    /// `(prototypes [K, D_rest], alpha [M, K])`, absent when `D_rest = 0`.
    pub low_rank: Option<(ParamId, ParamId)>,
    pub log_priors: Vec<f64>,
}

impl GmmHead {
    pub fn dim_rest(&self) -> usize {
        self.dim - self.dim_mean
    }

    pub fn mu_var(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let mean = p.var(self.mu_mean);
        match self.low_rank {
            None => Ok(mean),
            Some((proto, alpha)) => {
                let rest = tape.matmul(p.var(alpha), p.var(proto))?;
                tape.concat(mean, rest, 1)
            }
        }
    }

    /// `[M, D]` matrix of class means.
    pub fn mu(&self, store: &ParamStore) -> Tensor {
        let mean = store.get(self.mu_mean);
        let Some((proto, alpha)) = self.low_rank else {
            return mean.clone();
        };
        let rest = crate::tensor::matmul(store.get(alpha), store.get(proto)).expect("head shapes");
        let (dm, dr) = (self.dim_mean, self.dim_rest());
        let mut data = Vec::with_capacity(self.classes * self.dim);
        for y in 0..self.classes {
            data.extend_from_slice(&mean.data()[y * dm..(y + 1) * dm]);
            data.extend_from_slice(&rest.data()[y * dr..(y + 1) * dr]);
        }
        Tensor::new(vec![self.classes, self.dim], data).expect("head shapes")
    }

    pub fn assemble_mu(&self, store: &ParamStore, y: usize) -> Result<Vec<f64>> {
        if y >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "class {} of {}",
                y, self.classes
            )));
        }
        Ok(self.mu(store).rows(y, 1)?.into_data())
    }

    pub fn log_priors_tensor(&self) -> Tensor {
        Tensor::from_vec(self.log_priors.clone())
    }
}

/// Scores of one input under the class-conditional model.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `log q(x|y)` per class.
    pub class_log_likelihoods: Vec<f64>,
    /// `log q(x)`.
    pub marginal: f64,
    pub posterior: Vec<f64>,
    pub argmax: usize,
    pub confidence: f64,
}

/// `log N(z; μ, I)` up to nothing: includes the `(D/2) ln 2π` constant.
pub fn gaussian_log_density(z: &[f64], mu: &[f64]) -> f64 {
    let sq: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

/// Builds a [`Prediction`] from a latent code, its logdet and the head.
pub fn predict_from_latent(z: &[f64], logdet: f64, mu: &Tensor, log_priors: &[f64]) -> Prediction {
    let m = log_priors.len();
    let d = z.len();
    let cll: Vec<f64> = (0..m)
        .map(|y| gaussian_log_density(z, &mu.data()[y * d..(y + 1) * d]) + logdet)
        .collect();
    let joint: Vec<f64> = cll.iter().zip(log_priors).map(|(a, w)| a + w).collect();
    let marginal = logsumexp(&joint);
    let posterior: Vec<f64> = joint.iter().map(|j| (j - marginal).exp()).collect();
    let (argmax, confidence) = posterior
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
    Prediction {
        class_log_likelihoods: cll,
        marginal,
        posterior,
        argmax,
        confidence,
    }
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub arch: ArchSpec,
    pub params: ParamStore,
    pub blocks: Vec<Block>,
    pub head: GmmHead,
    /// `(C, side)` of the maps entering the cosine pooling.
    pub pooled: (usize, usize),
    dct_fwd: Arc<DctPool>,
    dct_inv: Arc<DctPool>,
}

/// Seed of the fixed mixing matrix of block `i`.
fn mixing_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

impl FlowModel {
    pub fn new(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.shapes()?;
        let mut rng = stream(arch.seed, Purpose::Init, 0);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        for (i, b) in arch.blocks.iter().enumerate() {
            let (c, _, _) = shapes[i];
            let coupling = |front, kernel, hidden| CouplingSpec {
                c_in: c,
                front,
                hidden,
                expand: arch.expand,
                kernel,
                clamp: arch.clamp,
                s0: arch.s0,
                gamma_init: arch.gamma_init,
                mix_seed: mixing_seed(arch.seed, i),
            };
            let block = match *b {
                BlockSpec::Haar => Block::Haar,
                BlockSpec::Checkerboard => Block::Checkerboard,
                BlockSpec::Coupling { kernel, hidden } => Block::Coupling(CouplingBlock::new(
                    coupling(Front::Identity, kernel, hidden),
                    &format!("block{i}"),
                    &mut params,
                    &mut rng,
                )?),
                BlockSpec::Downsample { kernel, hidden } => {
                    let front = if c % 2 == 0 { Front::Checker } else { Front::CheckerSpatial };
                    Block::Coupling(CouplingBlock::new(
                        coupling(front, kernel, hidden),
                        &format!("block{i}"),
                        &mut params,
                        &mut rng,
                    )?)
                }
            };
            blocks.push(block);
        }
        let (c, side, _) = *shapes.last().expect("input shape");
        let dim = c * side * side;
        let m = arch.classes;
        let dim_rest = dim - c;
        let k = arch.prototypes.max(1);
        let normal = Normal::new(0.0, arch.mu_init_scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * normal.sample(&mut rng)).collect()
        };
        let mu_mean = params.add("head.mu_mean", Tensor::new(vec![m, c], draw(m * c, 1.0))?, false);
        let low_rank = (dim_rest > 0).then(|| -> Result<(ParamId, ParamId)> {
            let proto = params.add(
                "head.prototypes",
                Tensor::new(vec![k, dim_rest], draw(k * dim_rest, 1.0))?,
                false,
            );
            let alpha_scale = 1.0 / (arch.mu_init_scale.max(1e-12) * (k as f64).sqrt());
            let alpha = params.add(
                "head.alpha",
                Tensor::new(vec![m, k], draw(m * k, alpha_scale))?,
                false,
            );
            Ok((proto, alpha))
        });
        let low_rank = low_rank.transpose()?;
        let log_priors = arch
            .log_priors
            .clone()
            .unwrap_or_else(|| vec![-(m as f64).ln(); m]);
        let head = GmmHead {
            classes: m,
            dim,
            dim_mean: c,
            rank: k,
            mu_mean,
            low_rank,
            log_priors,
        };
        Ok(Self {
            arch,
            params,
            blocks,
            head,
            pooled: (c, side),
            dct_fwd: Arc::new(DctPool::new(c, side, Direction::Forward)),
            dct_inv: Arc::new(DctPool::new(c, side, Direction::Inverse)),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.head.dim
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input.iter().product()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.arch.input;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return shape_err(format!("model expects [N, {}, {}, {}], got {:?}", c, h, w, shape));
        }
        Ok(())
    }

    /// Maps up to the pooling, returning the last feature maps and logdet.
    pub fn features_var(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check_input(tape.shape(x))?;
        let n = tape.shape(x)[0];
        let mut h = x;
        let mut logdet: Option<Var> = None;
        for b in &self.blocks {
            let (y, ld) = b.forward(tape, p, h)?;
            h = y;
            if let Some(ld) = ld {
                logdet = Some(match logdet {
                    None => ld,
                    Some(acc) => tape.add(acc, ld)?,
                });
            }
        }
        let logdet = match logdet {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[n])),
        };
        Ok((h, logdet))
    }

    /// `z = f(x)` as `[N, D]` and per-sample logdet `[N]`.
    pub fn encode_var(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let (h, logdet) = self.features_var(tape, p, x)?;
        let z = tape.linear(h, self.dct_fwd.clone() as Arc<dyn LinearOp>)?;
        Ok((z, logdet))
    }

    pub fn decode_var(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let d = self.latent_dim();
        if tape.shape(z).len() != 2 || tape.shape(z)[1] != d {
            return shape_err(format!("latent codes must be [N, {}], got {:?}", d, tape.shape(z)));
        }
        let mut h = tape.linear(z, self.dct_inv.clone() as Arc<dyn LinearOp>)?;
        for b in self.blocks.iter().rev() {
            h = b.inverse(tape, p, h)?.0;
        }
        Ok(h)
    }

    fn chunks(&self, n: usize) -> Vec<(usize, usize)> {
        (0..n)
            .step_by(INFERENCE_CHUNK)
            .map(|s| (s, INFERENCE_CHUNK.min(n - s)))
            .collect()
    }

    /// Latent codes `[N, D]` and logdets.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_input(x.shape())?;
        let parts: Vec<Result<(Tensor, Vec<f64>)>> = self
            .chunks(x.shape()[0])
            .into_par_iter()
            .map(|(s, len)| {
                let mut tape = Tape::new();
                let p = self.params.bind(&mut tape, false);
                let xv = tape.constant(x.rows(s, len)?);
                let (z, ld) = self.encode_var(&mut tape, &p, xv)?;
                Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
            })
            .collect();
        let mut zs = Vec::new();
        let mut lds = Vec::new();
        for part in parts {
            let (z, ld) = part?;
            zs.extend(z.into_data());
            lds.extend(ld);
        }
        let n = lds.len();
        Ok((Tensor::new(vec![n, self.latent_dim()], zs)?, lds))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let d = self.latent_dim();
        if z.shape().len() != 2 || z.shape()[1] != d {
            return shape_err(format!("latent codes must be [N, {}], got {:?}", d, z.shape()));
        }
        let parts: Vec<Result<Tensor>> = self
            .chunks(z.shape()[0])
            .into_par_iter()
            .map(|(s, len)| {
                let mut tape = Tape::new();
                let p = self.params.bind(&mut tape, false);
                let zv = tape.constant(z.rows(s, len)?);
                let x = self.decode_var(&mut tape, &p, zv)?;
                Ok(tape.value(x).clone())
            })
            .collect();
        let mut data = Vec::new();
        for part in parts {
            data.extend(part?.into_data());
        }
        let [c, h, w] = self.arch.input;
        Tensor::new(vec![z.shape()[0], c, h, w], data)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        let (z, ld) = self.encode(x)?;
        Ok(self.predict_latent(&z, &ld))
    }

    pub fn predict_latent(&self, z: &Tensor, logdet: &[f64]) -> Vec<Prediction> {
        let mu = self.head.mu(&self.params);
        let d = self.latent_dim();
        logdet
            .iter()
            .enumerate()
            .map(|(i, &ld)| predict_from_latent(&z.data()[i * d..(i + 1) * d], ld, &mu, &self.head.log_priors))
            .collect()
    }

    pub fn class_log_likelihood(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict(x)?.into_iter().map(|p| p.class_log_likelihoods).collect())
    }

    pub fn marginal_log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.into_iter().map(|p| p.marginal).collect())
    }

    pub fn posterior(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.predict(x)?.into_iter().map(|p| p.posterior).collect())
    }

    /// `decode(μ_y + ε)` with `ε ~ N(0, I)` for each requested class.
    pub fn sample<R: rand::Rng>(&self, classes: &[usize], rng: &mut R) -> Result<Tensor> {
        let d = self.latent_dim();
        let mut z = Vec::with_capacity(classes.len() * d);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for &y in classes {
            let mu = self.head.assemble_mu(&self.params, y)?;
            z.extend(mu.iter().map(|m| m + normal.sample(rng)));
        }
        self.decode(&Tensor::new(vec![classes.len(), d], z)?)
    }

    /// Number of coupling blocks.
    pub fn couplings(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Coupling(_))).count()
    }
}
