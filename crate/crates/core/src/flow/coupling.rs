use std::sync::Arc;

use rand::Rng;

use super::ortho::{sample_orthogonal, OrthoMixing};
use super::subnet::{Subnet, SubnetSpec};
use super::transforms::{ChannelPermute, Direction, PatchKind, PatchTransform};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{LinearOp, Tape, Tensor, Var};

/// How the input is split into the conditioning half `u1` and the
/// transformed half `u2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Front {
    /// Channel halves at the input resolution.
    Identity,
    /// Channel halves, both reordered to half resolution by the checkerboard.
    Checker,
    /// Checkerboard slots split by patch diagonal, so any channel count works.
    /// `u1` holds slots (0,0) and (1,1) of every patch.
    CheckerSpatial,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingSpec {
    pub c_in: usize,
    pub front: Front,
    pub hidden: usize,
    pub expand: usize,
    /// Side of the subnet's middle convolution.
    pub kernel: usize,
    pub clamp: f64,
    pub s0: f64,
    pub gamma_init: f64,
    pub mix_seed: u64,
}

impl CouplingSpec {
    pub fn c_out(&self) -> usize {
        match self.front {
            Front::Identity => self.c_in,
            Front::Checker | Front::CheckerSpatial => 4 * self.c_in,
        }
    }

    pub fn downsamples(&self) -> bool {
        self.front != Front::Identity
    }
}

/// Affine coupling followed by a learned global affine and a fixed
/// orthogonal channel mixing.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub spec: CouplingSpec,
    pub subnet: Subnet,
    pub gamma: ParamId,
    pub t_global: ParamId,
    pub mixing: OrthoMixing,
    mix_fwd: Tensor,
    mix_inv: Tensor,
    perm: Option<(Arc<ChannelPermute>, Arc<ChannelPermute>)>,
}

impl CouplingBlock {
    pub fn new<R: Rng>(
        spec: CouplingSpec,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.c_in == 0 {
            return Err(Error::InvalidArgument("coupling over zero channels".into()));
        }
        if spec.front != Front::CheckerSpatial && !spec.c_in.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "coupling needs an even channel count, got {}",
                spec.c_in
            )));
        }
        if !(spec.clamp > 0.0) || !(spec.s0 > 0.0) {
            return Err(Error::InvalidArgument("clamp and s0 must be positive".into()));
        }
        let c = spec.c_in;
        let c_out = spec.c_out();
        let cond_channels = match spec.front {
            Front::Identity | Front::Checker => c / 2,
            Front::CheckerSpatial => c,
        };
        let subnet = Subnet::new(
            SubnetSpec {
                c_in: cond_channels,
                hidden: spec.hidden,
                expand: spec.expand,
                c_out,
                kernel: spec.kernel,
                stride: if spec.downsamples() { 2 } else { 1 },
            },
            &format!("{prefix}.subnet"),
            store,
            rng,
        );
        let gamma = store.add(
            format!("{prefix}.gamma"),
            Tensor::full(&[c_out], spec.gamma_init),
            true,
        );
        let t_global = store.add(format!("{prefix}.t_global"), Tensor::zeros(&[c_out]), false);
        let mixing = sample_orthogonal(c_out, spec.mix_seed)?;
        let perm = (spec.front == Front::CheckerSpatial).then(|| {
            let mut p: Vec<usize> = (0..c).flat_map(|ch| [4 * ch, 4 * ch + 3]).collect();
            p.extend((0..c).flat_map(|ch| [4 * ch + 1, 4 * ch + 2]));
            let fwd = ChannelPermute::new(p);
            let inv = fwd.inverse();
            (Arc::new(fwd), Arc::new(inv))
        });
        Ok(Self {
            spec,
            subnet,
            gamma,
            t_global,
            mix_fwd: mixing.kernel(false),
            mix_inv: mixing.kernel(true),
            mixing,
            perm,
        })
    }

    pub fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if c != self.spec.c_in {
            return Err(Error::Shape(format!(
                "coupling for {} channels got {}",
                self.spec.c_in, c
            )));
        }
        if self.spec.downsamples() {
            if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
                return Err(Error::Shape(format!("cannot downsample {}×{}", h, w)));
            }
            Ok((4 * c, h / 2, w / 2))
        } else {
            Ok((c, h, w))
        }
    }

    fn split(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let x = match self.spec.front {
            Front::Identity => x,
            Front::Checker => tape.linear(x, PatchTransform::new(PatchKind::Checkerboard, Direction::Forward))?,
            Front::CheckerSpatial => {
                let xc = tape.linear(x, PatchTransform::new(PatchKind::Checkerboard, Direction::Forward))?;
                let p = self.perm.as_ref().expect("spatial split has a permutation");
                tape.linear(xc, p.0.clone() as Arc<dyn LinearOp>)?
            }
        };
        let half = tape.shape(x)[1] / 2;
        Ok((tape.slice(x, 1, 0, half)?, tape.slice(x, 1, half, half)?))
    }

    fn merge(&self, tape: &mut Tape, u1: Var, u2: Var) -> Result<Var> {
        let x = tape.concat(u1, u2, 1)?;
        match self.spec.front {
            Front::Identity => Ok(x),
            Front::Checker => tape.linear(x, PatchTransform::new(PatchKind::Checkerboard, Direction::Inverse)),
            Front::CheckerSpatial => {
                let p = self.perm.as_ref().expect("spatial split has a permutation");
                let xc = tape.linear(x, p.1.clone() as Arc<dyn LinearOp>)?;
                tape.linear(xc, PatchTransform::new(PatchKind::Checkerboard, Direction::Inverse))
            }
        }
    }

    /// Subnet input built from `u1` alone.
    fn condition(&self, tape: &mut Tape, u1: Var) -> Result<Var> {
        match self.spec.front {
            Front::Identity => Ok(u1),
            Front::Checker => tape.linear(u1, PatchTransform::new(PatchKind::Checkerboard, Direction::Inverse)),
            Front::CheckerSpatial => {
                let zeros = tape.constant(Tensor::zeros(tape.shape(u1)));
                self.merge(tape, u1, zeros)
            }
        }
    }

    /// `(log s, t)` for the transformed half.
    fn coefficients(&self, tape: &mut Tape, p: &Bound, u1: Var) -> Result<(Var, Var)> {
        let cond = self.condition(tape, u1)?;
        let h = self.subnet.forward(tape, p, cond)?;
        let k = tape.shape(h)[1] / 2;
        let s_logit = tape.slice(h, 1, 0, k)?;
        let t = tape.slice(h, 1, k, k)?;
        let squashed = tape.tanh(s_logit)?;
        let log_s = tape.scale(squashed, self.spec.clamp)?;
        Ok((log_s, t))
    }

    /// Per-channel `log s_global`.
    fn global_log_scale(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let sp = tape.softplus(p.var(self.gamma))?;
        let s = tape.scale(sp, self.spec.s0)?;
        tape.log(s)
    }

    /// Logdet of the global affine for a map of `h×w`, as a one-element var.
    fn global_logdet(&self, tape: &mut Tape, log_sg: Var, hw: usize) -> Result<Var> {
        let total = tape.sum_all(log_sg)?;
        tape.scale(total, hw as f64)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let (u1, u2) = self.split(tape, x)?;
        let (log_s, t) = self.coefficients(tape, p, u1)?;
        let s = tape.exp(log_s)?;
        let scaled = tape.mul(u2, s)?;
        let v2 = tape.add(scaled, t)?;
        let y = tape.concat(u1, v2, 1)?;
        let hw = tape.shape(y)[2] * tape.shape(y)[3];

        let log_sg = self.global_log_scale(tape, p)?;
        let sg = tape.exp(log_sg)?;
        let y = tape.mul_along(y, sg, 1)?;
        let y = tape.add_along(y, p.var(self.t_global), 1)?;
        let mix = tape.constant(self.mix_fwd.clone());
        let y = tape.conv2d(y, mix, 1, 0)?;

        let ld = tape.sum_per_sample(log_s)?;
        let gd = self.global_logdet(tape, log_sg, hw)?;
        Ok((y, tape.add(ld, gd)?))
    }

    /// Inverse map and its logdet (the negated forward logdet).
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<(Var, Var)> {
        let hw = tape.shape(y)[2] * tape.shape(y)[3];
        let mix = tape.constant(self.mix_inv.clone());
        let y = tape.conv2d(y, mix, 1, 0)?;
        let log_sg = self.global_log_scale(tape, p)?;
        let neg = tape.neg(log_sg)?;
        let inv_sg = tape.exp(neg)?;
        let y = tape.sub_along(y, p.var(self.t_global), 1)?;
        let y = tape.mul_along(y, inv_sg, 1)?;

        let half = tape.shape(y)[1] / 2;
        let v1 = tape.slice(y, 1, 0, half)?;
        let v2 = tape.slice(y, 1, half, half)?;
        let (log_s, t) = self.coefficients(tape, p, v1)?;
        let shifted = tape.sub(v2, t)?;
        let neg_ls = tape.neg(log_s)?;
        let inv_s = tape.exp(neg_ls)?;
        let u2 = tape.mul(shifted, inv_s)?;
        let x = self.merge(tape, v1, u2)?;

        let ld = tape.sum_per_sample(log_s)?;
        let gd = self.global_logdet(tape, log_sg, hw)?;
        let total = tape.add(ld, gd)?;
        Ok((x, tape.neg(total)?))
    }

    /// Runs the block outside any training graph.
    pub fn apply(
        &self,
        store: &ParamStore,
        x: &Tensor,
        direction: Direction,
    ) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, ld) = match direction {
            Direction::Forward => self.forward(&mut tape, &p, xv)?,
            Direction::Inverse => self.inverse(&mut tape, &p, xv)?,
        };
        Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn spec(c_in: usize, front: Front) -> CouplingSpec {
        CouplingSpec {
            c_in,
            front,
            hidden: 6,
            expand: 2,
            kernel: 3,
            clamp: 2.0,
            s0: 0.1,
            gamma_init: 10.0,
            mix_seed: 9,
        }
    }

    fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v += scale * g;
            }
        }
    }

    fn random_x(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn s_global_at_init() {
        let v = 0.1 * softplus(10.0);
        assert!((v - 0.1 * (1.0 + 10f64.exp()).ln()).abs() < 1e-15);
        assert!((v - 1.0000045).abs() < 1e-6);
    }

    #[test]
    fn identity_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mut sp = spec(4, Front::Identity);
        sp.mix_seed = 0;
        let block = CouplingBlock::new(sp, "b", &mut store, &mut rng).unwrap();
        // softplus(γ) = 10 makes s_global exactly 1.
        let gamma = (10f64.exp() - 1.0).ln();
        store.get_mut(block.gamma).data_mut().fill(gamma);
        let x = random_x(&[2, 4, 3, 3], 2);
        let (y, ld) = block.apply(&store, &x, Direction::Forward).unwrap();
        assert!(ld.iter().all(|v| v.abs() < 1e-12));
        // Only the fixed rotation remains.
        let mut expect = vec![0.0; x.numel()];
        for s in 0..2 {
            for o in 0..4 {
                for i in 0..4 {
                    for k in 0..9 {
                        expect[(s * 4 + o) * 9 + k] += block.mixing.q[o * 4 + i] * x.data()[(s * 4 + i) * 9 + k];
                    }
                }
            }
        }
        let expect = Tensor::new(x.shape().to_vec(), expect).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(CouplingBlock::new(spec(3, Front::Identity), "b", &mut store, &mut rng).is_err());
        assert!(CouplingBlock::new(spec(3, Front::Checker), "b", &mut store, &mut rng).is_err());
        assert!(CouplingBlock::new(spec(3, Front::CheckerSpatial), "b", &mut store, &mut rng).is_ok());
    }

    #[test]
    fn roundtrip_for_every_front() {
        for (i, (front, c)) in [(Front::Identity, 4), (Front::Checker, 2), (Front::CheckerSpatial, 1), (Front::CheckerSpatial, 3)]
            .into_iter()
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let mut store = ParamStore::new();
            let block = CouplingBlock::new(spec(c, front), "b", &mut store, &mut rng).unwrap();
            randomize(&mut store, 100 + i as u64, 0.3);
            let x = random_x(&[3, c, 4, 4], 5);
            let (y, ld) = block.apply(&store, &x, Direction::Forward).unwrap();
            let (co, h, w) = block.out_shape(c, 4, 4).unwrap();
            assert_eq!(y.shape(), &[3, co, h, w]);
            let (back, ld_inv) = block.apply(&store, &y, Direction::Inverse).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-9, "{:?}: {}", front, back.max_abs_diff(&x));
            for (a, b) in ld.iter().zip(&ld_inv) {
                assert!((a + b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn realized_scales_respect_the_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = CouplingBlock::new(spec(2, Front::Identity), "b", &mut store, &mut rng).unwrap();
        let x = random_x(&[4, 2, 3, 3], 6);
        let log_scales = |store: &ParamStore| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let (u1, _) = block.split(&mut tape, xv).unwrap();
            let (log_s, _) = block.coefficients(&mut tape, &p, u1).unwrap();
            tape.value(log_s).data().to_vec()
        };
        randomize(&mut store, 4, 0.3);
        assert!(log_scales(&store).iter().all(|v| v.abs() < 2.0));
        // Saturated tanh rounds to ±1, so the bound is only closed in f64.
        randomize(&mut store, 5, 50.0);
        assert!(log_scales(&store).iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn init_logdet_is_global_scale_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = CouplingBlock::new(spec(2, Front::Checker), "b", &mut store, &mut rng).unwrap();
        let x = random_x(&[1, 2, 4, 4], 7);
        let (y, ld) = block.apply(&store, &x, Direction::Forward).unwrap();
        let expect = 32.0 * (0.1 * softplus(10.0)).ln();
        assert!((ld[0] - expect).abs() < 1e-12);
        let ratio = (y.sq_norm() / x.sq_norm()).sqrt();
        assert!((ratio - 0.1 * softplus(10.0)).abs() < 1e-12);
    }

    #[test]
    fn spatial_split_conditions_on_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let block = CouplingBlock::new(spec(1, Front::CheckerSpatial), "b", &mut store, &mut rng).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (u1, u2) = block.split(&mut tape, xv).unwrap();
        assert_eq!(tape.value(u1).data(), &[1.0, 4.0]);
        assert_eq!(tape.value(u2).data(), &[2.0, 3.0]);
        let cond = block.condition(&mut tape, u1).unwrap();
        assert_eq!(tape.value(cond).data(), &[1.0, 0.0, 0.0, 4.0]);
    }
}
