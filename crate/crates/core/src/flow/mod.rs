//! Invertible layers with exact inverses and analytic log-Jacobians.

mod coupling;
mod ortho;
mod subnet;
pub mod transforms;

pub use coupling::{CouplingBlock, CouplingSpec, Front};
pub use ortho::{sample_orthogonal, OrthoMixing};
pub use subnet::{Subnet, SubnetSpec};
pub use transforms::{
    checkerboard_transform, dct_pool, haar_transform, ChannelPermute, DctPool, Direction,
    PatchKind, PatchTransform,
};

use crate::error::{shape_err, Result};
use crate::params::Bound;
use crate::tensor::{Tape, Var};

/// One stage of a flow on `[N,C,H,W]` maps.
#[derive(Clone, Debug)]
pub enum Block {
    Coupling(CouplingBlock),
    Haar,
    Checkerboard,
}

impl Block {
    pub fn out_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        match self {
            Block::Coupling(b) => b.out_shape(c, h, w),
            Block::Haar | Block::Checkerboard => {
                if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
                    return shape_err(format!("cannot downsample {}×{}", h, w));
                }
                Ok((4 * c, h / 2, w / 2))
            }
        }
    }

    fn patch_kind(&self) -> PatchKind {
        match self {
            Block::Haar => PatchKind::Haar,
            _ => PatchKind::Checkerboard,
        }
    }

    /// Output and per-sample logdet (`None` when volume preserving).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Block::Coupling(b) => b.forward(tape, p, x).map(|(y, ld)| (y, Some(ld))),
            _ => Ok((
                tape.linear(x, PatchTransform::new(self.patch_kind(), Direction::Forward))?,
                None,
            )),
        }
    }

    pub fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Block::Coupling(b) => b.inverse(tape, p, y).map(|(x, ld)| (x, Some(ld))),
            _ => Ok((
                tape.linear(y, PatchTransform::new(self.patch_kind(), Direction::Inverse))?,
                None,
            )),
        }
    }
}
