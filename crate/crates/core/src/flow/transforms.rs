//! Fixed volume-preserving reshuffles: 2×2 patch transforms, channel
//! permutations and the orthonormal cosine pooling at the end of the flow.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::{LinearOp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Which orthogonal 4×4 matrix acts on each 2×2 patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    /// Plain reordering: output slot `k` is patch position `k` (row-major).
    Checkerboard,
    /// Orthonormal Haar basis, slots ordered LL, LH, HL, HH.
    Haar,
}

const HAAR: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// `[N,C,H,W] <-> [N,4C,H/2,W/2]`; output channel `4c + k` holds slot `k` of
/// input channel `c`.
#[derive(Clone, Copy, Debug)]
pub struct PatchTransform {
    pub kind: PatchKind,
    pub direction: Direction,
}

impl PatchTransform {
    pub fn new(kind: PatchKind, direction: Direction) -> Arc<Self> {
        Arc::new(Self { kind, direction })
    }

    /// Spatial-domain `[N,C,H,W]` to patch-domain `[N,4C,h,w]`.
    fn down(kind: PatchKind, shape: &[usize], x: &[f64]) -> Vec<f64> {
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let src = &x[(s * c + ch) * h * w..][..h * w];
                let dst = &mut out[(s * c + ch) * h * w..][..h * w];
                for i in 0..h2 {
                    for j in 0..w2 {
                        let p = [
                            src[2 * i * w + 2 * j],
                            src[2 * i * w + 2 * j + 1],
                            src[(2 * i + 1) * w + 2 * j],
                            src[(2 * i + 1) * w + 2 * j + 1],
                        ];
                        for k in 0..4 {
                            let v = match kind {
                                PatchKind::Checkerboard => p[k],
                                PatchKind::Haar => {
                                    HAAR[k][0] * p[0]
                                        + HAAR[k][1] * p[1]
                                        + HAAR[k][2] * p[2]
                                        + HAAR[k][3] * p[3]
                                }
                            };
                            dst[k * h2 * w2 + i * w2 + j] = v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Patch-domain `[N,4C,h,w]` back to `[N,C,2h,2w]`.
    fn up(kind: PatchKind, shape: &[usize], y: &[f64]) -> Vec<f64> {
        let (n, c4, h2, w2) = (shape[0], shape[1], shape[2], shape[3]);
        let c = c4 / 4;
        let (h, w) = (2 * h2, 2 * w2);
        let mut out = vec![0.0; y.len()];
        for s in 0..n {
            for ch in 0..c {
                let src = &y[(s * c + ch) * h * w..][..h * w];
                let dst = &mut out[(s * c + ch) * h * w..][..h * w];
                for i in 0..h2 {
                    for j in 0..w2 {
                        let q: [f64; 4] = std::array::from_fn(|k| src[k * h2 * w2 + i * w2 + j]);
                        let p: [f64; 4] = match kind {
                            PatchKind::Checkerboard => q,
                            // The Haar matrix is symmetric and orthogonal.
                            PatchKind::Haar => std::array::from_fn(|m| {
                                HAAR[0][m] * q[0]
                                    + HAAR[1][m] * q[1]
                                    + HAAR[2][m] * q[2]
                                    + HAAR[3][m] * q[3]
                            }),
                        };
                        dst[2 * i * w + 2 * j] = p[0];
                        dst[2 * i * w + 2 * j + 1] = p[1];
                        dst[(2 * i + 1) * w + 2 * j] = p[2];
                        dst[(2 * i + 1) * w + 2 * j + 1] = p[3];
                    }
                }
            }
        }
        out
    }
}

impl LinearOp for PatchTransform {
    fn name(&self) -> &'static str {
        match self.kind {
            PatchKind::Checkerboard => "checkerboard",
            PatchKind::Haar => "haar",
        }
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match (self.direction, s) {
            (Direction::Forward, &[n, c, h, w]) if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => {
                Ok(vec![n, 4 * c, h / 2, w / 2])
            }
            (Direction::Inverse, &[n, c, h, w]) if c % 4 == 0 => Ok(vec![n, c / 4, 2 * h, 2 * w]),
            _ => shape_err(format!(
                "{} {:?} cannot take input of shape {:?}",
                self.name(),
                self.direction,
                s
            )),
        }
    }

    fn apply(&self, s: &[usize], x: &[f64]) -> Vec<f64> {
        match self.direction {
            Direction::Forward => Self::down(self.kind, s, x),
            Direction::Inverse => Self::up(self.kind, s, x),
        }
    }

    fn adjoint(&self, s: &[usize], dy: &[f64]) -> Vec<f64> {
        let out = self.out_shape(s).expect("shape checked in apply");
        match self.direction {
            Direction::Forward => Self::up(self.kind, &out, dy),
            Direction::Inverse => Self::down(self.kind, &out, dy),
        }
    }
}

/// Reorders channels: output channel `i` is input channel `perm[i]`.
#[derive(Clone, Debug)]
pub struct ChannelPermute {
    perm: Vec<usize>,
}

impl ChannelPermute {
    pub fn new(perm: Vec<usize>) -> Self {
        Self { perm }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Self { perm: inv }
    }

    fn gather(perm: &[usize], s: &[usize], x: &[f64]) -> Vec<f64> {
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(x.len());
        for b in 0..n {
            for &p in perm {
                out.extend_from_slice(&x[(b * c + p) * inner..][..inner]);
            }
        }
        out
    }
}

impl LinearOp for ChannelPermute {
    fn name(&self) -> &'static str {
        "channel_permute"
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        if s.len() < 2 || s[1] != self.perm.len() {
            return shape_err(format!(
                "permutation of {} channels applied to {:?}",
                self.perm.len(),
                s
            ));
        }
        Ok(s.to_vec())
    }

    fn apply(&self, s: &[usize], x: &[f64]) -> Vec<f64> {
        Self::gather(&self.perm, s, x)
    }

    fn adjoint(&self, s: &[usize], dy: &[f64]) -> Vec<f64> {
        Self::gather(&self.inverse().perm, s, dy)
    }
}

/// Orthonormal DCT-II basis: `B[u][i] = a(u) cos(π(2i+1)u / 2n)`.
pub fn dct_basis(n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for u in 0..n {
        let a = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            b[u * n + i] = a * (PI * (2 * i + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    b
}

/// Per-channel 2-D DCT flattened to `[N, C·H·W]`: the `C` DC terms first,
/// then each channel's remaining coefficients in row-major `(u, v)` order.
#[derive(Clone, Debug)]
pub struct DctPool {
    c: usize,
    side: usize,
    basis: Vec<f64>,
    pub direction: Direction,
}

impl DctPool {
    pub fn new(c: usize, side: usize, direction: Direction) -> Self {
        Self {
            c,
            side,
            basis: dct_basis(side),
            direction,
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.c * self.side * self.side
    }

    fn slot(&self, ch: usize, coef: usize) -> usize {
        if coef == 0 {
            ch
        } else {
            self.c + ch * (self.side * self.side - 1) + coef - 1
        }
    }

    /// `Bᵀ X B` if `transpose`, else `B X Bᵀ`, for one `n×n` block.
    fn sandwich(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let n = self.side;
        let b = &self.basis;
        let at = |u: usize, i: usize| if transpose { b[i * n + u] } else { b[u * n + i] };
        let mut tmp = vec![0.0; n * n];
        for u in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    s += at(u, i) * x[i * n + j];
                }
                tmp[u * n + j] = s;
            }
        }
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += tmp[u * n + j] * at(v, j);
                }
                out[u * n + v] = s;
            }
        }
        out
    }

    fn pool(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.side * self.side;
        let d = self.flat_dim();
        let n = x.len() / d;
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..self.c {
                let coefs = self.sandwich(&x[s * d + ch * hw..][..hw], false);
                for (k, v) in coefs.into_iter().enumerate() {
                    out[s * d + self.slot(ch, k)] = v;
                }
            }
        }
        out
    }

    fn unpool(&self, z: &[f64]) -> Vec<f64> {
        let hw = self.side * self.side;
        let d = self.flat_dim();
        let n = z.len() / d;
        let mut out = vec![0.0; z.len()];
        for s in 0..n {
            for ch in 0..self.c {
                let coefs: Vec<f64> = (0..hw).map(|k| z[s * d + self.slot(ch, k)]).collect();
                let map = self.sandwich(&coefs, true);
                out[s * d + ch * hw..][..hw].copy_from_slice(&map);
            }
        }
        out
    }
}

impl LinearOp for DctPool {
    fn name(&self) -> &'static str {
        "dct_pool"
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match (self.direction, s) {
            (Direction::Forward, &[n, c, h, w]) if c == self.c && h == self.side && w == self.side => {
                Ok(vec![n, self.flat_dim()])
            }
            (Direction::Inverse, &[n, d]) if d == self.flat_dim() => {
                Ok(vec![n, self.c, self.side, self.side])
            }
            _ => shape_err(format!(
                "dct_pool for {}×{}×{} cannot take {:?}",
                self.c, self.side, self.side, s
            )),
        }
    }

    fn apply(&self, _s: &[usize], x: &[f64]) -> Vec<f64> {
        match self.direction {
            Direction::Forward => self.pool(x),
            Direction::Inverse => self.unpool(x),
        }
    }

    fn adjoint(&self, _s: &[usize], dy: &[f64]) -> Vec<f64> {
        match self.direction {
            Direction::Forward => self.unpool(dy),
            Direction::Inverse => self.pool(dy),
        }
    }
}

fn run(op: &dyn LinearOp, x: &Tensor) -> Result<Tensor> {
    let shape = op.out_shape(x.shape())?;
    Tensor::new(shape, op.apply(x.shape(), x.data()))
}

pub fn haar_transform(x: &Tensor, direction: Direction) -> Result<Tensor> {
    run(&PatchTransform { kind: PatchKind::Haar, direction }, x)
}

pub fn checkerboard_transform(x: &Tensor, direction: Direction) -> Result<Tensor> {
    run(
        &PatchTransform {
            kind: PatchKind::Checkerboard,
            direction,
        },
        x,
    )
}

/// Forward takes `[N,C,H,W]` and flattens; inverse takes `[N, C·H·W]` and
/// needs the map geometry `(C, side)`.
pub fn dct_pool(x: &Tensor, direction: Direction, geometry: Option<(usize, usize)>) -> Result<Tensor> {
    let (c, side) = match (direction, geometry) {
        (_, Some(g)) => g,
        (Direction::Forward, None) => {
            let (_, c, h, w) = x.dims4()?;
            if h != w {
                return shape_err(format!("dct_pool needs square maps, got {}×{}", h, w));
            }
            (c, h)
        }
        (Direction::Inverse, None) => {
            return shape_err("inverse dct_pool needs the map geometry");
        }
    };
    run(&DctPool::new(c, side, direction), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn haar_of_constant_patch() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![3.0; 4]).unwrap();
        let y = haar_transform(&x, Direction::Forward).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[6.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn haar_roundtrip_and_energy() {
        let x = random(&[2, 3, 6, 4], 1);
        let y = haar_transform(&x, Direction::Forward).unwrap();
        assert!((y.sq_norm() - x.sq_norm()).abs() < 1e-10);
        let back = haar_transform(&y, Direction::Inverse).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 4]);
        assert!(haar_transform(&x, Direction::Forward).is_err());
        assert!(checkerboard_transform(&x, Direction::Forward).is_err());
    }

    #[test]
    fn checkerboard_order_is_row_major() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = checkerboard_transform(&x, Direction::Forward).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn checkerboard_is_a_bit_exact_permutation() {
        let x = random(&[2, 2, 4, 6], 2);
        let y = checkerboard_transform(&x, Direction::Forward).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(checkerboard_transform(&y, Direction::Inverse).unwrap(), x);
    }

    #[test]
    fn dct_of_constant_map() {
        let x = Tensor::full(&[1, 1, 7, 7], 1.5);
        let y = dct_pool(&x, Direction::Forward, None).unwrap();
        assert!((y.data()[0] - 7.0 * 1.5).abs() < 1e-12);
        assert!(y.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dct_layout_puts_dc_terms_first() {
        let mut x = Tensor::zeros(&[1, 3, 2, 2]);
        for c in 0..3 {
            for k in 0..4 {
                x.data_mut()[c * 4 + k] = (c + 1) as f64;
            }
        }
        let y = dct_pool(&x, Direction::Forward, None).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
        assert!((y.data()[1] - 4.0).abs() < 1e-12);
        assert!((y.data()[2] - 6.0).abs() < 1e-12);
        assert!(y.data()[3..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dct_rejects_non_square() {
        assert!(dct_pool(&Tensor::zeros(&[1, 1, 2, 4]), Direction::Forward, None).is_err());
    }

    #[test]
    fn channel_permute_roundtrip() {
        let p = ChannelPermute::new(vec![2, 0, 1]);
        let x = random(&[2, 3, 2, 2], 3);
        let y = run(&p, &x).unwrap();
        assert_eq!(&y.data()[..4], &x.data()[8..12]);
        assert_eq!(run(&p.inverse(), &y).unwrap(), x);
    }

    /// `<A x, y> = <x, Aᵀ y>` for every fixed map.
    #[test]
    fn adjoints_match_transposes() {
        let ops: Vec<(Box<dyn LinearOp>, Vec<usize>)> = vec![
            (Box::new(PatchTransform { kind: PatchKind::Haar, direction: Direction::Forward }), vec![2, 2, 4, 4]),
            (Box::new(PatchTransform { kind: PatchKind::Haar, direction: Direction::Inverse }), vec![2, 8, 2, 2]),
            (Box::new(PatchTransform { kind: PatchKind::Checkerboard, direction: Direction::Forward }), vec![1, 3, 2, 4]),
            (Box::new(DctPool::new(2, 3, Direction::Forward)), vec![2, 2, 3, 3]),
            (Box::new(DctPool::new(2, 3, Direction::Inverse)), vec![2, 18]),
            (Box::new(ChannelPermute::new(vec![1, 3, 0, 2])), vec![2, 4, 1, 3]),
        ];
        for (i, (op, shape)) in ops.iter().enumerate() {
            let x = random(shape, 10 + i as u64);
            let out_shape = op.out_shape(shape).unwrap();
            let y = random(&out_shape, 20 + i as u64);
            let ax = op.apply(shape, x.data());
            let aty = op.adjoint(shape, y.data());
            let lhs: f64 = ax.iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{}: {} vs {}", op.name(), lhs, rhs);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dct_roundtrip_and_distance(side in 1usize..6, c in 1usize..3, seed in 0u64..1000) {
            let a = random(&[1, c, side, side], seed);
            let b = random(&[1, c, side, side], seed + 7);
            let za = dct_pool(&a, Direction::Forward, None).unwrap();
            let zb = dct_pool(&b, Direction::Forward, None).unwrap();
            let back = dct_pool(&za, Direction::Inverse, Some((c, side))).unwrap();
            prop_assert!(back.max_abs_diff(&a) < 1e-10);
            let d_in: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
            let d_out: f64 = za.data().iter().zip(zb.data()).map(|(x, y)| (x - y).powi(2)).sum();
            prop_assert!((d_in.sqrt() - d_out.sqrt()).abs() < 1e-10);
        }

        #[test]
        fn patch_transforms_preserve_sums_and_norms(h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
            let x = random(&[1, 2, 2 * h, 2 * w], seed);
            let cb = checkerboard_transform(&x, Direction::Forward).unwrap();
            let s_in: f64 = x.data().iter().sum();
            let s_out: f64 = cb.data().iter().sum();
            prop_assert!((s_in - s_out).abs() < 1e-12);
            let hr = haar_transform(&x, Direction::Forward).unwrap();
            prop_assert!((hr.sq_norm() - x.sq_norm()).abs() < 1e-10);
        }
    }
}
