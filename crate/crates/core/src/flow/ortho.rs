use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A frozen Haar-random orthogonal matrix used to mix channels.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoMixing {
    pub n: usize,
    pub seed: u64,
    /// Row-major `n×n`.
    pub q: Vec<f64>,
}

pub fn sample_orthogonal(n: usize, seed: u64) -> Result<OrthoMixing> {
    if n < 1 {
        return Err(Error::InvalidArgument("orthogonal matrix of size 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (mut q, r) = qr.unpack();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = q[(i, j)];
        }
    }
    Ok(OrthoMixing { n, seed, q: data })
}

impl OrthoMixing {
    /// `[n, n, 1, 1]` kernel applying `Q` (or `Qᵀ`) as a 1×1 convolution.
    pub fn kernel(&self, transpose: bool) -> Tensor {
        let n = self.n;
        let data = if transpose {
            crate::tensor::kernels::transpose(n, n, &self.q)
        } else {
            self.q.clone()
        };
        Tensor::new(vec![n, n, 1, 1], data).expect("square kernel")
    }

    /// Largest entry of `|QᵀQ − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|k| self.q[k * n + a] * self.q[k * n + b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_one_is_plus_or_minus_one() {
        let m = sample_orthogonal(1, 3).unwrap();
        assert_eq!(m.q[0].abs(), 1.0);
        assert!(sample_orthogonal(0, 3).is_err());
    }

    #[test]
    fn orthogonal_and_deterministic() {
        let a = sample_orthogonal(8, 42).unwrap();
        assert!(a.orthogonality_error() < 1e-12);
        assert_eq!(a, sample_orthogonal(8, 42).unwrap());
        assert_ne!(a, sample_orthogonal(8, 43).unwrap());
    }

    #[test]
    fn first_column_is_isotropic() {
        let n = 4;
        let draws = 1000;
        let mut mean = vec![0.0; n];
        for s in 0..draws {
            let m = sample_orthogonal(n, s).unwrap();
            for i in 0..n {
                mean[i] += m.q[i * n] / draws as f64;
            }
        }
        for v in mean {
            assert!(v.abs() < 0.05, "{}", v);
        }
    }
}
