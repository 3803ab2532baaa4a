use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Widths and kernel of one coupling subnet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubnetSpec {
    pub c_in: usize,
    pub hidden: usize,
    pub expand: usize,
    pub c_out: usize,
    /// Side of the middle convolution (1, 3 or 7).
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    scale: ParamId,
    shift: ParamId,
    kernel: ParamId,
    stride: usize,
    pad: usize,
}

/// Pre-activation bottleneck: four (norm, ReLU, conv) stages, the last one
/// zero-initialised and followed by a bias.
#[derive(Clone, Debug)]
pub struct Subnet {
    pub spec: SubnetSpec,
    stages: Vec<Stage>,
    bias: ParamId,
}

fn he_kernel<R: Rng>(rng: &mut R, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let n = c_out * c_in * k * k;
    let data = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(vec![c_out, c_in, k, k], data).expect("kernel shape")
}

impl Subnet {
    pub fn new<R: Rng>(spec: SubnetSpec, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Self {
        let wide = spec.hidden * spec.expand;
        let layout = [
            (spec.c_in, spec.hidden, 1, 1),
            (spec.hidden, spec.hidden, spec.kernel, spec.stride),
            (spec.hidden, wide, 1, 1),
            (wide, spec.c_out, 1, 1),
        ];
        let mut stages = Vec::with_capacity(4);
        for (i, &(ci, co, k, stride)) in layout.iter().enumerate() {
            let kernel = if i == 3 {
                Tensor::zeros(&[co, ci, 1, 1])
            } else {
                he_kernel(rng, co, ci, k)
            };
            stages.push(Stage {
                scale: store.add(format!("{prefix}.norm{i}.scale"), Tensor::full(&[ci], 1.0), true),
                shift: store.add(format!("{prefix}.norm{i}.shift"), Tensor::zeros(&[ci]), false),
                kernel: store.add(format!("{prefix}.conv{i}"), kernel, true),
                stride,
                pad: k / 2,
            });
        }
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[spec.c_out]), false);
        Self { spec, stages, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for st in &self.stages {
            h = tape.mul_along(h, p.var(st.scale), 1)?;
            h = tape.add_along(h, p.var(st.shift), 1)?;
            h = tape.relu(h)?;
            h = tape.conv2d(h, p.var(st.kernel), st.stride, st.pad)?;
        }
        tape.add_along(h, p.var(self.bias), 1)
    }

    /// Kernel of the final projection (zero at construction).
    pub fn last_kernel(&self) -> ParamId {
        self.stages[3].kernel
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Multiply-accumulates per sample for an input of `h×w`.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let s = &self.spec;
        let (h2, w2) = (h.div_ceil(s.stride), w.div_ceil(s.stride));
        h * w * s.c_in * s.hidden
            + h2 * w2 * s.hidden * s.hidden * s.kernel * s.kernel
            + h2 * w2 * s.hidden * s.hidden * s.expand
            + h2 * w2 * s.hidden * s.expand * s.c_out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = SubnetSpec {
            c_in: 2,
            hidden: 8,
            expand: 2,
            c_out: 6,
            kernel: 3,
            stride: 2,
        };
        let net = Subnet::new(spec, "s", &mut store, &mut rng);
        assert_eq!(store.len(), 4 * 3 + 1);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[3, 2, 4, 4], 0.5));
        let y = net.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 6, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
