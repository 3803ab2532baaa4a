use std::fmt;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Softplus,
    Relu,
    Square,
    Negate,
    Scale(f64),
    Shift(f64),
    /// `max(x, c)`.
    ClampMin(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Square => "square",
            Unary::Negate => "negate",
            Unary::Scale(_) => "scale",
            Unary::Shift(_) => "shift",
            Unary::ClampMin(_) => "clamp_min",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
            Unary::Negate => -x,
            Unary::Scale(c) => c * x,
            Unary::Shift(c) => x + c,
            Unary::ClampMin(c) => x.max(c),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Negate => -1.0,
            Unary::Scale(c) => c,
            Unary::Shift(_) => 1.0,
            Unary::ClampMin(c) => {
                if x > c {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reductions along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    LogSumExp,
    /// Keeps the axis: `x - logsumexp(x)`.
    LogSoftmax,
    Max,
}

/// A fixed linear map with a known adjoint (used for volume-preserving
/// reshuffles such as wavelet and cosine transforms).
pub trait LinearOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>>;
    fn apply(&self, in_shape: &[usize], x: &[f64]) -> Vec<f64>;
    /// Transpose of `apply`, mapping output-shaped data to input shape.
    fn adjoint(&self, in_shape: &[usize], dy: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// `b` runs along the middle of `outer × len × inner`.
    Axis { len: usize, inner: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        x: usize,
        f: Unary,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bc: Bcast,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: usize,
        k: usize,
        g: ConvGeom,
        n: usize,
    },
    Reduce {
        x: usize,
        kind: Reduce,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        x: usize,
    },
    Slice {
        x: usize,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        a: usize,
        b: usize,
        outer: usize,
        la: usize,
        lb: usize,
        inner: usize,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    Linear {
        x: usize,
        map: Arc<dyn LinearOp>,
        in_shape: Vec<usize>,
    },
    SqDist {
        z: usize,
        mu: usize,
        n: usize,
        m: usize,
        d: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in creation order; [`Tape::backward`]
/// replays them in exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    inner: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.inner.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {} out of range for {:?}", axis, shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if f == Unary::Log {
            if let Some(bad) = xv.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {}", bad)));
            }
        }
        let data: Vec<f64> = xv.data().iter().map(|&v| f.eval(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Unary { x: x.0, f }, rg, f.name())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Negate)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Shift(c))
    }

    fn bcast_of(&self, a: Var, b: Var, axis: Option<usize>) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match axis {
            None if sa == sb => Ok(Bcast::Same),
            None if self.value(b).numel() == 1 => Ok(Bcast::Scalar),
            None => shape_err(format!("elementwise op on {:?} and {:?}", sa, sb)),
            Some(ax) => {
                let (_, len, inner) = split_axis(sa, ax)?;
                if self.value(b).numel() != len {
                    return shape_err(format!(
                        "broadcast of {:?} along axis {} of {:?}",
                        sb, ax, sa
                    ));
                }
                Ok(Bcast::Axis { len, inner })
            }
        }
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, axis: Option<usize>) -> Result<Var> {
        let bc = self.bcast_of(a, b, axis)?;
        let av = &self.nodes[a.0].value;
        let bd = self.nodes[b.0].value.data();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let data: Vec<f64> = match bc {
            Bcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Axis { len, inner } => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[(i / inner) % len]))
                .collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        self.push(
            out,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bc,
            },
            rg,
            name,
        )
    }

    /// `a + b`; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, None)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, None)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, None)
    }
    /// `a + b` with the vector `b` broadcast along `axis` of `a`.
    pub fn add_along(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.binary(BinKind::Add, a, b, Some(axis))
    }
    pub fn sub_along(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, Some(axis))
    }
    pub fn mul_along(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, Some(axis))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((m, k), (k2, n)) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => ((*m, *k), (*k2, *n)),
            _ => return shape_err(format!("matmul of {:?} and {:?}", sa, sb)),
        };
        if k != k2 {
            return shape_err(format!("matmul of {:?} and {:?}", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
            "matmul",
        )
    }

    /// Cross-correlation of `x[N,C,H,W]` with `kernel[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (o, c2, kh, kw) = self.value(kernel).dims4()?;
        if c != c2 {
            return shape_err(format!(
                "conv2d input has {} channels, kernel expects {}",
                c, c2
            ));
        }
        if !matches!(kh, 1 | 3 | 7) || kh != kw {
            return Err(Error::InvalidArgument(format!(
                "unsupported kernel size {}x{}",
                kh, kw
            )));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(format!(
                "conv2d {}x{} kernel, stride {}, padding {} on {}x{} map",
                kh, kw, stride, padding, h, w
            ));
        }
        let g = ConvGeom {
            c_in: c,
            h,
            w,
            c_out: o,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let (oh, ow) = (g.out_h(), g.out_w());
        let per_in = c * h * w;
        let per_out = o * oh * ow;
        let mut out = vec![0.0; n * per_out];
        {
            let xd = self.value(x).data();
            let kd = self.value(kernel).data();
            for s in 0..n {
                kernels::conv2d_sample(
                    &g,
                    &xd[s * per_in..(s + 1) * per_in],
                    kd,
                    &mut out[s * per_out..(s + 1) * per_out],
                );
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        self.push(
            Tensor::new(vec![n, o, oh, ow], out)?,
            Op::Conv {
                x: x.0,
                k: kernel.0,
                g,
                n,
            },
            rg,
            "conv2d",
        )
    }

    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if len == 0 {
            return shape_err(format!("reduction over empty axis {} of {:?}", axis, shape));
        }
        let xd = self.value(x).data();
        let keep = kind == Reduce::LogSoftmax;
        let mut out = vec![0.0; if keep { outer * len * inner } else { outer * inner }];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| xd[(o * len + j) * inner + i];
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = 0.0;
                        for j in 0..len {
                            s += at(j);
                        }
                        if kind == Reduce::Mean {
                            s /= len as f64;
                        }
                        out[o * inner + i] = s;
                    }
                    Reduce::Max => {
                        let mut m = at(0);
                        for j in 1..len {
                            m = m.max(at(j));
                        }
                        out[o * inner + i] = m;
                    }
                    Reduce::LogSumExp | Reduce::LogSoftmax => {
                        let lse = logsumexp_strided(len, at);
                        if keep {
                            for j in 0..len {
                                out[(o * len + j) * inner + i] = at(j) - lse;
                            }
                        } else {
                            out[o * inner + i] = lse;
                        }
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        if !keep {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                x: x.0,
                kind,
                outer,
                len,
                inner,
            },
            rg,
            "reduce",
        )
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, Reduce::Sum, 0)
    }

    /// Per-row sum of everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let flat = self.reshape(x, &[n, rest])?;
        self.reduce(flat, Reduce::Sum, 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x: x.0 }, rg, "reshape")
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len_in, inner) = split_axis(&shape, axis)?;
        if start + len > len_in {
            return shape_err(format!(
                "slice {}..{} of axis {} in {:?}",
                start,
                start + len,
                axis,
                shape
            ));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                x: x.0,
                outer,
                len_in,
                start,
                len,
                inner,
            },
            rg,
            "slice",
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (outer, la, inner) = split_axis(&sa, axis)?;
        let (outer_b, lb, inner_b) = split_axis(&sb, axis)?;
        let mut same = sa.clone();
        same[axis] = sb[axis];
        if same != sb || outer != outer_b || inner != inner_b {
            return shape_err(format!("concat of {:?} and {:?} on axis {}", sa, sb, axis));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bd[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut out_shape = sa;
        out_shape[axis] = la + lb;
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                a: a.0,
                b: b.0,
                outer,
                la,
                lb,
                inner,
            },
            rg,
            "concat",
        )
    }

    /// Picks flat elements of `x` into a vector of length `idx.len()`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(bad) = idx.iter().find(|&&i| i >= xd.len()) {
            return shape_err(format!("gather index {} of {} elements", bad, xd.len()));
        }
        let out: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(out),
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
            "gather",
        )
    }

    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearOp>) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let out_shape = map.out_shape(&in_shape)?;
        let out = map.apply(&in_shape, self.value(x).data());
        let rg = self.rg(x);
        let name = map.name();
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Linear {
                x: x.0,
                map,
                in_shape,
            },
            rg,
            name,
        )
    }

    /// Squared distances `‖z_n − μ_m‖²` for `z[N,D]`, `mu[M,D]`, giving `[N,M]`.
    pub fn sq_dist(&mut self, z: Var, mu: Var) -> Result<Var> {
        let (sz, sm) = (self.shape(z).to_vec(), self.shape(mu).to_vec());
        let (n, d, m) = match (&sz[..], &sm[..]) {
            ([n, d], [m, d2]) if d == d2 => (*n, *d, *m),
            _ => return shape_err(format!("sq_dist of {:?} and {:?}", sz, sm)),
        };
        let (zd, md) = (self.value(z).data(), self.value(mu).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let zi = &zd[i * d..(i + 1) * d];
            for j in 0..m {
                let mj = &md[j * d..(j + 1) * d];
                out[i * m + j] = zi.iter().zip(mj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        let rg = self.rg(z) || self.rg(mu);
        self.push(
            Tensor::new(vec![n, m], out)?,
            Op::SqDist {
                z: z.0,
                mu: mu.0,
                n,
                m,
                d,
            },
            rg,
            "sq_dist",
        )
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if out.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("output is not on this tape".into()));
        }
        if self.nodes[out.0].value.numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar output, got {:?}",
                self.nodes[out.0].value.shape()
            ));
        }
        self.backward_with(out, &[1.0])
    }

    /// Reverse pass seeded with an arbitrary cotangent for `out`.
    pub fn backward_with(&self, out: Var, seed: &[f64]) -> Result<Grads> {
        if out.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("output is not on this tape".into()));
        }
        if seed.len() != self.nodes[out.0].value.numel() {
            return shape_err("seed length differs from output size");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { inner: grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let update = |grads: &mut [Option<Vec<f64>>], i: usize, f: &mut dyn FnMut(&mut [f64])| {
            let n = nodes[i].value.numel();
            f(grads[i].get_or_insert_with(|| vec![0.0; n]));
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary { x, f } => {
                if wants(*x) {
                    let xd = nodes[*x].value.data();
                    let yd = node.value.data();
                    update(grads, *x, &mut |dx| {
                        for j in 0..g.len() {
                            dx[j] += g[j] * f.deriv(xd[j], yd[j]);
                        }
                    });
                }
            }
            Op::Binary { kind, a, b, bc } => {
                let ad = nodes[*a].value.data();
                let bd = nodes[*b].value.data();
                let b_at = |j: usize| match bc {
                    Bcast::Same => j,
                    Bcast::Scalar => 0,
                    Bcast::Axis { len, inner } => (j / inner) % len,
                };
                if wants(*a) {
                    update(grads, *a, &mut |da| match kind {
                        BinKind::Add | BinKind::Sub => {
                            for j in 0..g.len() {
                                da[j] += g[j];
                            }
                        }
                        BinKind::Mul => {
                            for j in 0..g.len() {
                                da[j] += g[j] * bd[b_at(j)];
                            }
                        }
                    });
                }
                if wants(*b) {
                    update(grads, *b, &mut |db| {
                        for j in 0..g.len() {
                            let v = match kind {
                                BinKind::Add => g[j],
                                BinKind::Sub => -g[j],
                                BinKind::Mul => g[j] * ad[j],
                            };
                            db[b_at(j)] += v;
                        }
                    });
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if wants(*a) {
                    let bd = nodes[*b].value.data();
                    update(grads, *a, &mut |da| kernels::gemm_nt(*m, *n, *k, g, bd, da));
                }
                if wants(*b) {
                    let ad = nodes[*a].value.data();
                    update(grads, *b, &mut |db| kernels::gemm_tn(*k, *m, *n, ad, g, db));
                }
            }
            Op::Conv { x, k, g: geom, n } => {
                let xd = nodes[*x].value.data();
                let kd = nodes[*k].value.data();
                let per_in = geom.c_in * geom.h * geom.w;
                let per_out = geom.c_out * geom.out_h() * geom.out_w();
                let mut dk_local = if wants(*k) { Some(vec![0.0; kd.len()]) } else { None };
                let mut dx_local = if wants(*x) { Some(vec![0.0; xd.len()]) } else { None };
                for s in 0..*n {
                    let dx = dx_local
                        .as_mut()
                        .map(|d| &mut d[s * per_in..(s + 1) * per_in]);
                    kernels::conv2d_sample_backward(
                        geom,
                        &xd[s * per_in..(s + 1) * per_in],
                        kd,
                        &g[s * per_out..(s + 1) * per_out],
                        dx,
                        dk_local.as_deref_mut(),
                    );
                }
                if let Some(local) = dk_local {
                    update(grads, *k, &mut |dk| add_into(dk, &local));
                }
                if let Some(local) = dx_local {
                    update(grads, *x, &mut |dx| add_into(dx, &local));
                }
            }
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
            } => {
                if !wants(*x) {
                    return;
                }
                let xd = nodes[*x].value.data();
                let yd = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                update(grads, *x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            match kind {
                                Reduce::Sum => {
                                    for j in 0..len {
                                        dx[idx(j)] += g[o * inner + i];
                                    }
                                }
                                Reduce::Mean => {
                                    let gi = g[o * inner + i] / len as f64;
                                    for j in 0..len {
                                        dx[idx(j)] += gi;
                                    }
                                }
                                Reduce::Max => {
                                    let y = yd[o * inner + i];
                                    if let Some(j) = (0..len).find(|&j| xd[idx(j)] == y) {
                                        dx[idx(j)] += g[o * inner + i];
                                    }
                                }
                                Reduce::LogSumExp => {
                                    let y = yd[o * inner + i];
                                    let gi = g[o * inner + i];
                                    for j in 0..len {
                                        dx[idx(j)] += gi * (xd[idx(j)] - y).exp();
                                    }
                                }
                                Reduce::LogSoftmax => {
                                    let mut gsum = 0.0;
                                    for j in 0..len {
                                        gsum += g[idx(j)];
                                    }
                                    for j in 0..len {
                                        dx[idx(j)] += g[idx(j)] - yd[idx(j)].exp() * gsum;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    update(grads, *x, &mut |dx| add_into(dx, g));
                }
            }
            Op::Slice {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            } => {
                if wants(*x) {
                    update(grads, *x, &mut |dx| {
                        for o in 0..*outer {
                            let dst = (o * len_in + start) * inner;
                            let src = o * len * inner;
                            add_into(&mut dx[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                la,
                lb,
                inner,
            } => {
                let row = (la + lb) * inner;
                if wants(*a) {
                    update(grads, *a, &mut |da| {
                        for o in 0..*outer {
                            let n = la * inner;
                            add_into(&mut da[o * n..(o + 1) * n], &g[o * row..o * row + n]);
                        }
                    });
                }
                if wants(*b) {
                    update(grads, *b, &mut |db| {
                        for o in 0..*outer {
                            let n = lb * inner;
                            let src = o * row + la * inner;
                            add_into(&mut db[o * n..(o + 1) * n], &g[src..src + n]);
                        }
                    });
                }
            }
            Op::Gather { x, idx } => {
                if wants(*x) {
                    update(grads, *x, &mut |dx| {
                        for (k, &i) in idx.iter().enumerate() {
                            dx[i] += g[k];
                        }
                    });
                }
            }
            Op::Linear { x, map, in_shape } => {
                if wants(*x) {
                    let back = map.adjoint(in_shape, g);
                    update(grads, *x, &mut |dx| add_into(dx, &back));
                }
            }
            Op::SqDist { z, mu, n, m, d } => {
                let zd = nodes[*z].value.data();
                let md = nodes[*mu].value.data();
                let (n, m, d) = (*n, *m, *d);
                if wants(*z) {
                    update(grads, *z, &mut |dz| {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = 2.0 * g[i * m + j];
                                for k in 0..d {
                                    dz[i * d + k] += gij * (zd[i * d + k] - md[j * d + k]);
                                }
                            }
                        }
                    });
                }
                if wants(*mu) {
                    update(grads, *mu, &mut |dm| {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = 2.0 * g[i * m + j];
                                for k in 0..d {
                                    dm[j * d + k] -= gij * (zd[i * d + k] - md[j * d + k]);
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn logsumexp_strided(len: usize, at: impl Fn(usize) -> f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for j in 0..len {
        m = m.max(at(j));
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut s = 0.0;
    for j in 0..len {
        s += (at(j) - m).exp();
    }
    m + s.ln()
}

/// Overflow-safe `log Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    logsumexp_strided(xs.len(), |j| xs[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn scalar_op(f: Unary, x: f64) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(Tensor::scalar(x));
        let y = t.unary(v, f).unwrap();
        t.value(y).item().unwrap()
    }

    #[test]
    fn unary_closed_forms() {
        assert_eq!(scalar_op(Unary::Exp, 0.0), 1.0);
        assert!((scalar_op(Unary::Softplus, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(scalar_op(Unary::Tanh, 0.0), 0.0);
        assert_eq!(scalar_op(Unary::Relu, -3.0), 0.0);
        assert_eq!(scalar_op(Unary::Scale(2.5), 2.0), 5.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(t.log(v), Err(Error::Domain(_))));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn logsumexp_examples() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let r = t.reduce(v, Reduce::LogSumExp, 0).unwrap();
        assert!((t.value(r).item().unwrap() - 2f64.ln()).abs() < 1e-15);

        let v = t.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
        let r = t.reduce(v, Reduce::LogSumExp, 0).unwrap();
        assert!((t.value(r).item().unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);

        let v = t.constant(Tensor::from_vec(vec![0.7; 3]));
        let r = t.reduce(v, Reduce::LogSoftmax, 0).unwrap();
        for &x in t.value(r).data() {
            assert!((x + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_over_empty_axis_fails() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(&[2, 0]));
        assert!(t.reduce(v, Reduce::Sum, 1).is_err());
        assert!(t.reduce(v, Reduce::Sum, 2).is_err());
    }

    #[test]
    fn backward_closed_forms() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.scale(x, 2.0).unwrap();
        let y = t.exp(y).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar_on_tape() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
        assert!(t.backward(Var(17)).is_err());
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[1, 1, 4, 5], -1.0, 1.0));
        let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let ones = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(ones, k, 1, 1).unwrap();
        assert_eq!(t.value(y).data()[4], 9.0);
        assert_eq!(t.value(y).data()[0], 4.0);
    }

    #[test]
    fn conv_rejects_unsupported_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let k = t.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(t.conv2d(x, k, 1, 2), Err(Error::InvalidArgument(_))));
        let k = t.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(t.conv2d(x, k, 1, 1), Err(Error::Shape(_))));
    }

    fn sliding_window(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let (o, _, kh, kw) = k.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for s in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let ii = (i * stride + a) as isize - pad as isize;
                                    let jj = (j * stride + b) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ic) * h + ii as usize) * w + jj as usize]
                                        * k.data()[((oc * c + ic) * kh + a) * kw + b];
                                }
                            }
                        }
                        out[((s * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn strided_conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(h, ks, stride, pad) in &[(4, 3, 2, 1), (5, 3, 1, 1), (16, 7, 2, 3), (6, 1, 1, 0)] {
            let x = rand_tensor(&mut rng, &[2, 3, h, h], -10.0, 10.0);
            let k = rand_tensor(&mut rng, &[4, 3, ks, ks], -10.0, 10.0);
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let kv = t.constant(k.clone());
            let y = t.conv2d(xv, kv, stride, pad).unwrap();
            let oracle = sliding_window(&x, &k, stride, pad);
            assert_eq!(t.value(y).shape(), oracle.shape());
            assert!(t.value(y).max_abs_diff(&oracle) < 1e-12 * 1e3);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[8, 8], -10.0, 10.0);
        let b = rand_tensor(&mut rng, &[8, 8], -10.0, 10.0);
        let got = crate::tensor::matmul(&a, &b).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for p in 0..8 {
                    s += a.data()[i * 8 + p] * b.data()[p * 8 + j];
                }
                worst = worst.max((s - got.data()[i * 8 + j]).abs());
            }
        }
        assert!(worst < 1e-12);
    }

    /// Central-difference check of d(sum(w ⊙ f(inputs)))/d(inputs).
    fn grad_check(
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eval = |ins: &[Tensor], weights: &Option<Tensor>| -> (f64, Tensor) {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let y = f(&mut t, &vars).unwrap();
            let w = weights
                .clone()
                .unwrap_or_else(|| Tensor::full(t.shape(y), 1.0));
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv).unwrap();
            let s = t.sum_all(p).unwrap();
            (t.value(s).item().unwrap(), w)
        };
        let (_, shape_probe) = eval(&inputs, &None);
        let weights = Tensor::new(
            shape_probe.shape().to_vec(),
            (0..shape_probe.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let y = f(&mut t, &vars).unwrap();
        let wv = t.constant(weights.clone());
        let p = t.mul(y, wv).unwrap();
        let s = t.sum_all(p).unwrap();
        let g = t.backward(s).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (vi, x) in inputs.iter().enumerate() {
            let analytic = g.get_or_zeros(vars[vi], x.numel());
            for j in 0..x.numel() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[j] -= h;
                let fd = (eval(&plus, &Some(weights.clone())).0
                    - eval(&minus, &Some(weights.clone())).0)
                    / (2.0 * h);
                let rel = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-2);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -2.0, 2.0);
        let tol = 1e-4;
        for f in [
            Unary::Exp,
            Unary::Tanh,
            Unary::Softplus,
            Unary::Relu,
            Unary::Square,
            Unary::Negate,
            Unary::Scale(-1.7),
            Unary::Shift(0.3),
            Unary::ClampMin(0.1),
        ] {
            let e = grad_check(vec![r(&[3, 4])], |t, v| t.unary(v[0], f), 1);
            assert!(e < tol, "{:?}: {}", f, e);
        }
        let pos = Tensor::new(vec![5], vec![0.3, 0.9, 1.4, 2.0, 0.6]).unwrap();
        assert!(grad_check(vec![pos], |t, v| t.log(v[0]), 2) < tol);

        let (a, b) = (r(&[2, 3, 2]), r(&[2, 3, 2]));
        assert!(grad_check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 3) < tol);
        assert!(grad_check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 3) < tol);
        assert!(grad_check(vec![a.clone(), b], |t, v| t.mul(v[0], v[1]), 3) < tol);
        let s = r(&[1]);
        assert!(grad_check(vec![a.clone(), s], |t, v| t.mul(v[0], v[1]), 4) < tol);
        let c = r(&[3]);
        assert!(grad_check(vec![a.clone(), c.clone()], |t, v| t.mul_along(v[0], v[1], 1), 5) < tol);
        assert!(grad_check(vec![a.clone(), c], |t, v| t.add_along(v[0], v[1], 1), 5) < tol);

        let (m1, m2) = (r(&[3, 4]), r(&[4, 2]));
        assert!(grad_check(vec![m1, m2], |t, v| t.matmul(v[0], v[1]), 6) < tol);

        for &(ks, stride, pad) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (7, 2, 3)] {
            let x = r(&[2, 2, 6, 6]);
            let k = r(&[3, 2, ks, ks]);
            let e = grad_check(vec![x, k], |t, v| t.conv2d(v[0], v[1], stride, pad), 7);
            assert!(e < tol, "conv {}x{} s{}: {}", ks, ks, stride, e);
        }

        for kind in [Reduce::Sum, Reduce::Mean, Reduce::LogSumExp, Reduce::LogSoftmax, Reduce::Max] {
            for axis in 0..3 {
                let e = grad_check(vec![a.clone()], |t, v| t.reduce(v[0], kind, axis), 8);
                assert!(e < tol, "{:?} axis {}: {}", kind, axis, e);
            }
        }

        assert!(grad_check(vec![a.clone()], |t, v| t.slice(v[0], 1, 1, 2), 9) < tol);
        let b2 = r(&[2, 1, 2]);
        assert!(grad_check(vec![a.clone(), b2], |t, v| t.concat(v[0], v[1], 1), 9) < tol);
        assert!(grad_check(vec![a.clone()], |t, v| t.gather(v[0], &[0, 5, 5, 11]), 9) < tol);
        let (z, mu) = (r(&[3, 4]), r(&[2, 4]));
        assert!(grad_check(vec![z, mu], |t, v| t.sq_dist(v[0], v[1]), 10) < tol);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -2.0, 2.0);
        let k = rand_tensor(&mut rng, &[4, 2, 3, 3], -0.5, 0.5);
        let e = grad_check(
            vec![x, k],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                let y = t.tanh(y)?;
                let y = t.reshape(y, &[4, 16])?;
                let y = t.reduce(y, Reduce::LogSoftmax, 0)?;
                let y = t.exp(y)?;
                let s = t.softplus(y)?;
                t.reduce(s, Reduce::LogSumExp, 1)
            },
            13,
        );
        assert!(e < 1e-4, "{}", e);
    }

    #[test]
    fn reverse_pass_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut t = Tape::new();
            let x = t.leaf(rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0));
            let k = t.leaf(rand_tensor(&mut rng, &[3, 3, 3, 3], -1.0, 1.0));
            let y = t.conv2d(x, k, 2, 1).unwrap();
            let y = t.softplus(y).unwrap();
            let s = t.sum_all(y).unwrap();
            let g = t.backward(s).unwrap();
            (g.get(x).unwrap().to_vec(), g.get(k).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
