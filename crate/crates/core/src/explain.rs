//! Explanations read directly off the latent Gaussian mixture.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::attack::Adam;
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::flow::{dct_pool, Direction};
use crate::loss::{logits_var, loss_x_per_sample_var, loss_y_var};
use crate::model::FlowModel;
use crate::tensor::{logsumexp, Reduce, Tape, Tensor};

/// Position of a latent code relative to the two leading class means.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionProjection {
    /// Coordinate along the axis from `μ₁` to `μ₂`.
    pub h: f64,
    /// Distance from that axis inside the span of the means.
    pub v: f64,
    pub delta_mu: f64,
    /// Dimension of the affine span of the means.
    pub span_dim: usize,
    /// Half-width holding 90% of a unit Gaussian along `h`.
    pub h_mark: f64,
    /// Radius holding 90% of a unit Gaussian in the `span_dim − 1` radial directions.
    pub v_mark: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal basis of the span of `vectors`, first direction first.
fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let scale = vectors.iter().map(|v| norm(v)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&r, b);
                r.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = norm(&r);
        if n > 1e-10 * scale {
            basis.push(r.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn project_decision_space(z: &[f64], top_mus: &[Vec<f64>]) -> Result<DecisionProjection> {
    if top_mus.len() < 2 {
        return Err(Error::InvalidArgument("need at least two class means".into()));
    }
    let d = z.len();
    if top_mus.iter().any(|m| m.len() != d) {
        return shape_err(format!("means and latent code must have length {}", d));
    }
    let mu1 = &top_mus[0];
    let axis = sub(&top_mus[1], mu1);
    let delta_mu = norm(&axis);
    if delta_mu == 0.0 {
        return Err(Error::InvalidArgument("the two leading means coincide".into()));
    }
    let diffs: Vec<Vec<f64>> = top_mus[1..].iter().map(|m| sub(m, mu1)).collect();
    let basis = gram_schmidt(&diffs);
    let r = sub(z, mu1);
    let coords: Vec<f64> = basis.iter().map(|b| dot(&r, b)).collect();
    let in_span_sq: f64 = coords.iter().map(|c| c * c).sum();
    let h = coords[0];
    let v = (in_span_sq - h * h).max(0.0).sqrt();
    let span_dim = basis.len();
    let h_mark = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(0.95);
    let v_mark = if span_dim > 1 {
        ChiSquared::new((span_dim - 1) as f64)
            .map_err(|e| Error::Domain(e.to_string()))?
            .inverse_cdf(0.9)
            .sqrt()
    } else {
        0.0
    };
    Ok(DecisionProjection {
        h,
        v,
        delta_mu,
        span_dim,
        h_mark,
        v_mark,
    })
}

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> Result<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let err = left + right - whole;
        if err.abs() <= 15.0 * tol {
            return Ok(left + right + err / 15.0);
        }
        if depth == 0 {
            return Err(Error::Domain("quadrature did not converge".into()));
        }
        Ok(recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    if !(fa.is_finite() && fm.is_finite() && fb.is_finite()) {
        return Err(Error::NonFinite("integrand".into()));
    }
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Unnormalised density of the confidence `c = max_y p(y|z)` for two unit
/// Gaussians at distance `Δμ`.
pub fn confidence_density(c: f64, delta_mu: f64) -> Result<f64> {
    if !(c > 0.5 && c < 1.0) {
        return Err(Error::Domain(format!("confidence {} outside (1/2, 1)", c)));
    }
    if !(delta_mu > 0.0) {
        return Err(Error::Domain(format!("mean distance {} must be positive", delta_mu)));
    }
    let l = (1.0 / c - 1.0).ln();
    Ok((c - c * c).powf(-1.5) * (-l * l / (2.0 * delta_mu * delta_mu)).exp())
}

/// Integral of [`confidence_density`] over `(1/2, 1)`.
pub fn confidence_normalizer(delta_mu: f64) -> f64 {
    (2.0 * std::f64::consts::PI).sqrt() * delta_mu * (delta_mu * delta_mu / 8.0).exp()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean confidence between two classes whose means are `Δμ` apart. The
/// log-odds of a draw is `N(±Δμ²/2, Δμ²)`, so the integral runs over the
/// log-odds instead of the confidence, which removes the endpoint singularity.
pub fn expected_confidence(delta_mu: f64) -> Result<f64> {
    if !(delta_mu >= 0.0) || !delta_mu.is_finite() {
        return Err(Error::Domain(format!("mean distance {} must be finite and non-negative", delta_mu)));
    }
    if delta_mu == 0.0 {
        return Ok(0.5);
    }
    let mean = 0.5 * delta_mu * delta_mu;
    let sd = delta_mu;
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let f = move |l: f64| sigmoid(l.abs()) * norm * (-0.5 * ((l - mean) / sd).powi(2)).exp();
    let (a, b) = (mean - 12.0 * sd, mean + 12.0 * sd);
    let tol = 1e-10;
    let total = if a < 0.0 && b > 0.0 {
        adaptive_simpson(&f, a, 0.0, tol)? + adaptive_simpson(&f, 0.0, b, tol)?
    } else {
        adaptive_simpson(&f, a, b, tol)?
    };
    Ok(total.clamp(0.5, 1.0))
}

/// Mean distance at which [`expected_confidence`] reaches `target`.
pub fn delta_for_confidence(target: f64) -> Result<f64> {
    if !(target > 0.5 && target < 1.0) {
        return Err(Error::Domain(format!("target confidence {} outside (1/2, 1)", target)));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while expected_confidence(hi)? < target {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_confidence(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityEntry {
    pub delta_mu: f64,
    pub expected_confidence: f64,
    pub expected_uncertainty: f64,
    pub diagonal: bool,
}

/// Pairwise distances and expected confidences of the class means `[M, D]`.
pub fn similarity_matrix(mu: &Tensor) -> Result<Vec<Vec<SimilarityEntry>>> {
    if mu.shape().len() != 2 {
        return shape_err(format!("class means must be [M, D], got {:?}", mu.shape()));
    }
    let (m, d) = (mu.shape()[0], mu.shape()[1]);
    let row = |y: usize| &mu.data()[y * d..(y + 1) * d];
    let mut out: Vec<Vec<SimilarityEntry>> = vec![Vec::with_capacity(m); m];
    for a in 0..m {
        for b in 0..m {
            let entry = if b < a {
                let mut e: SimilarityEntry = out[b][a].clone();
                e.diagonal = false;
                e
            } else {
                let delta = norm(&sub(row(a), row(b)));
                let c = expected_confidence(delta)?;
                SimilarityEntry {
                    delta_mu: delta,
                    expected_confidence: c,
                    expected_uncertainty: 1.0 - c,
                    diagonal: a == b,
                }
            };
            out[a].push(entry);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapKind {
    Saliency,
    ClassPosterior(usize),
}

/// One value per spatial position of the maps entering the cosine pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub kind: HeatmapKind,
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<f64>,
}

impl Heatmap {
    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }

    pub fn csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = self.grid[r * self.cols..(r + 1) * self.cols]
                .iter()
                .map(|v| format!("{:.10e}", v))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// 8-bit binary PGM with min/max normalisation.
    pub fn pgm(&self) -> Vec<u8> {
        let lo = self.grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.grid.iter().map(|v| (255.0 * (v - lo) / span).round() as u8));
        out
    }
}

/// Per-pixel latent residuals: `[M][pixel][channel]` from `z` and the means.
struct PixelResiduals {
    side: usize,
    /// `−½‖w^(y)_kl‖²` as `[M, side²]`.
    log_q: Vec<Vec<f64>>,
}

fn pixel_residuals(z: &[f64], mu: &Tensor, geometry: (usize, usize)) -> Result<PixelResiduals> {
    let (c, side) = geometry;
    let d = c * side * side;
    if z.len() != d || mu.shape() != [mu.shape()[0], d] {
        return shape_err(format!(
            "latent layout {}×{}×{} does not match z of length {} and means {:?}",
            c,
            side,
            side,
            z.len(),
            mu.shape()
        ));
    }
    let m = mu.shape()[0];
    let mut resid = Vec::with_capacity(m * d);
    for y in 0..m {
        resid.extend(z.iter().zip(&mu.data()[y * d..(y + 1) * d]).map(|(a, b)| a - b));
    }
    let maps = dct_pool(&Tensor::new(vec![m, d], resid)?, Direction::Inverse, Some(geometry))?;
    let px = side * side;
    let log_q = (0..m)
        .map(|y| {
            let map = &maps.data()[y * d..(y + 1) * d];
            (0..px)
                .map(|k| -0.5 * (0..c).map(|ch| map[ch * px + k].powi(2)).sum::<f64>())
                .collect()
        })
        .collect();
    Ok(PixelResiduals { side, log_q })
}

/// `−log Σ_y q(w_kl|y) p(y)` for each position.
pub fn saliency_heatmap(z: &[f64], mu: &Tensor, log_priors: &[f64], geometry: (usize, usize)) -> Result<Heatmap> {
    let r = pixel_residuals(z, mu, geometry)?;
    let px = r.side * r.side;
    let grid = (0..px)
        .map(|k| {
            let terms: Vec<f64> = r.log_q.iter().zip(log_priors).map(|(q, w)| q[k] + w).collect();
            -logsumexp(&terms)
        })
        .collect();
    Ok(Heatmap {
        kind: HeatmapKind::Saliency,
        rows: r.side,
        cols: r.side,
        grid,
    })
}

/// Per-position share of the class log-posterior: summing the grid and
/// exponentiating gives `p(y|x)`. The normaliser `S` is spread over positions
/// in proportion to the rescaled per-position log-likelihood plus `contrast`,
/// and the log prior is spread evenly.
pub fn class_heatmap(
    z: &[f64],
    mu: &Tensor,
    log_priors: &[f64],
    geometry: (usize, usize),
    y: usize,
    contrast: f64,
) -> Result<Heatmap> {
    let m = mu.shape().first().copied().unwrap_or(0);
    if y >= m || log_priors.len() != m {
        return Err(Error::InvalidArgument(format!("class {} of {} (priors {})", y, m, log_priors.len())));
    }
    if !(contrast >= 0.0) {
        return Err(Error::InvalidArgument(format!("contrast {} must be non-negative", contrast)));
    }
    let r = pixel_residuals(z, mu, geometry)?;
    let px = r.side * r.side;
    let joint: Vec<f64> = (0..m).map(|c| r.log_q[c].iter().sum::<f64>() + log_priors[c]).collect();
    let s_total = logsumexp(&joint);
    let pixel_ll: Vec<f64> = (0..px)
        .map(|k| {
            let terms: Vec<f64> = r.log_q.iter().zip(log_priors).map(|(q, w)| q[k] + w).collect();
            logsumexp(&terms)
        })
        .collect();
    let lo = pixel_ll.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pixel_ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = if hi > lo {
        pixel_ll.iter().map(|v| (v - lo) / (hi - lo) + contrast).collect()
    } else {
        vec![1.0; px]
    };
    let wsum: f64 = weights.iter().sum();
    let weights: Vec<f64> = if wsum > 0.0 {
        weights.into_iter().map(|w| w / wsum).collect()
    } else {
        vec![1.0 / px as f64; px]
    };
    let prior_share = log_priors[y] / px as f64;
    let grid = (0..px)
        .map(|k| r.log_q[y][k] + prior_share - s_total * weights[k])
        .collect();
    Ok(Heatmap {
        kind: HeatmapKind::ClassPosterior(y),
        rows: r.side,
        cols: r.side,
        grid,
    })
}

/// Saliency and per-class heatmaps of one input image `[C, H, W]`.
pub fn explain_image(model: &FlowModel, x: &Tensor, contrast: f64) -> Result<Vec<Heatmap>> {
    let [c, h, w] = model.arch.input;
    let x = x.clone().reshape(&[1, c, h, w])?;
    let (z, _) = model.encode(&x)?;
    let mu = model.head.mu(&model.params);
    let priors = &model.head.log_priors;
    let mut out = vec![saliency_heatmap(z.data(), &mu, priors, model.pooled)?];
    for y in 0..model.head.classes {
        out.push(class_heatmap(z.data(), &mu, priors, model.pooled, y, contrast)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFitConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
}

impl Default for PlaneFitConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            beta: 1.0,
        }
    }
}

/// Class means of a subset restricted to `origin + basis·coords`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarHead {
    pub classes: Vec<usize>,
    pub origin: Vec<f64>,
    /// Two orthonormal directions, `[2, D]`.
    pub basis: Tensor,
    /// `[|subset|, 2]`.
    pub coords: Tensor,
}

impl PlanarHead {
    pub fn mu(&self) -> Tensor {
        let d = self.origin.len();
        let s = self.classes.len();
        let mut data = Vec::with_capacity(s * d);
        for i in 0..s {
            let (a, b) = (self.coords.data()[2 * i], self.coords.data()[2 * i + 1]);
            data.extend((0..d).map(|j| self.origin[j] + a * self.basis.data()[j] + b * self.basis.data()[d + j]));
        }
        Tensor::new(vec![s, d], data).expect("planar head shapes")
    }

    /// Planar coordinates of a latent code.
    pub fn project(&self, z: &[f64]) -> [f64; 2] {
        let d = self.origin.len();
        let r = sub(z, &self.origin);
        [dot(&r, &self.basis.data()[..d]), dot(&r, &self.basis.data()[d..])]
    }

    /// Index into `classes` of the nearest mean.
    pub fn classify(&self, z: &[f64]) -> usize {
        let mu = self.mu();
        let d = self.origin.len();
        (0..self.classes.len())
            .map(|i| norm(&sub(z, &mu.data()[i * d..(i + 1) * d])))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best })
            .0
    }

    /// Singular values of the centred mean matrix, largest first.
    pub fn singular_values(&self) -> Vec<f64> {
        centred_singular_values(&self.mu())
    }
}

fn centred_singular_values(mu: &Tensor) -> Vec<f64> {
    let (s, d) = (mu.shape()[0], mu.shape()[1]);
    let mean: Vec<f64> = (0..d).map(|j| (0..s).map(|i| mu.data()[i * d + j]).sum::<f64>() / s as f64).collect();
    let m = nalgebra::DMatrix::from_fn(s, d, |i, j| mu.data()[i * d + j] - mean[j]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFitReport {
    pub head: PlanarHead,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub third_singular_value: f64,
}

fn nearest_accuracy(z: &Tensor, labels: &[usize], mu: &Tensor) -> f64 {
    let d = z.shape()[1];
    let m = mu.shape()[0];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let zi = &z.data()[i * d..(i + 1) * d];
            let best = (0..m)
                .map(|c| norm(&sub(zi, &mu.data()[c * d..(c + 1) * d])))
                .enumerate()
                .fold((0, f64::INFINITY), |b, (c, v)| if v < b.1 { (c, v) } else { b })
                .0;
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Constrains the means of `subset` to the best-fitting plane and fine-tunes
/// their planar coordinates on latent codes `z` (uniform priors inside the subset).
pub fn fit_2d_decision_space(
    z: &Tensor,
    labels: &[usize],
    mu: &Tensor,
    subset: &[usize],
    cfg: &PlaneFitConfig,
) -> Result<PlaneFitReport> {
    if subset.len() < 3 {
        return Err(Error::InvalidArgument("a planar decision space needs at least three classes".into()));
    }
    let (m, d) = (mu.shape()[0], mu.shape()[1]);
    if z.shape().len() != 2 || z.shape()[1] != d || z.shape()[0] != labels.len() {
        return shape_err(format!("latents {:?} do not match means {:?}", z.shape(), mu.shape()));
    }
    if subset.iter().any(|&y| y >= m) {
        return Err(Error::InvalidArgument(format!("subset class outside 0..{}", m)));
    }
    let s = subset.len();
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| subset.contains(&labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("no samples of the selected classes".into()));
    }
    let local: Vec<usize> = idx
        .iter()
        .map(|&i| subset.iter().position(|&y| y == labels[i]).expect("in subset"))
        .collect();
    let zs: Vec<f64> = idx.iter().flat_map(|&i| z.data()[i * d..(i + 1) * d].iter().copied()).collect();
    let zs = Tensor::new(vec![idx.len(), d], zs)?;
    let sub_mu: Vec<f64> = subset.iter().flat_map(|&y| mu.data()[y * d..(y + 1) * d].iter().copied()).collect();
    let sub_mu = Tensor::new(vec![s, d], sub_mu)?;
    let accuracy_before = nearest_accuracy(&zs, &local, &sub_mu);

    let origin: Vec<f64> = (0..d).map(|j| (0..s).map(|i| sub_mu.data()[i * d + j]).sum::<f64>() / s as f64).collect();
    let centred = nalgebra::DMatrix::from_fn(s, d, |i, j| sub_mu.data()[i * d + j] - origin[j]);
    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Domain("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = Vec::with_capacity(2 * d);
    for &r in order.iter().take(2) {
        basis.extend((0..d).map(|j| v_t[(r, j)]));
    }
    let basis = Tensor::new(vec![2, d], basis)?;
    let mut coords = Vec::with_capacity(2 * s);
    for i in 0..s {
        let row: Vec<f64> = (0..d).map(|j| centred[(i, j)]).collect();
        coords.push(dot(&row, &basis.data()[..d]));
        coords.push(dot(&row, &basis.data()[d..]));
    }
    let mut coords = Tensor::new(vec![s, 2], coords)?;

    let mut targets = vec![0.0; idx.len() * s];
    for (i, &y) in local.iter().enumerate() {
        targets[i * s + y] = 1.0;
    }
    let targets = Tensor::new(vec![idx.len(), s], targets)?;
    let priors = Tensor::from_vec(vec![-(s as f64).ln(); s]);
    let mut adam = Adam::new(coords.numel());
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let c = tape.leaf(coords.clone());
        let b = tape.constant(basis.clone());
        let o = tape.constant(Tensor::new(vec![d], origin.clone())?);
        let zv = tape.constant(zs.clone());
        let w = tape.constant(priors.clone());
        let plane = tape.matmul(c, b)?;
        let mu_v = tape.add_along(plane, o, 1)?;
        let logits = logits_var(&mut tape, zv, mu_v, w)?;
        let zero = tape.constant(Tensor::zeros(&[idx.len()]));
        let lx = loss_x_per_sample_var(&mut tape, logits, zero)?;
        let lx = tape.reduce(lx, Reduce::Mean, 0)?;
        let lx = tape.scale(lx, 1.0 / d as f64)?;
        let ly = loss_y_var(&mut tape, logits, &targets)?;
        let ly = tape.scale(ly, cfg.beta)?;
        let total = tape.add(lx, ly)?;
        let total = tape.sum_all(total)?;
        let grads = tape.backward(total)?;
        let g = grads.get_or_zeros(c, coords.numel());
        adam.step(coords.data_mut(), &g, cfg.lr)?;
    }
    let head = PlanarHead {
        classes: subset.to_vec(),
        origin,
        basis,
        coords,
    };
    let accuracy_after = nearest_accuracy(&zs, &local, &head.mu());
    let third_singular_value = head.singular_values().get(2).copied().unwrap_or(0.0);
    Ok(PlaneFitReport {
        head,
        accuracy_before,
        accuracy_after,
        third_singular_value,
    })
}

/// [`fit_2d_decision_space`] on the latent codes of a dataset.
pub fn fit_2d_for_model(model: &FlowModel, data: &Dataset, subset: &[usize], cfg: &PlaneFitConfig) -> Result<PlaneFitReport> {
    let (z, _) = model.encode(&data.images)?;
    fit_2d_decision_space(&z, &data.labels, &model.head.mu(&model.params), subset, cfg)
}
