//! SGD with momentum, plateau cooling and augmentation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{
    bits_per_dim, dequantize, ib_total_var, logits_var, loss_x_per_sample_var, loss_y_var,
    smooth_labels, Beta,
};
use crate::model::FlowModel;
use crate::params::ParamStore;
use crate::rng::{stream, Purpose};
use crate::tensor::{Reduce, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub cooling_factor: f64,
    pub max_coolings: usize,
    /// Epochs without improvement before cooling.
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub beta: Beta,
    pub label_smoothing: f64,
    pub dequant_amplitude: f64,
    pub flip: bool,
    pub crop: bool,
    /// Samples per tape; gradients of chunks are summed in order.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(10.0),
            cooling_factor: 10.0,
            max_coolings: 2,
            plateau_patience: 5,
            batch_size: 64,
            epochs: 10,
            max_steps: None,
            beta: Beta::Finite(1.0),
            label_smoothing: 0.05,
            dequant_amplitude: 1.0 / 255.0,
            flip: true,
            crop: true,
            chunk: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be positive");
        }
        if !(self.cooling_factor >= 1.0) {
            return bad("cooling_factor must be at least 1");
        }
        if self.batch_size == 0 || self.chunk == 0 {
            return bad("batch_size and chunk must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(self.dequant_amplitude >= 0.0) {
            return bad("dequant_amplitude must be non-negative");
        }
        if let Beta::Finite(b) = self.beta {
            if !(b >= 0.0) {
                return bad("beta must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub coolings: usize,
    pub best: f64,
    pub since_best: usize,
}

impl OptState {
    pub fn new(params: &ParamStore, lr0: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            lr: lr0,
            coolings: 0,
            best: f64::INFINITY,
            since_best: 0,
        }
    }
}

/// `v ← μv + (g + λp)`, `p ← p − lr·v`; decay only where the parameter asks for it.
/// `g` is rescaled first when its global norm exceeds `grad_clip`.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Shape("gradient list does not match parameters".into()));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if g.len() != p.value.numel() || v.len() != g.len() {
            return Err(Error::Shape(format!("gradient of {} has wrong length", p.name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    let factor = match cfg.grad_clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + (factor * gi + wd * *w);
            *w -= state.lr * *vi;
        }
    }
    Ok(())
}

/// Cools the rate after `plateau_patience` epochs without a new best loss.
pub fn plateau_schedule(state: &mut OptState, epoch_loss: f64, cfg: &TrainConfig) -> f64 {
    if epoch_loss < state.best {
        state.best = epoch_loss;
        state.since_best = 0;
    } else {
        state.since_best += 1;
        if state.since_best >= cfg.plateau_patience && state.coolings < cfg.max_coolings {
            state.lr /= cfg.cooling_factor;
            state.coolings += 1;
            state.since_best = 0;
        }
    }
    state.lr
}

/// Mirror every image left to right.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for r in 0..n * c * h {
        for j in 0..w {
            dst[r * w + j] = src[r * w + w - 1 - j];
        }
    }
    Ok(out)
}

/// Shift one `[C,H,W]` image by `(dy, dx)`, filling with zeros.
fn shift_image(img: &mut [f64], c: usize, h: usize, w: usize, dy: isize, dx: isize) {
    let src = img.to_vec();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = (i as isize - dy, j as isize - dx);
                let inside = si >= 0 && sj >= 0 && si < h as isize && sj < w as isize;
                img[(ch * h + i) * w + j] = if inside {
                    src[(ch * h + si as usize) * w + sj as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Random flips, 1-pixel crops and dequantization noise; returns images and
/// smoothed label distributions `[N, M]`.
pub fn augment<R: Rng>(
    images: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = images.dims4()?;
    let per = c * h * w;
    let mut out = images.clone();
    for i in 0..n {
        let img = &mut out.data_mut()[i * per..(i + 1) * per];
        if cfg.flip && rng.gen::<bool>() {
            for r in 0..c * h {
                img[r * w..(r + 1) * w].reverse();
            }
        }
        if cfg.crop {
            let dy = rng.gen_range(-1isize..=1);
            let dx = rng.gen_range(-1isize..=1);
            if dy != 0 || dx != 0 {
                shift_image(img, c, h, w, dy, dx);
            }
        }
    }
    let out = dequantize(&out, cfg.dequant_amplitude, rng)?;
    let mut targets = Vec::with_capacity(n * classes);
    for &y in labels {
        targets.extend(smooth_labels(y, classes, cfg.label_smoothing)?);
    }
    Ok((out, Tensor::new(vec![n, classes], targets)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mixture NLL per dimension, without the Gaussian constant.
    pub l_x: f64,
    pub l_y: f64,
    pub total: f64,
    pub acc: f64,
    /// Continuous bits/dim of the augmented training data.
    pub bpd: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,lr,l_x,l_y,total,acc,bpd";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.10e},{:.10e},{:.10e},{:.6},{:.10e}",
            self.epoch, self.lr, self.l_x, self.l_y, self.total, self.acc, self.bpd
        )
    }
}

/// Bits/dim implied by a per-dimension `l_x`.
pub fn bpd_from_lx(l_x: f64) -> f64 {
    (l_x + 0.5 * (2.0 * PI).ln()) / std::f64::consts::LN_2
}

/// Positive factor applied to `l_x + β·l_y` before differentiation so the
/// gradient scale stays bounded as β grows.
pub fn objective_scale(beta: Beta) -> f64 {
    match beta {
        Beta::Finite(b) => 2.0 / (1.0 + b),
        Beta::Infinite => 2.0,
    }
}

struct ChunkResult {
    grads: Vec<Vec<f64>>,
    l_x: f64,
    l_y: f64,
    correct: usize,
}

/// Loss and gradients of one chunk, scaled so chunk results sum to batch means.
fn chunk_step(
    model: &FlowModel,
    x: Tensor,
    targets: Tensor,
    labels: &[usize],
    batch: usize,
    beta: Beta,
) -> Result<ChunkResult> {
    let n = labels.len();
    let d = model.latent_dim() as f64;
    let weight = n as f64 / batch as f64;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let xv = tape.constant(x);
    let (z, logdet) = model.encode_var(&mut tape, &p, xv)?;
    let mu = model.head.mu_var(&mut tape, &p)?;
    let w = tape.constant(model.head.log_priors_tensor());
    let logits = logits_var(&mut tape, z, mu, w)?;

    let lx = if beta == Beta::Infinite {
        None
    } else {
        let per = loss_x_per_sample_var(&mut tape, logits, logdet)?;
        let mean = tape.reduce(per, Reduce::Mean, 0)?;
        Some(tape.scale(mean, weight / d)?)
    };
    let ly = if beta.is_zero() {
        None
    } else {
        let mean = loss_y_var(&mut tape, logits, &targets)?;
        Some(tape.scale(mean, weight)?)
    };
    let total = ib_total_var(&mut tape, lx, ly, beta)?;
    let total = tape.scale(total, objective_scale(beta))?;
    let grads = tape.backward(total)?;

    let lv = tape.value(logits).data();
    let m = model.head.classes;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &lv[i * m..(i + 1) * m];
            let best = (0..m).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y
        })
        .count();
    Ok(ChunkResult {
        grads: p
            .vars()
            .iter()
            .zip(model.params.iter())
            .map(|(&v, prm)| grads.get_or_zeros(v, prm.value.numel()))
            .collect(),
        l_x: lx.map_or(0.0, |v| tape.value(v).data()[0]),
        l_y: ly.map_or(0.0, |v| tape.value(v).data()[0]),
        correct,
    })
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    if e.is_numeric() {
        Error::Divergence(format!("epoch {} step {}: {}", epoch, step, e))
    } else {
        e
    }
}

/// Trains in place; `on_epoch` sees each epoch's statistics as they finish.
pub fn train(
    model: &mut FlowModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.classes != model.head.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model {}",
            data.classes, model.head.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut state = OptState::new(&model.params, cfg.lr0);
    let mut history = Vec::new();
    let mut step = 0usize;
    let n = data.len();
    let per: usize = data.image_shape().iter().product();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let (mut sum_lx, mut sum_ly, mut correct, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch = data.gather(batch_idx)?;
            let mut rng = stream(cfg.seed, Purpose::Augment, step as u64);
            let (x, targets) = augment(&batch.images, &batch.labels, data.classes, cfg, &mut rng)?;
            let b = batch_idx.len();
            let m = data.classes;
            let pieces: Vec<(usize, usize)> = (0..b)
                .step_by(cfg.chunk)
                .map(|s| (s, cfg.chunk.min(b - s)))
                .collect();
            let model_ref = &*model;
            let results: Vec<Result<ChunkResult>> = pieces
                .par_iter()
                .map(|&(s, len)| {
                    let xs = Tensor::new(
                        {
                            let mut sh = x.shape().to_vec();
                            sh[0] = len;
                            sh
                        },
                        x.data()[s * per..(s + len) * per].to_vec(),
                    )?;
                    let ts = Tensor::new(vec![len, m], targets.data()[s * m..(s + len) * m].to_vec())?;
                    chunk_step(model_ref, xs, ts, &batch.labels[s..s + len], b, cfg.beta)
                })
                .collect();
            let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            let (mut blx, mut bly) = (0.0, 0.0);
            for r in results {
                let r = r.map_err(|e| diverged(e, epoch, step))?;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                blx += r.l_x;
                bly += r.l_y;
                correct += r.correct;
            }
            let total = crate::loss::ib_total(blx, bly, cfg.beta);
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {} step {}: loss is {}",
                    epoch, step, total
                )));
            }
            sgd_momentum_step(&mut model.params, &grads, &mut state, cfg).map_err(|e| diverged(e, epoch, step))?;
            sum_lx += blx * b as f64;
            sum_ly += bly * b as f64;
            seen += b;
            step += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let l_x = sum_lx / seen as f64;
        let l_y = sum_ly / seen as f64;
        let total = crate::loss::ib_total(l_x, l_y, cfg.beta);
        let stats = EpochStats {
            epoch,
            lr: state.lr,
            l_x,
            l_y,
            total,
            acc: correct as f64 / seen as f64,
            bpd: if cfg.beta == Beta::Infinite { f64::NAN } else { bpd_from_lx(l_x) },
        };
        plateau_schedule(&mut state, total, cfg);
        on_epoch(&stats);
        history.push(stats);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    Ok(history)
}

/// Accuracy and mean continuous bits/dim of a model on a dataset.
pub fn evaluate(model: &FlowModel, data: &Dataset) -> Result<(f64, f64)> {
    let preds = model.predict(&data.images)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, &y)| p.argmax == y).count();
    let d = model.input_dim();
    let mut bpd = 0.0;
    for p in &preds {
        bpd += bits_per_dim(p.marginal, d, false)?;
    }
    Ok((correct as f64 / preds.len() as f64, bpd / preds.len() as f64))
}
