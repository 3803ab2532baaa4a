//! Calibration, predictive entropy, effective receptive field and
//! corruption robustness.

use rand_distr::{Distribution, Normal, Poisson};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FlowModel, Prediction};
use crate::ood::{atypicality, roc_auc, ScoreSet, TestKind};
use crate::rng::{stream, Purpose};
use crate::tensor::{Tape, Tensor};

/// Equal-width reliability bins on `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationCurve {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fraction correct per bin; `NaN` for empty bins.
    pub accuracy: Vec<f64>,
    pub mean_confidence: Vec<f64>,
    pub total: usize,
}

impl CalibrationCurve {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn midpoint(&self, b: usize) -> f64 {
        0.5 * (self.edges[b] + self.edges[b + 1])
    }

    pub const CSV_HEADER: &'static str = "bin_lo,bin_hi,count,accuracy,mean_confidence";

    pub fn csv_rows(&self) -> Vec<String> {
        (0..self.bins())
            .map(|b| {
                format!(
                    "{:.6},{:.6},{},{},{}",
                    self.edges[b],
                    self.edges[b + 1],
                    self.counts[b],
                    fmt_opt(self.accuracy[b]),
                    fmt_opt(self.mean_confidence[b])
                )
            })
            .collect()
    }
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{:.10e}", v)
    } else {
        String::new()
    }
}

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_C_CRIT: f64 = 0.997;

pub fn calibration_curve(confidences: &[f64], correct: &[bool], bins: usize) -> Result<CalibrationCurve> {
    if confidences.is_empty() {
        return Err(Error::InvalidArgument("calibration of an empty prediction set".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Shape(format!("{} confidences for {} outcomes", confidences.len(), correct.len())));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("at least one bin is needed".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Domain(format!("confidence {} outside [0, 1]", c)));
    }
    let mut counts = vec![0usize; bins];
    let mut hits = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
        hits[b] += usize::from(ok);
        conf[b] += c;
    }
    let ratio = |a: f64, n: usize| if n > 0 { a / n as f64 } else { f64::NAN };
    Ok(CalibrationCurve {
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        accuracy: (0..bins).map(|b| ratio(hits[b] as f64, counts[b])).collect(),
        mean_confidence: (0..bins).map(|b| ratio(conf[b], counts[b])).collect(),
        counts,
        total: confidences.len(),
    })
}

/// Count-weighted mean of `|C − R(C)|` with `C` the bin midpoint.
pub fn ece(curve: &CalibrationCurve) -> f64 {
    (0..curve.bins())
        .filter(|&b| curve.counts[b] > 0)
        .map(|b| curve.counts[b] as f64 * (curve.midpoint(b) - curve.accuracy[b]).abs())
        .sum::<f64>()
        / curve.total as f64
}

/// Largest `|C − R(C)|` over non-empty bins.
pub fn mce(curve: &CalibrationCurve) -> f64 {
    (0..curve.bins())
        .filter(|&b| curve.counts[b] > 0)
        .map(|b| (curve.midpoint(b) - curve.accuracy[b]).abs())
        .fold(0.0, f64::max)
}

/// Error rate among predictions with confidence at least `c_crit`, divided
/// by `1 − c_crit`; `None` when no prediction is that confident.
pub fn oce(confidences: &[f64], correct: &[bool], c_crit: f64) -> Result<Option<f64>> {
    if confidences.len() != correct.len() {
        return Err(Error::Shape(format!("{} confidences for {} outcomes", confidences.len(), correct.len())));
    }
    if !(c_crit > 0.0 && c_crit < 1.0) {
        return Err(Error::InvalidArgument(format!("critical confidence {} outside (0, 1)", c_crit)));
    }
    let (mut n, mut wrong) = (0usize, 0usize);
    for (&c, &ok) in confidences.iter().zip(correct) {
        if c >= c_crit {
            n += 1;
            wrong += usize::from(!ok);
        }
    }
    Ok((n > 0).then(|| wrong as f64 / n as f64 / (1.0 - c_crit)))
}

/// One `(confidence, correct)` pair per class and sample.
pub fn per_class_pairs(posteriors: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let mut conf = Vec::new();
    let mut ok = Vec::new();
    for (p, &y) in posteriors.iter().zip(labels) {
        for (c, &v) in p.iter().enumerate() {
            conf.push(v.clamp(0.0, 1.0));
            ok.push(c == y);
        }
    }
    (conf, ok)
}

/// Top-1 `(confidence, correct)` pairs.
pub fn top1_pairs(preds: &[Prediction], labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p.confidence.clamp(0.0, 1.0), p.argmax == y))
        .unzip()
}

/// `−Σ p log p` in nats.
pub fn predictive_entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Domain("entropy of a vector that is not a distribution".into()));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Mean absolute input gradient of the centre feature column.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivity {
    pub rows: usize,
    pub cols: usize,
    pub map: Vec<f64>,
}

impl Sensitivity {
    /// Number of columns with any non-zero entry.
    pub fn support_width(&self) -> usize {
        let peak = self.map.iter().copied().fold(0.0, f64::max);
        let thr = peak * 1e-12;
        (0..self.cols)
            .filter(|&c| (0..self.rows).any(|r| self.map[r * self.cols + c] > thr))
            .count()
    }

    /// Number of columns of the peak row at or above half its maximum.
    pub fn fwhm(&self) -> usize {
        let r = (0..self.rows)
            .max_by(|&a, &b| {
                let ra: f64 = self.map[a * self.cols..(a + 1) * self.cols].iter().sum();
                let rb: f64 = self.map[b * self.cols..(b + 1) * self.cols].iter().sum();
                ra.total_cmp(&rb)
            })
            .unwrap_or(0);
        let row = &self.map[r * self.cols..(r + 1) * self.cols];
        let peak = row.iter().copied().fold(0.0, f64::max);
        row.iter().filter(|&&v| peak > 0.0 && v >= 0.5 * peak).count()
    }
}

pub fn effective_receptive_field(model: &FlowModel, images: &Tensor) -> Result<Sensitivity> {
    let (n, c, h, w) = images.dims4()?;
    if n == 0 {
        return Err(Error::InvalidArgument("no images".into()));
    }
    let mut map = vec![0.0; h * w];
    for i in 0..n {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let x = tape.leaf(images.rows(i, 1)?);
        let (feat, _) = model.features_var(&mut tape, &p, x)?;
        let shape = tape.shape(feat).to_vec();
        let (fc, fh, fw) = (shape[1], shape[2], shape[3]);
        if fh * fw == 0 {
            return Err(Error::InvalidArgument("the model has no centre feature column".into()));
        }
        let (cr, cc) = (fh / 2, fw / 2);
        for ch in 0..fc {
            let mut seed = vec![0.0; fc * fh * fw];
            seed[ch * fh * fw + cr * fw + cc] = 1.0;
            let g = tape.backward_with(feat, &seed)?;
            let gx = g.get_or_zeros(x, c * h * w);
            for k in 0..c {
                for j in 0..h * w {
                    map[j] += gx[k * h * w + j].abs();
                }
            }
        }
    }
    map.iter_mut().for_each(|v| *v /= n as f64);
    Ok(Sensitivity { rows: h, cols: w, map })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    GaussianNoise,
    ShotNoise,
    DefocusBlur,
    Contrast,
    Brightness,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::GaussianNoise,
        Corruption::ShotNoise,
        Corruption::DefocusBlur,
        Corruption::Contrast,
        Corruption::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ShotNoise => "shot_noise",
            Corruption::DefocusBlur => "defocus_blur",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
        }
    }

    /// Parameter at severities 1 to 5: noise std, photon count, box radius,
    /// contrast factor, brightness offset.
    pub fn parameter(self, severity: usize) -> f64 {
        let table = match self {
            Corruption::GaussianNoise => [0.04, 0.08, 0.12, 0.16, 0.20],
            Corruption::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            Corruption::DefocusBlur => [1.0, 1.0, 2.0, 2.0, 3.0],
            Corruption::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            Corruption::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
        };
        table[severity.clamp(1, 5) - 1]
    }

    /// Blend weight of the blurred image, so equal radii still differ in strength.
    fn blur_mix(severity: usize) -> f64 {
        [0.6, 1.0, 0.7, 1.0, 1.0][severity.clamp(1, 5) - 1]
    }

    /// Description of every severity, for report headers.
    pub fn table() -> String {
        Corruption::ALL
            .iter()
            .map(|k| {
                let vals: Vec<String> = (1..=5).map(|s| k.parameter(s).to_string()).collect();
                format!("{}=[{}]", k.name(), vals.join(" "))
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption '{}'", s)))
    }
}

fn box_blur(img: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let (mut s, mut n) = (0.0, 0.0);
                for di in -r..=r {
                    for dj in -r..=r {
                        let (a, b) = (i + di, j + dj);
                        if a >= 0 && b >= 0 && a < h as isize && b < w as isize {
                            s += img[ch * h * w + a as usize * w + b as usize];
                            n += 1.0;
                        }
                    }
                }
                out[ch * h * w + i as usize * w + j as usize] = s / n;
            }
        }
    }
    out
}

/// Corrupts every image; severity 0 returns the input unchanged.
pub fn corrupt(images: &Tensor, kind: Corruption, severity: usize, seed: u64) -> Result<Tensor> {
    if severity > 5 {
        return Err(Error::InvalidArgument(format!("severity {} outside 0..=5", severity)));
    }
    if severity == 0 {
        return Ok(images.clone());
    }
    let (n, c, h, w) = images.dims4()?;
    let per = c * h * w;
    let a = kind.parameter(severity);
    let mut data = images.data().to_vec();
    for (i, img) in data.chunks_mut(per).enumerate() {
        let mut rng = stream(seed, Purpose::Corrupt, ((kind as u64) << 40) | ((severity as u64) << 32) | i as u64);
        match kind {
            Corruption::GaussianNoise => {
                let normal = Normal::new(0.0, a).map_err(|e| Error::Domain(e.to_string()))?;
                img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            Corruption::ShotNoise => {
                for v in img.iter_mut() {
                    let rate = (*v * a).max(0.0);
                    *v = if rate > 0.0 {
                        Poisson::new(rate).map_err(|e| Error::Domain(e.to_string()))?.sample(&mut rng) / a
                    } else {
                        0.0
                    };
                }
            }
            Corruption::DefocusBlur => {
                let blurred = box_blur(img, c, h, w, a as usize);
                let mix = Corruption::blur_mix(severity);
                img.iter_mut().zip(blurred).for_each(|(v, b)| *v = (1.0 - mix) * *v + mix * b);
            }
            Corruption::Contrast => {
                let mean = img.iter().sum::<f64>() / per as f64;
                img.iter_mut().for_each(|v| *v = (*v - mean) * a + mean);
            }
            Corruption::Brightness => img.iter_mut().for_each(|v| *v += a),
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Tensor::new(vec![n, c, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRow {
    pub kind: Option<Corruption>,
    pub severity: usize,
    pub error: f64,
    pub mean_entropy: f64,
    pub delta_entropy: f64,
    /// Two-tailed detection AUC against the clean scores, in percent.
    pub ood_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionReport {
    /// First row is the clean set (severity 0).
    pub rows: Vec<CorruptionRow>,
    /// Per corruption `Σ_s E_s / Σ_s E^base_s`.
    pub ce: Vec<(Corruption, Option<f64>)>,
    pub mce: Option<f64>,
    /// Mean of `Σ_s (E_s − E_clean) / Σ_s (E^base_s − E^base_clean)`.
    pub rel_mce: Option<f64>,
}

impl CorruptionReport {
    pub const CSV_HEADER: &'static str = "corruption,severity,top1_error,mean_entropy_nats,delta_entropy_nats,ood_auc_two_tailed_pct";

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{:.10e},{:.10e},{:.10e},{:.6}",
                    r.kind.map_or("clean", |k| k.name()),
                    r.severity,
                    r.error,
                    r.mean_entropy,
                    r.delta_entropy,
                    r.ood_auc
                )
            })
            .collect()
    }
}

struct Eval {
    error: f64,
    entropy: f64,
    scores: Vec<f64>,
}

fn eval_set(model: &FlowModel, images: &Tensor, labels: &[usize]) -> Result<Eval> {
    let preds = model.predict(images)?;
    let n = preds.len() as f64;
    let wrong = preds.iter().zip(labels).filter(|(p, &y)| p.argmax != y).count() as f64;
    let mut entropy = 0.0;
    for p in &preds {
        entropy += predictive_entropy(&p.posterior)?;
    }
    Ok(Eval {
        error: wrong / n,
        entropy: entropy / n,
        scores: preds.iter().map(|p| p.marginal).collect(),
    })
}

fn errors_by_kind(model: &FlowModel, clean: &Dataset, seed: u64) -> Result<(Eval, Vec<Vec<Eval>>)> {
    let base = eval_set(model, &clean.images, &clean.labels)?;
    let mut all = Vec::new();
    for kind in Corruption::ALL {
        let mut per = Vec::new();
        for s in 1..=5 {
            let x = corrupt(&clean.images, kind, s, seed)?;
            per.push(eval_set(model, &x, &clean.labels)?);
        }
        all.push(per);
    }
    Ok((base, all))
}

pub fn corruption_suite(
    model: &FlowModel,
    clean: &Dataset,
    baseline: Option<&FlowModel>,
    seed: u64,
) -> Result<CorruptionReport> {
    let (base, all) = errors_by_kind(model, clean, seed)?;
    let refs = ScoreSet::new(base.scores.clone())?;
    let stats = |s: &[f64]| -> Vec<f64> { s.iter().map(|&v| atypicality(&refs, TestKind::TwoTailed, v)).collect() };
    let clean_stats = stats(&base.scores);
    let mut rows = vec![CorruptionRow {
        kind: None,
        severity: 0,
        error: base.error,
        mean_entropy: base.entropy,
        delta_entropy: 0.0,
        ood_auc: roc_auc(&clean_stats, &clean_stats)?,
    }];
    for (k, kind) in Corruption::ALL.into_iter().enumerate() {
        for (s, e) in all[k].iter().enumerate() {
            rows.push(CorruptionRow {
                kind: Some(kind),
                severity: s + 1,
                error: e.error,
                mean_entropy: e.entropy,
                delta_entropy: e.entropy - base.entropy,
                ood_auc: roc_auc(&clean_stats, &stats(&e.scores))?,
            });
        }
    }
    let (ce, mce, rel_mce) = match baseline {
        None => (Corruption::ALL.iter().map(|&k| (k, None)).collect(), None, None),
        Some(b) => {
            let (bbase, ball) = errors_by_kind(b, clean, seed)?;
            let mut ce = Vec::new();
            let mut rel = Vec::new();
            for (k, kind) in Corruption::ALL.into_iter().enumerate() {
                let num: f64 = all[k].iter().map(|e| e.error).sum();
                let den: f64 = ball[k].iter().map(|e| e.error).sum();
                ce.push((kind, (den > 0.0).then(|| num / den)));
                let rnum: f64 = all[k].iter().map(|e| e.error - base.error).sum();
                let rden: f64 = ball[k].iter().map(|e| e.error - bbase.error).sum();
                rel.push((rden != 0.0).then(|| rnum / rden));
            }
            let mean = |v: Vec<Option<f64>>| -> Option<f64> {
                let v: Option<Vec<f64>> = v.into_iter().collect();
                v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            };
            let mce = mean(ce.iter().map(|(_, r)| *r).collect());
            (ce, mce, mean(rel))
        }
    };
    Ok(CorruptionReport { rows, ce, mce, rel_mce })
}
