//! Targeted Carlini-Wagner attacks on the generative classifier, with an
//! optional term that pulls the likelihood towards the training median.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::ood::{atypicality, roc_auc, ScoreSet, TestKind};
use crate::tensor::{Reduce, Tape, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, w: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if w.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state of {} for {} weights and {} gradients",
                self.m.len(),
                w.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("Adam gradient".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Required logit margin; `f64::INFINITY` removes the clamp.
    #[serde(with = "kappa_serde")]
    pub kappa: f64,
    pub c: f64,
    pub d: f64,
    pub lr: f64,
    pub patience: usize,
    pub max_steps: usize,
    /// Minimal improvement of the best objective that resets the patience.
    pub tol: f64,
    pub record: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kappa: 0.01,
            c: 10.0,
            d: 0.0,
            lr: 0.01,
            patience: 20,
            max_steps: 1000,
            tol: 1e-6,
            record: false,
        }
    }
}

mod kappa_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => parse_kappa(&t).map_err(serde::de::Error::custom),
        }
    }

    pub fn parse_kappa(t: &str) -> Result<f64, String> {
        match t {
            "inf" | "infinity" | "∞" => Ok(f64::INFINITY),
            _ => t.parse::<f64>().map_err(|e| format!("bad kappa '{}': {}", t, e)),
        }
    }
}

pub use kappa_serde::parse_kappa;

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("c = {} must be positive", self.c));
        }
        if !(self.kappa >= 0.0) {
            return bad(format!("kappa = {} must be non-negative or inf", self.kappa));
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return bad(format!("d = {} must be non-negative", self.d));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if self.max_steps == 0 || self.patience == 0 {
            return bad("max_steps and patience must be positive".into());
        }
        Ok(())
    }
}

/// `max(max_{y≠t} l_y − l_t, −κ)`.
pub fn cw_class_loss(logits: &[f64], t: usize, kappa: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("the margin needs at least two classes".into()));
    }
    if t >= logits.len() {
        return Err(Error::InvalidArgument(format!("target {} of {}", t, logits.len())));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(y, _)| y != t)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((other - logits[t]).max(-kappa))
}

/// `d·(median − log q)²`.
pub fn detection_term(log_q: f64, median_ref: f64, d: f64) -> f64 {
    d * (median_ref - log_q).powi(2)
}

/// `½(tanh(w) + 1)`.
pub fn to_image(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| 0.5 * (v.tanh() + 1.0)).collect()
}

/// Inverse of [`to_image`] with the pixels pulled `1e-6` inside the box.
pub fn from_image(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| (2.0 * v.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh()).collect()
}

/// Values of the three objective terms for each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveParts {
    pub distortion: Vec<f64>,
    pub class_loss: Vec<f64>,
    pub log_q: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

/// Per-sample objective and its gradient with respect to `w`, for a batch
/// `w`, `x` of shape `[N, C, H, W]`.
pub fn objective_and_grad(
    model: &FlowModel,
    w: &Tensor,
    x: &Tensor,
    targets: &[usize],
    cfg: &AttackConfig,
    median_ref: f64,
) -> Result<(ObjectiveParts, Vec<f64>)> {
    let n = targets.len();
    let m = model.head.classes;
    let d_lat = model.latent_dim() as f64;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let wv = tape.leaf(w.clone());
    let th = tape.tanh(wv)?;
    let half = tape.scale(th, 0.5)?;
    let x_adv = tape.shift(half, 0.5)?;
    let xc = tape.constant(x.clone());
    let diff = tape.sub(x_adv, xc)?;
    let sq = tape.square(diff)?;
    let dist = tape.sum_per_sample(sq)?;
    let (z, logdet) = model.encode_var(&mut tape, &p, x_adv)?;
    let mu = tape.constant(model.head.mu(&model.params));
    let sqd = tape.sq_dist(z, mu)?;
    let cll = tape.scale(sqd, -0.5)?;
    let cll = tape.shift(cll, -0.5 * d_lat * (2.0 * PI).ln())?;
    let cll = tape.add_along(cll, logdet, 0)?;
    let logits = tape.value(cll).data().to_vec();

    let mut class_values = Vec::with_capacity(n);
    let mut pick_other = Vec::new();
    let mut pick_target = Vec::new();
    let mut active_rows = Vec::new();
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * m..(i + 1) * m];
        let loss = cw_class_loss(row, t, cfg.kappa)?;
        class_values.push(loss);
        let best_other = (0..m)
            .filter(|&y| y != t)
            .fold(None, |b: Option<usize>, y| match b {
                Some(k) if row[k] >= row[y] => Some(k),
                _ => Some(y),
            })
            .expect("two classes");
        if row[best_other] - row[t] > -cfg.kappa {
            pick_other.push(i * m + best_other);
            pick_target.push(i * m + t);
            active_rows.push(i);
        }
    }
    let mut total = tape.sum_all(dist)?;
    if !active_rows.is_empty() {
        let other = tape.gather(cll, &pick_other)?;
        let target = tape.gather(cll, &pick_target)?;
        let margin = tape.sub(other, target)?;
        let msum = tape.sum_all(margin)?;
        let weighted = tape.scale(msum, cfg.c)?;
        total = tape.add(total, weighted)?;
    }
    let priors = tape.constant(model.head.log_priors_tensor());
    let joint = tape.add_along(cll, priors, 1)?;
    let log_q = tape.reduce(joint, Reduce::LogSumExp, 1)?;
    let log_q_values = tape.value(log_q).data().to_vec();
    if cfg.d > 0.0 {
        let gap = tape.shift(log_q, -median_ref)?;
        let gap_sq = tape.square(gap)?;
        let s = tape.sum_all(gap_sq)?;
        let weighted = tape.scale(s, cfg.d)?;
        total = tape.add(total, weighted)?;
    }
    let grads = tape.backward(total)?;
    let g = grads.get_or_zeros(wv, w.numel());
    let distortion = tape.value(dist).data().to_vec();
    let per_total = (0..n)
        .map(|i| {
            distortion[i] + cfg.c * class_values[i] + detection_term(log_q_values[i], median_ref, cfg.d)
        })
        .collect();
    let parts = ObjectiveParts {
        distortion,
        class_loss: class_values,
        log_q: log_q_values,
        logits: logits.chunks(m).map(|r| r.to_vec()).collect(),
        total: per_total,
    };
    Ok((parts, g))
}

/// One step of an attack trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub total: f64,
    pub distortion: f64,
    pub class_loss: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    pub target: usize,
    pub success: bool,
    /// Target leads every other class by at least `κ` (finite `κ` only).
    pub margin_success: bool,
    pub steps: usize,
    pub converged: bool,
    pub l2: f64,
    pub l2_per_pixel: f64,
    pub target_confidence: f64,
    pub predicted: usize,
    pub entropy: f64,
    pub log_q: f64,
    pub detection_score: f64,
    pub trace: Vec<TraceStep>,
}

struct Running {
    w: Vec<f64>,
    adam: Adam,
    best_total: f64,
    since_best: usize,
    best_success: Option<(f64, Vec<f64>)>,
    best_any: Vec<f64>,
    steps: usize,
    done: bool,
    converged: bool,
    trace: Vec<TraceStep>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

fn joint_argmax(logits: &[f64], log_priors: &[f64]) -> usize {
    let joint: Vec<f64> = logits.iter().zip(log_priors).map(|(a, b)| a + b).collect();
    argmax(&joint)
}

/// Attacks every image of `x` (`[N, C, H, W]` in `[0, 1]`) towards its target.
/// Images are optimised together but each keeps its own Adam state and stops
/// on its own patience counter.
pub fn run_attacks(
    model: &FlowModel,
    x: &Tensor,
    targets: &[usize],
    cfg: &AttackConfig,
    refs: &ScoreSet,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {} images", targets.len(), n)));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= model.head.classes) {
        return Err(Error::InvalidArgument(format!("target {} of {}", t, model.head.classes)));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain("attack inputs must lie in [0, 1]".into()));
    }
    let px = c * h * wd;
    let median_ref = refs.quantile(0.5);
    let priors = &model.head.log_priors;
    let mut state: Vec<Running> = (0..n)
        .map(|i| {
            let w = from_image(&x.data()[i * px..(i + 1) * px]);
            Running {
                best_any: w.clone(),
                w,
                adam: Adam::new(px),
                best_total: f64::INFINITY,
                since_best: 0,
                best_success: None,
                steps: 0,
                done: false,
                converged: false,
                trace: Vec::new(),
            }
        })
        .collect();
    for _ in 0..cfg.max_steps {
        let active: Vec<usize> = (0..n).filter(|&i| !state[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut wb = Vec::with_capacity(active.len() * px);
        let mut xb = Vec::with_capacity(active.len() * px);
        for &i in &active {
            wb.extend_from_slice(&state[i].w);
            xb.extend_from_slice(&x.data()[i * px..(i + 1) * px]);
        }
        let tb: Vec<usize> = active.iter().map(|&i| targets[i]).collect();
        let wt = Tensor::new(vec![active.len(), c, h, wd], wb)?;
        let xt = Tensor::new(vec![active.len(), c, h, wd], xb)?;
        let (parts, grad) = objective_and_grad(model, &wt, &xt, &tb, cfg, median_ref)?;
        for (k, &i) in active.iter().enumerate() {
            let s = &mut state[i];
            let total = parts.total[k];
            let success = joint_argmax(&parts.logits[k], priors) == targets[i];
            if cfg.record {
                s.trace.push(TraceStep {
                    total,
                    distortion: parts.distortion[k],
                    class_loss: parts.class_loss[k],
                    success,
                });
            }
            if success && s.best_success.as_ref().is_none_or(|(b, _)| total < *b) {
                s.best_success = Some((total, s.w.clone()));
            }
            if total < s.best_total - cfg.tol {
                s.best_total = total;
                s.best_any = s.w.clone();
                s.since_best = 0;
            } else {
                s.since_best += 1;
            }
            if s.since_best >= cfg.patience && cfg.kappa.is_finite() {
                s.done = true;
                s.converged = true;
                continue;
            }
            s.adam.step(&mut s.w, &grad[k * px..(k + 1) * px], cfg.lr)?;
            s.steps += 1;
        }
    }
    let finals: Vec<Vec<f64>> = state
        .iter()
        .map(|s| match &s.best_success {
            Some((_, w)) => to_image(w),
            None => to_image(&s.best_any),
        })
        .collect();
    let xs = Tensor::new(vec![n, c, h, wd], finals.concat())?;
    let preds = model.predict(&xs)?;
    let mut out = Vec::with_capacity(n);
    for (i, (s, pred)) in state.into_iter().zip(preds).enumerate() {
        let x_adv = finals[i].clone();
        let sq: f64 = x_adv.iter().zip(&x.data()[i * px..(i + 1) * px]).map(|(a, b)| (a - b) * (a - b)).sum();
        let t = targets[i];
        let cll = &pred.class_log_likelihoods;
        let lead = (0..cll.len()).filter(|&y| y != t).map(|y| cll[t] - cll[y]).fold(f64::INFINITY, f64::min);
        out.push(AttackResult {
            target: t,
            success: pred.argmax == t,
            margin_success: pred.argmax == t && (cfg.kappa.is_infinite() || lead >= cfg.kappa - 1e-9),
            steps: s.steps,
            converged: s.converged,
            l2: sq.sqrt(),
            l2_per_pixel: sq.sqrt() / px as f64,
            target_confidence: pred.posterior[t],
            predicted: pred.argmax,
            entropy: crate::metrics::predictive_entropy(&pred.posterior)?,
            log_q: pred.marginal,
            detection_score: atypicality(refs, TestKind::TwoTailed, pred.marginal),
            trace: s.trace,
            x_adv,
        });
    }
    Ok(out)
}

pub fn run_attack(model: &FlowModel, x: &Tensor, target: usize, cfg: &AttackConfig, refs: &ScoreSet) -> Result<AttackResult> {
    let [c, h, w] = model.arch.input;
    let x = x.clone().reshape(&[1, c, h, w])?;
    Ok(run_attacks(model, &x, &[target], cfg, refs)?.remove(0))
}

/// One row of the attack summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSummary {
    pub kappa: f64,
    pub d: f64,
    pub n: usize,
    pub mean_confidence: f64,
    pub mean_l2_per_pixel: f64,
    pub mean_l2: f64,
    pub success_pct: f64,
    pub margin_success_pct: f64,
    pub auc_single: f64,
    pub auc_two_tailed: f64,
    pub mean_entropy: f64,
}

impl AttackSummary {
    pub const CSV_HEADER: &'static str =
        "kappa,d,n,mean_confidence,mean_l2_per_pixel,mean_l2,success_pct,margin_success_pct,auc_single,auc_two_tailed,mean_entropy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.10e},{:.10e},{:.10e},{:.4},{:.4},{:.6},{:.6},{:.10e}",
            if self.kappa.is_infinite() { "inf".to_string() } else { self.kappa.to_string() },
            self.d,
            self.n,
            self.mean_confidence,
            self.mean_l2_per_pixel,
            self.mean_l2,
            self.success_pct,
            self.margin_success_pct,
            self.auc_single,
            self.auc_two_tailed,
            self.mean_entropy
        )
    }
}

/// Aggregates per-image results. Detection AUCs compare the clean scores
/// with the scores of the attacked images under both test families.
pub fn summarize(
    results: &[AttackResult],
    cfg: &AttackConfig,
    refs: &ScoreSet,
    clean_scores: &[f64],
) -> Result<AttackSummary> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no attack results".into()));
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&AttackResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let auc = |kind: TestKind| -> Result<f64> {
        let clean: Vec<f64> = clean_scores.iter().map(|&s| atypicality(refs, kind, s)).collect();
        let adv: Vec<f64> = results.iter().map(|r| atypicality(refs, kind, r.log_q)).collect();
        roc_auc(&clean, &adv)
    };
    Ok(AttackSummary {
        kappa: cfg.kappa,
        d: cfg.d,
        n: results.len(),
        mean_confidence: mean(&|r| r.target_confidence),
        mean_l2_per_pixel: mean(&|r| r.l2_per_pixel),
        mean_l2: mean(&|r| r.l2),
        success_pct: 100.0 * mean(&|r| f64::from(u8::from(r.success))),
        margin_success_pct: 100.0 * mean(&|r| f64::from(u8::from(r.margin_success))),
        auc_single: auc(TestKind::SingleThreshold)?,
        auc_two_tailed: auc(TestKind::TwoTailed)?,
        mean_entropy: mean(&|r| r.entropy),
    })
}

/// Runs each configuration on the same image/target pairs.
pub fn evaluate_attacks(
    model: &FlowModel,
    x: &Tensor,
    targets: &[usize],
    grid: &[AttackConfig],
    refs: &ScoreSet,
    clean_scores: &[f64],
) -> Result<Vec<(AttackSummary, Vec<AttackResult>)>> {
    grid.iter()
        .map(|cfg| {
            let results = run_attacks(model, x, targets, cfg, refs)?;
            Ok((summarize(&results, cfg, refs, clean_scores)?, results))
        })
        .collect()
}

/// Random targets different from each label.
pub fn random_targets<R: rand::Rng>(labels: &[usize], classes: usize, rng: &mut R) -> Vec<usize> {
    labels
        .iter()
        .map(|&y| (y + 1 + rng.gen_range(0..classes - 1)) % classes)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_loss_examples() {
        assert_eq!(cw_class_loss(&[5.0, 1.0, 2.0], 0, 1.0).unwrap(), -1.0);
        assert!((cw_class_loss(&[1.0, 1.5], 0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cw_class_loss(&[7.0, 2.0], 0, f64::INFINITY).unwrap(), -5.0);
        assert!(cw_class_loss(&[1.0, 2.0], 2, 1.0).is_err());
        assert!(cw_class_loss(&[1.0], 0, 1.0).is_err());
    }

    #[test]
    fn detection_term_is_quadratic() {
        assert_eq!(detection_term(3.0, 3.0, 1000.0), 0.0);
        let a = detection_term(1.0, 3.0, 66.0);
        let b = detection_term(-1.0, 3.0, 66.0);
        assert!((b - 4.0 * a).abs() < 1e-9);
    }

    #[test]
    fn adam_first_steps_follow_the_recurrence() {
        let mut adam = Adam::new(2);
        let mut w = vec![1.0, -2.0];
        adam.step(&mut w, &[0.0, 0.0], 0.01).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);

        let mut adam = Adam::new(1);
        let mut w = vec![0.0];
        let g = 0.3;
        adam.step(&mut w, &[g], 0.01).unwrap();
        assert!((w[0] + 0.01 * g / (g + 1e-8)).abs() < 1e-15);
        adam.step(&mut w, &[g], 0.01).unwrap();
        let m = 0.9 * 0.1 * g + 0.1 * g;
        let v = 0.999 * 0.001 * g * g + 0.001 * g * g;
        assert!((adam.m[0] - m).abs() < 1e-12 && (adam.v[0] - v).abs() < 1e-12);
        let second = 0.01 * (m / 0.19) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((w[0] + 0.01 * g / (g + 1e-8) + second).abs() < 1e-12);
        assert!(adam.step(&mut w, &[f64::NAN], 0.01).is_err());
    }

    #[test]
    fn config_parses_infinite_kappa() {
        let cfg: AttackConfig = serde_json::from_str(r#"{"kappa": "inf", "d": 66}"#).unwrap();
        assert!(cfg.kappa.is_infinite() && cfg.d == 66.0 && cfg.c == 10.0);
        let back: AttackConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(AttackConfig { c: 0.0, ..Default::default() }.validate().is_err());
        assert!(serde_json::from_str::<AttackConfig>(r#"{"kappa": 1, "bogus": 0}"#).is_err());
    }

    fn tiny() -> FlowModel {
        let mut arch = ArchSpec::desk([1, 4, 4], 3, 4, 4);
        arch.blocks.truncate(4);
        arch.mu_init_scale = 1.0;
        FlowModel::new(arch).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 1, 4, 4], (0..n * 16).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap()
    }

    #[test]
    fn unperturbed_objective_is_closed_form() {
        let model = tiny();
        let x = images(1, 1);
        let pred = &model.predict(&x).unwrap()[0];
        let t = pred.argmax;
        let w = Tensor::new(x.shape().to_vec(), from_image(x.data())).unwrap();
        let cfg = AttackConfig { kappa: 0.0, ..Default::default() };
        let (parts, _) = objective_and_grad(&model, &w, &x, &[t], &cfg, 0.0).unwrap();
        assert!(parts.distortion[0] < 1e-20);
        assert!(parts.total[0].abs() < 1e-9);
        let cfg0 = AttackConfig { c: 1e-300, ..Default::default() };
        let (_, g) = objective_and_grad(&model, &w, &x, &[t], &cfg0, 0.0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let model = tiny();
        let x = images(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = from_image(x.data()).iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        let w = Tensor::new(x.shape().to_vec(), w).unwrap();
        let cfg = AttackConfig { kappa: f64::INFINITY, d: 0.5, ..Default::default() };
        let median = -20.0;
        let targets = [1, 2];
        let (_, g) = objective_and_grad(&model, &w, &x, &targets, &cfg, median).unwrap();
        let f = |w: &Tensor| -> f64 {
            objective_and_grad(&model, w, &x, &targets, &cfg, median).unwrap().0.total.iter().sum()
        };
        let h = 1e-5;
        for i in (0..w.numel()).step_by(3) {
            let mut a = w.clone();
            a.data_mut()[i] += h;
            let mut b = w.clone();
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(1e-2), "i={} fd={} g={}", i, fd, g[i]);
        }
    }

    fn refs_for(model: &FlowModel) -> ScoreSet {
        ScoreSet::new(model.marginal_log_likelihood(&images(64, 9)).unwrap()).unwrap()
    }

    #[test]
    fn attack_reaches_target_and_stays_in_box() {
        let model = tiny();
        let x = images(4, 4);
        let preds = model.predict(&x).unwrap();
        let targets: Vec<usize> = preds.iter().map(|p| (p.argmax + 1) % 3).collect();
        let refs = refs_for(&model);
        let cfg = AttackConfig { record: true, lr: 0.05, ..Default::default() };
        let res = run_attacks(&model, &x, &targets, &cfg, &refs).unwrap();
        for r in &res {
            assert!(r.success, "{:?}", (r.target, r.predicted, r.steps));
            assert!(r.x_adv.iter().all(|v| (0.0..=1.0).contains(v)));
            let mut best = f64::INFINITY;
            for s in &r.trace {
                best = best.min(s.total);
            }
            assert!(r.steps <= cfg.max_steps);
        }
        let same = run_attacks(&model, &x, &targets, &AttackConfig { d: 0.0, ..cfg.clone() }, &refs).unwrap();
        assert_eq!(same, res);
    }

    #[test]
    fn infinite_margin_runs_to_the_cap() {
        let model = tiny();
        let x = images(1, 5);
        let refs = refs_for(&model);
        let cfg = AttackConfig { kappa: f64::INFINITY, max_steps: 30, ..Default::default() };
        let t = (model.predict(&x).unwrap()[0].argmax + 1) % 3;
        let r = run_attack(&model, &x, t, &cfg, &refs).unwrap();
        assert_eq!(r.steps, 30);
        assert!(!r.converged);
    }

    #[test]
    fn summary_matches_recomputation() {
        let model = tiny();
        let x = images(3, 6);
        let refs = refs_for(&model);
        let clean = model.marginal_log_likelihood(&x).unwrap();
        let targets = vec![0, 1, 2];
        let cfg = AttackConfig { max_steps: 40, ..Default::default() };
        let out = evaluate_attacks(&model, &x, &targets, &[cfg], &refs, &clean).unwrap();
        let (s, rs) = &out[0];
        let l2: f64 = rs.iter().map(|r| r.l2_per_pixel).sum::<f64>() / 3.0;
        assert!((s.mean_l2_per_pixel - l2).abs() < 1e-12);
        let conf: f64 = rs.iter().map(|r| r.target_confidence).sum::<f64>() / 3.0;
        assert!((s.mean_confidence - conf).abs() < 1e-12);
        assert_eq!(s.csv_row().split(',').count(), AttackSummary::CSV_HEADER.split(',').count());
    }

    #[test]
    fn perfectly_separated_attacks_are_fully_detected() {
        let refs = ScoreSet::new((0..100).map(f64::from).collect()).unwrap();
        let clean: Vec<f64> = (10..90).map(f64::from).collect();
        let adv: Vec<f64> = (0..10).map(|i| -100.0 - i as f64).collect();
        for kind in [TestKind::SingleThreshold, TestKind::TwoTailed] {
            let a: Vec<f64> = clean.iter().map(|&s| atypicality(&refs, kind, s)).collect();
            let b: Vec<f64> = adv.iter().map(|&s| atypicality(&refs, kind, s)).collect();
            assert_eq!(roc_auc(&a, &b).unwrap(), 100.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tanh_parametrisation_stays_in_box(w in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            prop_assert!(to_image(&w).iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn random_targets_differ_from_labels(labels in prop::collection::vec(0usize..5, 1..30), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_targets(&labels, 5, &mut rng);
            prop_assert!(t.iter().zip(&labels).all(|(a, b)| a != b && *a < 5));
        }
    }
}
