//! Out-of-distribution tests on log-likelihood scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference log-likelihoods (nats per sample), sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(mut scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::InvalidArgument("a score set needs at least two scores".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("reference score".into()));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Linear interpolation between order statistics (type 7).
    pub fn quantile(&self, q: f64) -> f64 {
        quantile_sorted(&self.scores, q)
    }

    /// Empirical CDF with half credit for ties.
    pub fn mid_rank_cdf(&self, s: f64) -> f64 {
        let below = self.scores.partition_point(|&v| v < s);
        let upto = self.scores.partition_point(|&v| v <= s);
        (below as f64 + 0.5 * (upto - below) as f64) / self.scores.len() as f64
    }
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    SingleThreshold,
    Typicality,
    TwoTailed,
}

impl TestKind {
    pub const ALL: [TestKind; 3] = [TestKind::SingleThreshold, TestKind::Typicality, TestKind::TwoTailed];

    pub fn name(self) -> &'static str {
        match self {
            TestKind::SingleThreshold => "single_threshold",
            TestKind::Typicality => "typicality",
            TestKind::TwoTailed => "two_tailed",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_threshold" => Ok(TestKind::SingleThreshold),
            "typicality" => Ok(TestKind::Typicality),
            "two_tailed" | "two_tailed_quantile" => Ok(TestKind::TwoTailed),
            _ => Err(Error::InvalidArgument(format!("unknown OoD test '{}'", s))),
        }
    }
}

/// A fitted hypothesis test; scores strictly outside the acceptance region are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct OodTest {
    pub kind: TestKind,
    pub p_value: f64,
    pub lower: f64,
    /// Upper threshold (`+∞` for the single threshold test).
    pub upper: f64,
    /// Center of the typicality band.
    pub center: f64,
    /// Half-width of the typicality band.
    pub radius: f64,
    /// The references are all equal, so the thresholds coincide.
    pub degenerate: bool,
}

pub fn fit_test(refs: &ScoreSet, kind: TestKind, p: f64) -> Result<OodTest> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p-value {} outside (0, 1)", p)));
    }
    let s = refs.scores();
    let degenerate = s[0] == s[s.len() - 1];
    let mean = refs.mean();
    let mut radius = f64::NAN;
    let (lower, upper) = match kind {
        TestKind::SingleThreshold => (refs.quantile(p), f64::INFINITY),
        TestKind::TwoTailed => (refs.quantile(p / 2.0), refs.quantile(1.0 - p / 2.0)),
        TestKind::Typicality => {
            let mut dist: Vec<f64> = s.iter().map(|v| (v - mean).abs()).collect();
            dist.sort_by(f64::total_cmp);
            radius = quantile_sorted(&dist, 1.0 - p);
            (mean - radius, mean + radius)
        }
    };
    Ok(OodTest {
        kind,
        p_value: p,
        lower,
        upper,
        center: mean,
        radius,
        degenerate,
    })
}

impl OodTest {
    pub fn is_ood(&self, score: f64) -> bool {
        match self.kind {
            TestKind::Typicality => (score - self.center).abs() > self.radius,
            _ => score < self.lower || score > self.upper,
        }
    }
}

/// Scalar "how atypical" statistic induced by each test family; larger is
/// more likely out of distribution.
pub fn atypicality(refs: &ScoreSet, kind: TestKind, score: f64) -> f64 {
    match kind {
        TestKind::SingleThreshold => -score,
        TestKind::Typicality => (score - refs.mean()).abs(),
        TestKind::TwoTailed => {
            let f = refs.mid_rank_cdf(score);
            f.max(1.0 - f)
        }
    }
}

/// Area under the ROC curve in percent, for atypicality statistics where
/// larger means "more out of distribution". Built from the threshold sweep
/// with trapezoids, which gives ties half credit.
pub fn roc_auc(in_stats: &[f64], ood_stats: &[f64]) -> Result<f64> {
    if in_stats.is_empty() || ood_stats.is_empty() {
        return Err(Error::InvalidArgument("ROC-AUC of an empty score list".into()));
    }
    if in_stats.iter().chain(ood_stats).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("ROC-AUC input".into()));
    }
    let mut all: Vec<(f64, bool)> = in_stats
        .iter()
        .map(|&v| (v, false))
        .chain(ood_stats.iter().map(|&v| (v, true)))
        .collect();
    // Descending statistic: lowering the threshold admits more rejections.
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_in, n_ood) = (in_stats.len() as f64, ood_stats.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / n_ood, fp / n_in);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(100.0 * area)
}

/// ROC curve points `(fpr, tpr)` for thresholds swept from strict to lax.
pub fn roc_curve(in_stats: &[f64], ood_stats: &[f64]) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = in_stats.iter().chain(ood_stats).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let fpr = in_stats.iter().filter(|&&v| v >= t).count() as f64 / in_stats.len() as f64;
        let tpr = ood_stats.iter().filter(|&&v| v >= t).count() as f64 / ood_stats.len() as f64;
        pts.push((fpr, tpr));
    }
    pts
}

/// Fraction of `scores` each test rejects.
pub fn rejection_rate(test: &OodTest, scores: &[f64]) -> f64 {
    scores.iter().filter(|&&s| test.is_ood(s)).count() as f64 / scores.len().max(1) as f64
}
