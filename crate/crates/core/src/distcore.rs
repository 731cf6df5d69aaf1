//! Score histograms, score distributions, training losses and evaluation metrics.
//!
//! Everything here is computed in `f64` regardless of the precision the model runs at.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of score bins (ratings 1..=10).
pub const BINS: usize = 10;

/// Default binarization threshold on the mean score.
pub const DEFAULT_THRESHOLD: f64 = 5.0;

/// Additive smoothing used by [`kl_div`] in reports.
pub const KL_EPS: f64 = 1e-6;

/// Raw vote counts for scores 1..=10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreHistogram {
    counts: [u32; BINS],
}

impl ScoreHistogram {
    pub fn new(counts: [u32; BINS]) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u32; BINS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// An l1-normalized score distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    probs: [f64; BINS],
}

impl ScoreDistribution {
    /// Tolerance on the unit-sum invariant.
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: [f64; BINS]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidAnnotation(format!(
                "distribution entries must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidAnnotation(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / BINS as f64; BINS],
        }
    }

    /// Point mass on `score` (1-based).
    pub fn delta(score: usize) -> Self {
        assert!((1..=BINS).contains(&score), "score {score} out of range");
        let mut probs = [0.0; BINS];
        probs[score - 1] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64; BINS] {
        &self.probs
    }

    /// Expected score.
    pub fn mean(&self) -> f64 {
        weighted_mean(&self.probs)
    }

    pub fn cumulative(&self) -> [f64; BINS] {
        let mut out = [0.0; BINS];
        let mut acc = 0.0;
        for (o, p) in out.iter_mut().zip(self.probs.iter()) {
            acc += p;
            *o = acc;
        }
        out
    }
}

/// Unnormalized model output; non-negative by construction of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    values: [f64; BINS],
}

impl RawPrediction {
    pub fn new(values: [f64; BINS]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::DegeneratePrediction(format!(
                "raw prediction entries must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; BINS] = values.try_into().map_err(|_| {
            Error::shape(
                "raw_prediction",
                format!("expected {BINS} values, got {}", values.len()),
            )
        })?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f64; BINS] {
        &self.values
    }

    /// l1-normalize into a distribution; an all-zero prediction is an error.
    pub fn normalize(&self) -> Result<ScoreDistribution> {
        let sum: f64 = self.values.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegeneratePrediction(
                "prediction sums to zero; cannot normalize".into(),
            ));
        }
        let mut probs = self.values;
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(ScoreDistribution { probs })
    }
}

impl From<ScoreDistribution> for RawPrediction {
    fn from(d: ScoreDistribution) -> Self {
        Self { values: d.probs }
    }
}

/// Huber loss parameters; the knee `delta` is always derived as `1 / sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberConfig {
    sigma: f64,
}

impl HuberConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("huber sigma must be > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delta(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { sigma: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityLabel {
    Low,
    High,
}

/// Aggregate metrics over a set of images.
///
/// `cd_loss` and `kl_div` are `None` for mean-only predictors; `spearman_rho` is `None` when
/// either mean vector is constant and the rank correlation is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cd_loss: Option<f64>,
    pub kl_div: Option<f64>,
    pub mse: f64,
    pub spearman_rho: Option<f64>,
    pub accuracy: f64,
    pub n_images: usize,
}

pub fn normalize_histogram(h: &ScoreHistogram) -> Result<ScoreDistribution> {
    let total = h.total();
    if total == 0 {
        return Err(Error::InvalidAnnotation("histogram has zero total count".into()));
    }
    let mut probs = [0.0; BINS];
    for (p, &c) in probs.iter_mut().zip(h.counts.iter()) {
        *p = c as f64 / total as f64;
    }
    Ok(ScoreDistribution { probs })
}

fn weighted_mean(probs: &[f64; BINS]) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| (i + 1) as f64 * p)
        .sum()
}

/// Predicted mean score of a raw (unnormalized) prediction.
pub fn mean_score(p: &RawPrediction) -> Result<f64> {
    Ok(p.normalize()?.mean())
}

/// `High` iff `mean > t`; a mean exactly at the threshold is `Low`.
pub fn binarize(mean: f64, t: f64) -> QualityLabel {
    if mean > t {
        QualityLabel::High
    } else {
        QualityLabel::Low
    }
}

/// Summed per-element Huber loss and its gradient with respect to `p`.
pub fn huber_terms(p: &[f64], g: &[f64], delta: f64) -> (f64, Vec<f64>) {
    debug_assert_eq!(p.len(), g.len());
    let mut loss = 0.0;
    let grad = p
        .iter()
        .zip(g)
        .map(|(&pi, &gi)| {
            let r = pi - gi;
            if r.abs() <= delta {
                loss += 0.5 * r * r;
                r
            } else {
                loss += delta * (r.abs() - 0.5 * delta);
                delta * r.signum()
            }
        })
        .collect();
    (loss, grad)
}

/// Half squared Euclidean distance and its gradient with respect to `p`.
pub fn euclidean_terms(p: &[f64], g: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(p.len(), g.len());
    let grad: Vec<f64> = p.iter().zip(g).map(|(a, b)| a - b).collect();
    let loss = 0.5 * grad.iter().map(|r| r * r).sum::<f64>();
    (loss, grad)
}

pub fn huber_loss(
    p: &RawPrediction,
    g: &ScoreDistribution,
    cfg: &HuberConfig,
) -> (f64, [f64; BINS]) {
    let (loss, grad) = huber_terms(&p.values, &g.probs, cfg.delta());
    (loss, grad.try_into().expect("bin count"))
}

pub fn euclidean_loss(p: &RawPrediction, g: &ScoreDistribution) -> (f64, [f64; BINS]) {
    let (loss, grad) = euclidean_terms(&p.values, &g.probs);
    (loss, grad.try_into().expect("bin count"))
}

/// Squared l2 distance between the cumulative distributions.
pub fn cd_loss(p: &ScoreDistribution, g: &ScoreDistribution) -> f64 {
    let mut acc_p = 0.0;
    let mut acc_g = 0.0;
    let mut loss = 0.0;
    for i in 0..BINS {
        acc_p += p.probs[i];
        acc_g += g.probs[i];
        let d = acc_p - acc_g;
        loss += d * d;
    }
    loss
}

/// `KL(g || p)` after additive `eps` smoothing and renormalization of both sides.
pub fn kl_div(p: &ScoreDistribution, g: &ScoreDistribution, eps: f64) -> f64 {
    let z = 1.0 + BINS as f64 * eps;
    let kl: f64 = p
        .probs
        .iter()
        .zip(g.probs.iter())
        .map(|(&pi, &gi)| {
            let ps = (pi + eps) / z;
            let gs = (gi + eps) / z;
            gs * (gs / ps).ln()
        })
        .sum();
    kl.max(0.0)
}

/// Ranks starting at 1; tied values share the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties; `None` when undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

fn mean_based_metrics(pred_means: &[f64], gt_means: &[f64], t: f64) -> (f64, Option<f64>, f64) {
    let n = pred_means.len() as f64;
    let mse = pred_means
        .iter()
        .zip(gt_means)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n;
    let correct = pred_means
        .iter()
        .zip(gt_means)
        .filter(|(p, g)| binarize(**p, t) == binarize(**g, t))
        .count();
    (mse, spearman(pred_means, gt_means), correct as f64 / n)
}

/// Metric bundle for distribution predictions against ground-truth distributions.
pub fn dataset_metrics(
    preds: &[RawPrediction],
    gts: &[ScoreDistribution],
    t: f64,
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("dataset_metrics needs at least one image"));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "dataset_metrics",
            format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
        ));
    }
    let normalized = preds
        .iter()
        .map(RawPrediction::normalize)
        .collect::<Result<Vec<_>>>()?;
    let n = preds.len() as f64;
    let cd = normalized.iter().zip(gts).map(|(p, g)| cd_loss(p, g)).sum::<f64>() / n;
    let kl = normalized
        .iter()
        .zip(gts)
        .map(|(p, g)| kl_div(p, g, KL_EPS))
        .sum::<f64>()
        / n;
    let pred_means: Vec<f64> = normalized.iter().map(ScoreDistribution::mean).collect();
    let gt_means: Vec<f64> = gts.iter().map(ScoreDistribution::mean).collect();
    let (mse, rho, accuracy) = mean_based_metrics(&pred_means, &gt_means, t);
    Ok(EvalReport {
        cd_loss: Some(cd),
        kl_div: Some(kl),
        mse,
        spearman_rho: rho,
        accuracy,
        n_images: preds.len(),
    })
}

/// Metric bundle for predictors that only output a mean score.
pub fn mean_metrics(pred_means: &[f64], gts: &[ScoreDistribution], t: f64) -> Result<EvalReport> {
    if pred_means.is_empty() {
        return Err(Error::EmptyInput("mean_metrics needs at least one image"));
    }
    if pred_means.len() != gts.len() {
        return Err(Error::shape(
            "mean_metrics",
            format!("{} predictions vs {} ground truths", pred_means.len(), gts.len()),
        ));
    }
    let gt_means: Vec<f64> = gts.iter().map(ScoreDistribution::mean).collect();
    let (mse, rho, accuracy) = mean_based_metrics(pred_means, &gt_means, t);
    Ok(EvalReport {
        cd_loss: None,
        kl_div: None,
        mse,
        spearman_rho: rho,
        accuracy,
        n_images: pred_means.len(),
    })
}
