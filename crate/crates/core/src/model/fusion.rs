use serde::{Deserialize, Serialize};

use crate::distcore::{cd_loss, RawPrediction, ScoreDistribution, BINS};
use crate::{Error, Result};

/// Weight of the SPP branch in the late fusion `w * p_spp + (1 - w) * p_gmp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(w: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&w) {
            Ok(Self(w))
        } else {
            Err(Error::InvalidConfig(format!("fusion weight must be in [0, 1], got {w}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = Error;
    fn try_from(w: f64) -> Result<Self> {
        Self::new(w)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> f64 {
        w.0
    }
}

pub fn fuse(p_spp: &RawPrediction, p_gmp: &RawPrediction, w: FusionWeight) -> RawPrediction {
    let (a, b) = (p_spp.values(), p_gmp.values());
    let mut out = [0.0; BINS];
    for i in 0..BINS {
        out[i] = w.0 * a[i] + (1.0 - w.0) * b[i];
    }
    RawPrediction::new(out).expect("convex combination of non-negative vectors")
}

/// Mean CDLoss of the fused predictions at weight `w`, `None` if any fused output is all zero.
pub fn fused_cd_loss(
    preds_spp: &[RawPrediction],
    preds_gmp: &[RawPrediction],
    gts: &[ScoreDistribution],
    w: FusionWeight,
) -> Option<f64> {
    let mut total = 0.0;
    for ((a, b), g) in preds_spp.iter().zip(preds_gmp).zip(gts) {
        total += cd_loss(&fuse(a, b, w).normalize().ok()?, g);
    }
    Some(total / gts.len() as f64)
}

/// Grid search over `w in {0, 0.01, ..., 1}` for the lowest mean validation CDLoss.
///
/// Ties keep the smallest weight.
pub fn learn_fusion_weight(
    preds_spp: &[RawPrediction],
    preds_gmp: &[RawPrediction],
    gts: &[ScoreDistribution],
) -> Result<FusionWeight> {
    if gts.is_empty() {
        return Err(Error::EmptyInput("fusion weight needs a validation set"));
    }
    if preds_spp.len() != gts.len() || preds_gmp.len() != gts.len() {
        return Err(Error::shape(
            "learn_fusion_weight",
            format!(
                "{} spp / {} gmp predictions for {} ground truths",
                preds_spp.len(),
                preds_gmp.len(),
                gts.len()
            ),
        ));
    }
    let mut best: Option<(f64, FusionWeight)> = None;
    for k in 0..=100 {
        let w = FusionWeight(k as f64 / 100.0);
        if let Some(loss) = fused_cd_loss(preds_spp, preds_gmp, gts, w) {
            if best.is_none_or(|(b, _)| loss < b) {
                best = Some((loss, w));
            }
        }
    }
    best.map(|(_, w)| w).ok_or_else(|| {
        Error::DegeneratePrediction("every fusion weight yields an all-zero prediction".into())
    })
}
