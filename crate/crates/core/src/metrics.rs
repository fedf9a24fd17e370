//! Depth evaluation: median scaling, clipping, and the five standard metrics.

#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::mathx::median;

/// The five standard depth metrics. `delta` is a percentage in [0, 100].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta: f64,
    /// Number of pixels that entered the reduction.
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    /// Clip the (scaled) prediction at this depth, millimetres.
    pub clip_mm: Option<f64>,
    /// When true, ground-truth pixels beyond the clip are excluded from the
    /// reduction instead of being compared against the clipped prediction.
    pub mask_gt_beyond_clip: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            clip_mm: Some(150.0),
            mask_gt_beyond_clip: false,
        }
    }
}

/// Multiply the prediction by `median(gt) / median(pred)`. Returns the scaled
/// map and the factor.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<(DepthMap, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            expected: gt.shape(),
            got: pred.shape(),
        });
    }
    let mp = median(pred.data()).ok_or_else(|| Error::invalid("empty prediction"))?;
    let mg = median(gt.data()).ok_or_else(|| Error::invalid("empty ground truth"))?;
    if !(mp > 0.0 && mg > 0.0) {
        return Err(Error::invalid("medians must be > 0"));
    }
    let factor = mg / mp;
    Ok((pred.map(|d| d * factor)?, factor))
}

/// Abs Rel, Sq Rel, RMSE, RMSE log and delta(1.25) over the valid pixels.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, cfg: &MetricsConfig) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            expected: gt.shape(),
            got: pred.shape(),
        });
    }
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut se = 0.0;
    let mut se_log = 0.0;
    let mut hits = 0usize;
    let mut n = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let gt_v = *g;
        if let Some(clip) = cfg.clip_mm {
            if cfg.mask_gt_beyond_clip && gt_v > clip {
                continue;
            }
        }
        let pred_v = match cfg.clip_mm {
            Some(clip) => p.min(clip),
            None => *p,
        };
        let diff = (gt_v - pred_v).abs();
        abs_rel += diff / gt_v;
        sq_rel += diff * diff / gt_v;
        se += diff * diff;
        let dl = gt_v.ln() - pred_v.ln();
        se_log += dl * dl;
        let ratio = (gt_v / pred_v).max(pred_v / gt_v);
        if ratio < 1.25 {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no valid pixels to evaluate"));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        delta: hits as f64 / nf * 100.0,
        n,
    })
}
