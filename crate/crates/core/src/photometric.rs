//! Photometric error: SSIM, L1, the weighted combination, per-pixel minimum
//! over source frames, and edge-aware smoothness.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImageBuffer, ValidityMask};

/// Weights and window for the SSIM/L1 mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricConfig {
    /// SSIM share of the mixture, in [0, 1].
    pub alpha: f64,
    /// Odd box-filter window size, >= 3.
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            alpha: 0.85,
            ssim_window: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl PhotometricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::invalid("ssim window must be odd and >= 3"));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::invalid("ssim stabilizers must be > 0"));
        }
        Ok(())
    }
}

/// Per-pixel loss values with the validity mask they were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
    pub mask: ValidityMask,
}

impl LossMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>, mask: ValidityMask) -> Result<Self> {
        if data.len() != width * height || (mask.width, mask.height) != (width, height) {
            return Err(Error::invalid("loss map shape mismatch"));
        }
        Ok(LossMap {
            width,
            height,
            data,
            mask,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mean over masked-in pixels; 0 when nothing is valid.
    pub fn masked_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, m) in self.data.iter().zip(self.mask.data()) {
            if *m {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

fn check_same_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.shape() != b.shape() || a.channels != b.channels {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            got: b.shape(),
        });
    }
    Ok(())
}

/// Local means, variances and covariance over a clamped box window.
/// The window is intersected with the image; moments are normalized by the
/// number of pixels actually covered.
fn window_moments(
    a: &ImageBuffer,
    b: &ImageBuffer,
    x: usize,
    y: usize,
    c: usize,
    half: usize,
) -> (f64, f64, f64, f64, f64) {
    let x0 = x.saturating_sub(half);
    let y0 = y.saturating_sub(half);
    let x1 = (x + half).min(a.width - 1);
    let y1 = (y + half).min(a.height - 1);
    let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let va = a.get(xx, yy, c);
            let vb = b.get(xx, yy, c);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let ma = sa / n;
    let mb = sb / n;
    (ma, mb, saa / n - ma * ma, sbb / n - mb * mb, sab / n - ma * mb)
}

#[inline]
fn ssim_from_moments(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Per-pixel SSIM between `a` and `b`, averaged over channels. Values lie in
/// `[-1, 1]`; the mask is all-true.
pub fn ssim_map(a: &ImageBuffer, b: &ImageBuffer, cfg: &PhotometricConfig) -> Result<LossMap> {
    check_same_shape(a, b)?;
    cfg.validate()?;
    let half = cfg.ssim_window / 2;
    let (w, h) = a.shape();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for c in 0..a.channels {
                let (ma, mb, va, vb, cov) = window_moments(a, b, x, y, c, half);
                acc += ssim_from_moments(ma, mb, va, vb, cov, cfg.c1, cfg.c2);
            }
            data.push(acc / a.channels as f64);
        }
    }
    LossMap::new(w, h, data, ValidityMask::filled(w, h, true))
}

/// Zero-window ("point") SSIM between two scalar samples: the closed form the
/// full SSIM takes on constant patches. Used by the patch-based loss, where
/// the target operand is a single keypoint sample.
#[inline]
pub fn point_ssim(u: f64, v: f64, cfg: &PhotometricConfig) -> f64 {
    (2.0 * u * v + cfg.c1) / (u * u + v * v + cfg.c1)
}

/// d(point_ssim)/dv at fixed u.
#[inline]
pub fn point_ssim_dv(u: f64, v: f64, cfg: &PhotometricConfig) -> f64 {
    let den = u * u + v * v + cfg.c1;
    (2.0 * u * den - (2.0 * u * v + cfg.c1) * 2.0 * v) / (den * den)
}

/// Pointwise weighted photometric error between two scalar samples:
/// `alpha * (1 - point_ssim)/2 + (1 - alpha) * |u - v|`.
#[inline]
pub fn point_photometric(u: f64, v: f64, cfg: &PhotometricConfig) -> f64 {
    cfg.alpha * 0.5 * (1.0 - point_ssim(u, v, cfg)) + (1.0 - cfg.alpha) * (u - v).abs()
}

/// Per-pixel weighted photometric error `alpha*(1-SSIM)/2 + (1-alpha)*L1`,
/// with L1 averaged over channels. The provided mask is carried through so
/// downstream reductions skip invalid pixels.
pub fn photometric_error(
    target: &ImageBuffer,
    warped: &ImageBuffer,
    mask: &ValidityMask,
    cfg: &PhotometricConfig,
) -> Result<LossMap> {
    check_same_shape(target, warped)?;
    if (mask.width, mask.height) != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: target.shape(),
            got: (mask.width, mask.height),
        });
    }
    let ssim = ssim_map(target, warped, cfg)?;
    let (w, h) = target.shape();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut l1 = 0.0;
            for c in 0..target.channels {
                l1 += (target.get(x, y, c) - warped.get(x, y, c)).abs();
            }
            l1 /= target.channels as f64;
            let v = cfg.alpha * 0.5 * (1.0 - ssim.get(x, y)) + (1.0 - cfg.alpha) * l1;
            data.push(v.max(0.0));
        }
    }
    LossMap::new(w, h, data, mask.clone())
}

/// Elementwise minimum over per-source loss maps. A pixel invalid in one map
/// is treated as +inf for that map; the output mask is the union.
pub fn min_over_sources(losses: &[LossMap]) -> Result<LossMap> {
    let first = losses
        .first()
        .ok_or_else(|| Error::invalid("min_over_sources needs at least one map"))?;
    let (w, h) = (first.width, first.height);
    if losses.iter().any(|l| (l.width, l.height) != (w, h)) {
        return Err(Error::invalid("loss maps must share a shape"));
    }
    let mut data = vec![0.0; w * h];
    let mut mask = ValidityMask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            let mut any = false;
            for l in losses {
                if l.mask.get(x, y) {
                    best = best.min(l.get(x, y));
                    any = true;
                }
            }
            if any {
                data[y * w + x] = best;
                mask.set(x, y, true);
            }
        }
    }
    LossMap::new(w, h, data, mask)
}

/// Edge-aware smoothness `mean(|grad D_n| * exp(-|grad I|))` with forward
/// differences; the depth is mean-normalized first, which makes the loss
/// invariant to global depth scaling. The x and y terms are each averaged
/// over the positions where their forward difference exists.
pub fn edge_aware_smoothness(depth: &DepthMap, img: &ImageBuffer) -> Result<f64> {
    if depth.shape() != img.shape() {
        return Err(Error::ShapeMismatch {
            expected: depth.shape(),
            got: img.shape(),
        });
    }
    let (w, h) = depth.shape();
    let mu = depth.mean();
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let dd = (depth.get(x + 1, y) - depth.get(x, y)).abs() / mu;
                let mut di = 0.0;
                for c in 0..img.channels {
                    di += (img.get(x + 1, y, c) - img.get(x, y, c)).abs();
                }
                sum_x += dd * (-di / img.channels as f64).exp();
            }
            if y + 1 < h {
                let dd = (depth.get(x, y + 1) - depth.get(x, y)).abs() / mu;
                let mut di = 0.0;
                for c in 0..img.channels {
                    di += (img.get(x, y + 1, c) - img.get(x, y, c)).abs();
                }
                sum_y += dd * (-di / img.channels as f64).exp();
            }
        }
    }
    let nx = ((w - 1) * h) as f64;
    let ny = (w * (h - 1)) as f64;
    let lx = if nx > 0.0 { sum_x / nx } else { 0.0 };
    let ly = if ny > 0.0 { sum_y / ny } else { 0.0 };
    Ok(lx + ly)
}
