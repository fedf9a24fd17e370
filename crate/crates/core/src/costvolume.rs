//! Plane-sweep stereo cost volume over the target frustum with an
//! EMA-tracked depth range.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};
use crate::geometry::{project, DepthMap, ImageBuffer, Intrinsics, RigidTransform};

/// Dense per-pixel feature descriptors, row-major, descriptor-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    /// Descriptor length.
    pub len: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("descriptor length must be >= 1"));
        }
        if data.len() != width * height * len {
            return Err(Error::invalid("feature data length mismatch"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature values must be finite"));
        }
        Ok(FeatureMap {
            width,
            height,
            len,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, k: usize) -> f64 {
        self.data[(y * self.width + x) * self.len + k]
    }

    #[inline]
    pub fn descriptor(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.len;
        &self.data[base..base + self.len]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Bilinear per-component sample with border clamping.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        let tap = crate::geometry::BilinearTap::new(x, y, self.width, self.height);
        for (k, o) in out.iter_mut().enumerate() {
            *o = tap.w00 * self.get(tap.x0, tap.y0, k)
                + tap.w10 * self.get(tap.x1, tap.y0, k)
                + tap.w01 * self.get(tap.x0, tap.y1, k)
                + tap.w11 * self.get(tap.x1, tap.y1, k);
        }
        tap.in_bounds
    }
}

/// Deterministic descriptor kinds standing behind one interface so the volume
/// math can be exercised without a learned feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorKind {
    /// Raw intensities; descriptor length equals the channel count.
    Intensity,
    /// Intensities plus central-difference x/y gradients of the channel mean.
    Grad,
    /// Flattened border-clamped 3x3 neighbourhood of every channel.
    Patch3,
}

pub fn extract_features(img: &ImageBuffer, kind: DescriptorKind) -> FeatureMap {
    let (w, h) = img.shape();
    let c = img.channels;
    match kind {
        DescriptorKind::Intensity => {
            FeatureMap::new(w, h, c, img.data().to_vec()).expect("valid image implies valid features")
        }
        DescriptorKind::Grad => {
            let mut data = Vec::with_capacity(w * h * (c + 2));
            let mean = |x: usize, y: usize| -> f64 {
                (0..c).map(|ch| img.get(x, y, ch)).sum::<f64>() / c as f64
            };
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(img.get(x, y, ch));
                    }
                    let xm = x.saturating_sub(1);
                    let xp = (x + 1).min(w - 1);
                    let ym = y.saturating_sub(1);
                    let yp = (y + 1).min(h - 1);
                    data.push(0.5 * (mean(xp, y) - mean(xm, y)));
                    data.push(0.5 * (mean(x, yp) - mean(x, ym)));
                }
            }
            FeatureMap::new(w, h, c + 2, data).expect("constructed in-range")
        }
        DescriptorKind::Patch3 => {
            let mut data = Vec::with_capacity(w * h * 9 * c);
            for y in 0..h {
                for x in 0..w {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            for ch in 0..c {
                                data.push(img.get(xx, yy, ch));
                            }
                        }
                    }
                }
            }
            FeatureMap::new(w, h, 9 * c, data).expect("constructed in-range")
        }
    }
}

/// EMA-tracked sweep range `(d_min, d_max)` in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRangeState {
    pub d_min: f64,
    pub d_max: f64,
    pub momentum: f64,
}

impl DepthRangeState {
    pub fn new(d_min: f64, d_max: f64, momentum: f64) -> Result<Self> {
        if !(d_min > 0.0 && d_min < d_max) {
            return Err(Error::invalid("require 0 < d_min < d_max"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(DepthRangeState {
            d_min,
            d_max,
            momentum,
        })
    }
}

/// `P` depths linearly spaced over the current range (inclusive endpoints).
pub fn plane_depths(state: &DepthRangeState, planes: usize) -> Result<Vec<f64>> {
    if planes < 2 {
        return Err(Error::invalid("need at least 2 planes"));
    }
    let step = (state.d_max - state.d_min) / (planes - 1) as f64;
    Ok((0..planes).map(|i| state.d_min + i as f64 * step).collect())
}

/// EMA update from batch depth statistics: the batch mean of per-map minima
/// and maxima each pull the state with rate `1 - momentum`.
pub fn update_depth_range(state: &DepthRangeState, batch: &[DepthMap]) -> Result<DepthRangeState> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let mean_min = batch.iter().map(|d| d.min()).sum::<f64>() / n;
    let mean_max = batch.iter().map(|d| d.max()).sum::<f64>() / n;
    let m = state.momentum;
    let d_min = m * state.d_min + (1.0 - m) * mean_min;
    let d_max = m * state.d_max + (1.0 - m) * mean_max;
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::invalid(alloc::format!(
            "depth range update degenerated: d_min={d_min}, d_max={d_max}"
        )));
    }
    Ok(DepthRangeState {
        d_min,
        d_max,
        momentum: m,
    })
}

/// P x H x W matching costs over fronto-parallel depth planes.
#[derive(Debug, Clone)]
pub struct CostVolume {
    /// Strictly increasing plane depths, millimetres.
    pub plane_depths: Vec<f64>,
    pub width: usize,
    pub height: usize,
    costs: Vec<f64>,
    valid: Vec<bool>,
}

impl CostVolume {
    #[inline]
    fn idx(&self, plane: usize, x: usize, y: usize) -> usize {
        (plane * self.height + y) * self.width + x
    }

    #[inline]
    pub fn cost(&self, plane: usize, x: usize, y: usize) -> f64 {
        self.costs[self.idx(plane, x, y)]
    }

    #[inline]
    pub fn is_valid(&self, plane: usize, x: usize, y: usize) -> bool {
        self.valid[self.idx(plane, x, y)]
    }

    pub fn planes(&self) -> usize {
        self.plane_depths.len()
    }

    /// Index of the lowest-cost valid plane at a pixel, if any plane is valid.
    pub fn argmin_plane(&self, x: usize, y: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for p in 0..self.planes() {
            if self.is_valid(p, x, y) {
                let c = self.cost(p, x, y);
                if best.map_or(true, |(_, bc)| c < bc) {
                    best = Some((p, c));
                }
            }
        }
        best.map(|(p, _)| p)
    }
}

/// Build the cost volume: for every plane depth, warp each source feature map
/// into the target view under that constant depth and accumulate the
/// mean-over-descriptor L1 distance to the target features, averaged over the
/// sources whose sample landed in bounds.
pub fn build_cost_volume(
    target_feat: &FeatureMap,
    source_feats: &[FeatureMap],
    poses: &[RigidTransform],
    k: &Intrinsics,
    state: &DepthRangeState,
    planes: usize,
) -> Result<CostVolume> {
    if source_feats.is_empty() {
        return Err(Error::invalid("need at least one source frame"));
    }
    if source_feats.len() != poses.len() {
        return Err(Error::invalid("one pose per source frame required"));
    }
    let (w, h) = target_feat.shape();
    let len = target_feat.len;
    if source_feats.iter().any(|f| f.shape() != (w, h) || f.len != len) {
        return Err(Error::invalid("feature maps must share shape and length"));
    }
    let depths = plane_depths(state, planes)?;
    let mut costs = vec![0.0; planes * w * h];
    let mut valid = vec![false; planes * w * h];
    let mut sample = vec![0.0; len];
    for (pi, d) in depths.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n_src = 0usize;
                for (feat, pose) in source_feats.iter().zip(poses) {
                    let proj = project(x as f64, y as f64, *d, k, pose)?;
                    if !proj.in_front() {
                        continue;
                    }
                    if !feat.sample(proj.x, proj.y, &mut sample) {
                        continue;
                    }
                    let target = target_feat.descriptor(x, y);
                    let l1 = target
                        .iter()
                        .zip(&sample)
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                        / len as f64;
                    acc += l1;
                    n_src += 1;
                }
                let idx = (pi * h + y) * w + x;
                if n_src > 0 {
                    costs[idx] = acc / n_src as f64;
                    valid[idx] = true;
                }
            }
        }
    }
    Ok(CostVolume {
        plane_depths: depths,
        width: w,
        height: h,
        costs,
        valid,
    })
}

/// Softmax(-cost/temperature)-weighted sum of plane depths per pixel.
/// Pixels with no valid plane fall back to the mid-range depth.
pub fn soft_argmin_depth(cv: &CostVolume, temperature: f64) -> Result<DepthMap> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    let planes = cv.planes();
    let mid = 0.5 * (cv.plane_depths[0] + cv.plane_depths[planes - 1]);
    let mut data = Vec::with_capacity(cv.width * cv.height);
    for y in 0..cv.height {
        for x in 0..cv.width {
            let mut min_cost = f64::INFINITY;
            for p in 0..planes {
                if cv.is_valid(p, x, y) {
                    min_cost = min_cost.min(cv.cost(p, x, y));
                }
            }
            if !min_cost.is_finite() {
                data.push(mid);
                continue;
            }
            let mut wsum = 0.0;
            let mut dsum = 0.0;
            for p in 0..planes {
                if cv.is_valid(p, x, y) {
                    let w = (-(cv.cost(p, x, y) - min_cost) / temperature).exp();
                    wsum += w;
                    dsum += w * cv.plane_depths[p];
                }
            }
            data.push(dsum / wsum);
        }
    }
    DepthMap::new(cv.width, cv.height, data)
}
