//! Patchmatch with adaptive propagation: gradient-based keypoint detection,
//! feature self-correlation around each keypoint, offset decoding, support
//! domain assembly and the patch-based photometric loss.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::costvolume::FeatureMap;
#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};
use crate::geometry::{project, DepthMap, ImageBuffer, Intrinsics, RigidTransform};
use crate::photometric::{point_photometric, PhotometricConfig};

/// Default number of adaptive neighbours per keypoint.
pub const DEFAULT_NEIGHBOURS: usize = 8;

/// Cell-median multiplier of the adaptive detection threshold.
pub const DETECT_THRESHOLD_FACTOR: f64 = 1.5;

/// Detected keypoints with their gradient-magnitude scores.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Central-difference gradient magnitude of the channel-mean intensity.
fn gradient_magnitude(img: &ImageBuffer, x: usize, y: usize) -> f64 {
    let (w, h) = img.shape();
    let mean = |xx: usize, yy: usize| -> f64 {
        (0..img.channels).map(|c| img.get(xx, yy, c)).sum::<f64>() / img.channels as f64
    };
    let gx = 0.5 * (mean((x + 1).min(w - 1), y) - mean(x.saturating_sub(1), y));
    let gy = 0.5 * (mean(x, (y + 1).min(h - 1)) - mean(x, y.saturating_sub(1)));
    gx.hypot(gy)
}

/// Grid-cell gradient maxima with a median-based adaptive threshold: within
/// each `cell x cell` block the strongest-gradient pixel is kept if its
/// magnitude exceeds the block median times [`DETECT_THRESHOLD_FACTOR`].
/// Results are ranked by score and truncated to `target_count`. Flat images
/// yield fewer (possibly zero) keypoints.
pub fn detect_keypoints(img: &ImageBuffer, target_count: usize, cell: usize) -> Result<KeypointSet> {
    if target_count == 0 {
        return Err(Error::invalid("target_count must be >= 1"));
    }
    if cell == 0 {
        return Err(Error::invalid("cell size must be >= 1"));
    }
    let (w, h) = img.shape();
    let mut candidates: Vec<((usize, usize), f64)> = Vec::new();
    let mut cell_grads: Vec<f64> = Vec::new();
    let mut cy = 0;
    while cy < h {
        let mut cx = 0;
        while cx < w {
            cell_grads.clear();
            let mut best = ((cx, cy), f64::NEG_INFINITY);
            for y in cy..(cy + cell).min(h) {
                for x in cx..(cx + cell).min(w) {
                    let g = gradient_magnitude(img, x, y);
                    cell_grads.push(g);
                    // deterministic tie-break: first in row-major order wins
                    if g > best.1 {
                        best = ((x, y), g);
                    }
                }
            }
            let med = crate::mathx::median(&cell_grads).unwrap_or(0.0);
            if best.1 > med * DETECT_THRESHOLD_FACTOR && best.1 > 0.0 {
                candidates.push(best);
            }
            cx += cell;
        }
        cy += cell;
    }
    candidates.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| (a.0 .1, a.0 .0).cmp(&(b.0 .1, b.0 .0)))
    });
    candidates.truncate(target_count);
    Ok(KeypointSet {
        points: candidates.iter().map(|c| c.0).collect(),
        scores: candidates.iter().map(|c| c.1).collect(),
    })
}

/// Per-keypoint `r x r` self-correlation grids.
///
/// The window is even (the paper's 8x8) and spans offsets `-r/2 ..= r/2 - 1`
/// in both axes, so it has no central entry alignment; entry `(0, 0)` is the
/// keypoint itself. Out-of-bounds neighbours read border-clamped features and
/// are flagged.
#[derive(Debug, Clone)]
pub struct CorrelationVolume {
    pub search_range: usize,
    pub keypoints: Vec<(usize, usize)>,
    values: Vec<Vec<f64>>,
    clamped: Vec<Vec<bool>>,
}

impl CorrelationVolume {
    /// Linear index of window offset `(dx, dy)`.
    #[inline]
    pub fn offset_index(&self, dx: i64, dy: i64) -> usize {
        let half = (self.search_range / 2) as i64;
        ((dy + half) * self.search_range as i64 + (dx + half)) as usize
    }

    pub fn values(&self, kp_index: usize) -> &[f64] {
        &self.values[kp_index]
    }

    pub fn clamped(&self, kp_index: usize) -> &[bool] {
        &self.clamped[kp_index]
    }
}

/// Enumerate the window offsets of an even `r x r` search window.
pub fn window_offsets(r: usize) -> impl Iterator<Item = (i64, i64)> {
    let half = (r / 2) as i64;
    (-half..half).flat_map(move |dy| (-half..half).map(move |dx| (dx, dy)))
}

/// Dot-product self-correlation `F(p_k) . F(p_k + delta) / l` for every
/// offset in the `r x r` window around every keypoint.
pub fn correlation_volume(feat: &FeatureMap, kp: &KeypointSet, r: usize) -> Result<CorrelationVolume> {
    if r < 4 || r % 2 != 0 {
        return Err(Error::invalid("search range must be even and >= 4"));
    }
    let (w, h) = feat.shape();
    let l = feat.len as f64;
    let mut values = Vec::with_capacity(kp.len());
    let mut clamped = Vec::with_capacity(kp.len());
    for &(x, y) in &kp.points {
        if x >= w || y >= h {
            return Err(Error::invalid("keypoint out of bounds"));
        }
        let center = feat.descriptor(x, y);
        let mut v = Vec::with_capacity(r * r);
        let mut cl = Vec::with_capacity(r * r);
        for (dx, dy) in window_offsets(r) {
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            let inside = nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64;
            let cx = nx.clamp(0, w as i64 - 1) as usize;
            let cy = ny.clamp(0, h as i64 - 1) as usize;
            let neighbour = feat.descriptor(cx, cy);
            let dot = center.iter().zip(neighbour).map(|(a, b)| a * b).sum::<f64>();
            v.push(dot / l);
            cl.push(!inside);
        }
        values.push(v);
        clamped.push(cl);
    }
    Ok(CorrelationVolume {
        search_range: r,
        keypoints: kp.points.clone(),
        values,
        clamped,
    })
}

/// The unit 3x3 ring: eight base offsets around a keypoint, row-major order.
pub fn unit_ring() -> [(f64, f64); 8] {
    [
        (-1.0, -1.0),
        (0.0, -1.0),
        (1.0, -1.0),
        (-1.0, 0.0),
        (1.0, 0.0),
        (-1.0, 1.0),
        (0.0, 1.0),
        (1.0, 1.0),
    ]
}

/// Turns a keypoint's correlation window into per-direction offset
/// adjustments. Implementations must keep the adjustments within their
/// configured radius.
pub trait OffsetDecoder {
    fn base_grid(&self) -> &[(f64, f64)];

    /// One displacement adjustment per base direction.
    fn decode(&self, correlation: &[f64], search_range: usize) -> Vec<(f64, f64)>;
}

/// Fixed-grid baseline: zero adjustments, reproducing classic patchmatch.
#[derive(Debug, Clone)]
pub struct FixedGridDecoder {
    base: Vec<(f64, f64)>,
}

impl FixedGridDecoder {
    pub fn new() -> Self {
        FixedGridDecoder {
            base: unit_ring().to_vec(),
        }
    }
}

impl Default for FixedGridDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl OffsetDecoder for FixedGridDecoder {
    fn base_grid(&self) -> &[(f64, f64)] {
        &self.base
    }

    fn decode(&self, _correlation: &[f64], _search_range: usize) -> Vec<(f64, f64)> {
        vec![(0.0, 0.0); self.base.len()]
    }
}

/// Deterministic stand-in for a learned offset decoder: the window is split
/// into the angular sectors of the base directions and each direction moves
/// to the softmax(correlation / temperature)-weighted centroid of its sector.
#[derive(Debug, Clone)]
pub struct SectorSoftArgmaxDecoder {
    base: Vec<(f64, f64)>,
    pub temperature: f64,
    pub max_radius: f64,
}

impl SectorSoftArgmaxDecoder {
    pub fn new(temperature: f64, max_radius: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if !(max_radius > 0.0) {
            return Err(Error::invalid("max radius must be > 0"));
        }
        Ok(SectorSoftArgmaxDecoder {
            base: unit_ring().to_vec(),
            temperature,
            max_radius,
        })
    }
}

/// Sector index of a window offset: the base direction with the closest
/// angle (ties to the lower index). The `(0, 0)` entry carries no direction
/// and belongs to no sector.
pub fn sector_of(dx: i64, dy: i64, base: &[(f64, f64)]) -> Option<usize> {
    if dx == 0 && dy == 0 {
        return None;
    }
    let angle = (dy as f64).atan2(dx as f64);
    let mut best = 0usize;
    let mut best_diff = f64::INFINITY;
    for (i, (bx, by)) in base.iter().enumerate() {
        let ba = by.atan2(*bx);
        let mut diff = (angle - ba).abs();
        if diff > core::f64::consts::PI {
            diff = 2.0 * core::f64::consts::PI - diff;
        }
        if diff < best_diff - 1e-12 {
            best_diff = diff;
            best = i;
        }
    }
    Some(best)
}

impl OffsetDecoder for SectorSoftArgmaxDecoder {
    fn base_grid(&self) -> &[(f64, f64)] {
        &self.base
    }

    fn decode(&self, correlation: &[f64], search_range: usize) -> Vec<(f64, f64)> {
        let r = search_range;
        debug_assert_eq!(correlation.len(), r * r);
        let n = self.base.len();
        let mut acc_w = vec![0.0; n];
        let mut acc_x = vec![0.0; n];
        let mut acc_y = vec![0.0; n];
        let mut maxc = vec![f64::NEG_INFINITY; n];
        for (idx, (dx, dy)) in window_offsets(r).enumerate() {
            if let Some(s) = sector_of(dx, dy, &self.base) {
                maxc[s] = maxc[s].max(correlation[idx]);
            }
        }
        for (idx, (dx, dy)) in window_offsets(r).enumerate() {
            if let Some(s) = sector_of(dx, dy, &self.base) {
                let w = ((correlation[idx] - maxc[s]) / self.temperature).exp();
                acc_w[s] += w;
                acc_x[s] += w * dx as f64;
                acc_y[s] += w * dy as f64;
            }
        }
        (0..n)
            .map(|i| {
                // sectors partition the window, so acc_w[i] > 0 for r >= 4
                let mx = acc_x[i] / acc_w[i];
                let my = acc_y[i] / acc_w[i];
                let (ox, oy) = self.base[i];
                let mut ddx = mx - ox;
                let mut ddy = my - oy;
                let norm = ddx.hypot(ddy);
                if norm > self.max_radius {
                    let s = self.max_radius / norm;
                    ddx *= s;
                    ddy *= s;
                }
                (ddx, ddy)
            })
            .collect()
    }
}

/// A keypoint plus its adaptively placed neighbours, assumed co-depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportDomain {
    pub center: (f64, f64),
    /// Effective displacements `o_i + delta_o_i`.
    pub offsets: Vec<(f64, f64)>,
    /// Center first, then one member per offset.
    pub members: Vec<(f64, f64)>,
    /// True when some non-center member collapsed onto the center.
    pub degenerate: bool,
}

/// `members = {p_k} ∪ {p_k + o_i + delta_o_i}`.
pub fn assemble_support_domain(
    kp: (usize, usize),
    base: &[(f64, f64)],
    deltas: &[(f64, f64)],
) -> Result<SupportDomain> {
    if base.len() != deltas.len() {
        return Err(Error::invalid("one delta per base offset required"));
    }
    let center = (kp.0 as f64, kp.1 as f64);
    let mut offsets = Vec::with_capacity(base.len());
    let mut members = Vec::with_capacity(base.len() + 1);
    members.push(center);
    let mut degenerate = false;
    for ((ox, oy), (dx, dy)) in base.iter().zip(deltas) {
        let ex = ox + dx;
        let ey = oy + dy;
        if ex.abs() < 1e-12 && ey.abs() < 1e-12 {
            degenerate = true;
        }
        offsets.push((ex, ey));
        members.push((center.0 + ex, center.1 + ey));
    }
    Ok(SupportDomain {
        center,
        offsets,
        members,
        degenerate,
    })
}

/// Detect + correlate + decode + assemble in one step, using `decoder` for
/// the adaptive offsets.
pub fn build_support_domains(
    feat: &FeatureMap,
    kp: &KeypointSet,
    r: usize,
    decoder: &dyn OffsetDecoder,
) -> Result<Vec<SupportDomain>> {
    let cv = correlation_volume(feat, kp, r)?;
    kp.points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let deltas = decoder.decode(cv.values(i), cv.search_range);
            assemble_support_domain(p, decoder.base_grid(), &deltas)
        })
        .collect()
}

/// Bilinear depth at every member; the flag is false where the member fell
/// outside the depth map (border-clamped value returned anyway).
pub fn sample_domain_depths(depth: &DepthMap, dom: &SupportDomain) -> Vec<(f64, bool)> {
    dom.members
        .iter()
        .map(|(x, y)| depth.sample(*x, *y))
        .collect()
}

/// Outcome of [`patch_photometric_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLossReport {
    /// Mean over domains (all-invalid domains count as zero).
    pub total: f64,
    pub per_domain: Vec<f64>,
    /// Domains where no member produced a usable sample in any source.
    pub invalid_domains: usize,
}

/// Patch-based photometric loss: every member's sampled depth projects the
/// *keypoint* coordinate into each source; the pointwise photometric error
/// between the target keypoint sample and each warped sample is averaged over
/// the domain, and the per-domain minimum over sources is kept.
pub fn patch_photometric_loss(
    target: &ImageBuffer,
    sources: &[ImageBuffer],
    poses: &[RigidTransform],
    depth: &DepthMap,
    domains: &[SupportDomain],
    k: &Intrinsics,
    cfg: &PhotometricConfig,
) -> Result<PatchLossReport> {
    if domains.is_empty() {
        return Err(Error::invalid("need at least one support domain"));
    }
    if sources.is_empty() || sources.len() != poses.len() {
        return Err(Error::invalid("need sources with matching poses"));
    }
    cfg.validate()?;
    let channels = target.channels;
    let mut tvals = vec![0.0; channels];
    let mut svals = vec![0.0; channels];
    let mut per_domain = Vec::with_capacity(domains.len());
    let mut invalid_domains = 0usize;
    for dom in domains {
        target.sample(dom.center.0, dom.center.1, &mut tvals);
        let depths = sample_domain_depths(depth, dom);
        let mut best: Option<f64> = None;
        for (src, pose) in sources.iter().zip(poses) {
            let mut acc = 0.0;
            let mut n = 0usize;
            for (d, depth_ok) in &depths {
                if !depth_ok || !(*d > 0.0) {
                    continue;
                }
                let proj = project(dom.center.0, dom.center.1, *d, k, pose)?;
                if !proj.in_front() {
                    continue;
                }
                if !src.sample(proj.x, proj.y, &mut svals) {
                    continue;
                }
                let mut phi = 0.0;
                for c in 0..channels {
                    phi += point_photometric(tvals[c], svals[c], cfg);
                }
                acc += phi / channels as f64;
                n += 1;
            }
            if n > 0 {
                let loss = acc / n as f64;
                best = Some(best.map_or(loss, |b: f64| b.min(loss)));
            }
        }
        match best {
            Some(l) => per_domain.push(l),
            None => {
                per_domain.push(0.0);
                invalid_domains += 1;
            }
        }
    }
    let total = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
    Ok(PatchLossReport {
        total,
        per_domain,
        invalid_domains,
    })
}

/// Plain-text export: one row per domain with the keypoint followed by every
/// member coordinate.
pub fn support_domain_table(domains: &[SupportDomain]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    for dom in domains {
        let _ = write!(s, "{:.3} {:.3}", dom.center.0, dom.center.1);
        for (x, y) in &dom.members {
            let _ = write!(s, " {x:.3} {y:.3}");
        }
        s.push('\n');
    }
    s
}
