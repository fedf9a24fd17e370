//! Cross-teaching and self-teaching consistency losses, and the appearance
//! simulator (gamma, color jitter, random masking) that drives the latter.

use alloc::vec::Vec;

#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImageBuffer, ValidityMask};
use crate::photometric::LossMap;
use crate::rng::SeededRng;

/// Unoccluded mask: true where no simulated occluder was painted.
pub type OcclusionMask = ValidityMask;

/// Which operand of a consistency loss is constant under differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockedOperand {
    /// The first (student / transformed-branch) depth.
    First,
    /// The second (teacher / original-branch) depth.
    Second,
}

/// A consistency loss value with its per-pixel map and stop-gradient tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub map: LossMap,
    pub blocked: BlockedOperand,
}

pub const CONSISTENCY_EPS: f64 = 1e-7;

fn check_positive(map: &DepthMap, name: &str) -> Result<()> {
    if map.data().iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid(alloc::format!("{name} depths must be > 0")));
    }
    Ok(())
}

/// Sum-normalized absolute difference `|a - b| / (a + b + eps)`, averaged
/// over the masked-in pixels.
fn consistency(
    a: &DepthMap,
    b: &DepthMap,
    mask: Option<&ValidityMask>,
    eps: f64,
    blocked: BlockedOperand,
) -> Result<ConsistencyLoss> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            got: b.shape(),
        });
    }
    check_positive(a, "first")?;
    check_positive(b, "second")?;
    let (w, h) = a.shape();
    let mask = match mask {
        Some(m) => {
            if (m.width, m.height) != (w, h) {
                return Err(Error::invalid("mask shape mismatch"));
            }
            m.clone()
        }
        None => ValidityMask::filled(w, h, true),
    };
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let da = a.get(x, y);
            let db = b.get(x, y);
            data.push((da - db).abs() / (da + db + eps));
        }
    }
    let map = LossMap::new(w, h, data, mask)?;
    Ok(ConsistencyLoss {
        value: map.masked_mean(),
        map,
        blocked,
    })
}

/// Cross-teaching: distill an external teacher depth into the student.
/// Gradients toward the teacher are blocked.
pub fn cross_teaching_loss(student: &DepthMap, teacher: &DepthMap, eps: f64) -> Result<ConsistencyLoss> {
    consistency(student, teacher, None, eps, BlockedOperand::Second)
}

/// Self-teaching: consistency between the original-branch depth and the
/// depth from appearance-transformed inputs, evaluated on unoccluded pixels.
/// Gradients toward the original branch are blocked.
pub fn self_teaching_loss(
    original: &DepthMap,
    transformed: &DepthMap,
    unoccluded: &OcclusionMask,
    eps: f64,
) -> Result<ConsistencyLoss> {
    // operand order (transformed, original) so the blocked tag names the
    // original branch
    consistency(transformed, original, Some(unoccluded), eps, BlockedOperand::Second)
}

/// Appearance simulator parameters. All ranges are sampled uniformly under
/// the configured seed; the pipeline order is gamma, color jitter, masking.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceSimConfig {
    pub gamma_range: (f64, f64),
    /// Additive brightness range.
    pub brightness_range: (f64, f64),
    /// Multiplicative contrast (about the per-channel mean) range.
    pub contrast_range: (f64, f64),
    /// Multiplicative saturation range (3-channel images only).
    pub saturation_range: (f64, f64),
    /// Additive hue rotation in turns (3-channel images only).
    pub hue_range: (f64, f64),
    /// Inclusive range of occluder rectangle counts.
    pub mask_count: (usize, usize),
    /// Inclusive range of occluder side lengths, pixels.
    pub mask_size_range: (usize, usize),
    /// Intensity painted inside occluders.
    pub mask_fill: f64,
    pub rng_seed: u64,
}

impl Default for AppearanceSimConfig {
    fn default() -> Self {
        AppearanceSimConfig {
            gamma_range: (0.5, 2.0),
            brightness_range: (-0.2, 0.2),
            contrast_range: (0.8, 1.25),
            saturation_range: (0.8, 1.2),
            hue_range: (-0.05, 0.05),
            mask_count: (1, 3),
            mask_size_range: (8, 32),
            mask_fill: 0.0,
            rng_seed: 0,
        }
    }
}

impl AppearanceSimConfig {
    /// Identity transform: useful as a config baseline in tests and runs.
    pub fn identity(seed: u64) -> Self {
        AppearanceSimConfig {
            gamma_range: (1.0, 1.0),
            brightness_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            hue_range: (0.0, 0.0),
            mask_count: (0, 0),
            mask_size_range: (1, 1),
            mask_fill: 0.0,
            rng_seed: seed,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.gamma_range.0 > 0.0) {
            return Err(Error::invalid("gamma lower bound must be > 0"));
        }
        let ranges = [
            self.gamma_range,
            self.brightness_range,
            self.contrast_range,
            self.saturation_range,
            self.hue_range,
        ];
        if ranges.iter().any(|(lo, hi)| lo > hi || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::invalid("jitter ranges must satisfy lo <= hi"));
        }
        if self.mask_count.0 > self.mask_count.1 {
            return Err(Error::invalid("mask count range must satisfy lo <= hi"));
        }
        if self.mask_size_range.0 == 0
            || self.mask_size_range.0 > self.mask_size_range.1
            || self.mask_size_range.1 > width.min(height)
        {
            return Err(Error::invalid("mask sizes must be positive and fit the image"));
        }
        if !(0.0..=1.0).contains(&self.mask_fill) {
            return Err(Error::invalid("mask fill must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-channel power law `v -> v^gamma`.
pub fn gamma_correct(img: &ImageBuffer, gamma: f64) -> Result<ImageBuffer> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite and > 0"));
    }
    ImageBuffer::from_fn(img.width, img.height, img.channels, |x, y, c| {
        img.get(x, y, c).powf(gamma)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in turns.
    pub hue: f64,
}

impl JitterParams {
    pub fn identity() -> Self {
        JitterParams {
            brightness: 0.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }
}

fn rgb_to_hsl(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = 0.5 * (max + min);
    if max == min {
        return (0.0, 0.0, l);
    }
    let d = max - min;
    let s = if l > 0.5 { d / (2.0 - max - min) } else { d / (max + min) };
    let h = if max == r {
        ((g - b) / d + if g < b { 6.0 } else { 0.0 }) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, l)
}

fn hue_to_rgb(p: f64, q: f64, mut t: f64) -> f64 {
    if t < 0.0 {
        t += 1.0;
    }
    if t > 1.0 {
        t -= 1.0;
    }
    if t < 1.0 / 6.0 {
        p + (q - p) * 6.0 * t
    } else if t < 0.5 {
        q
    } else if t < 2.0 / 3.0 {
        p + (q - p) * (2.0 / 3.0 - t) * 6.0
    } else {
        p
    }
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (f64, f64, f64) {
    if s == 0.0 {
        return (l, l, l);
    }
    let q = if l < 0.5 { l * (1.0 + s) } else { l + s - l * s };
    let p = 2.0 * l - q;
    (
        hue_to_rgb(p, q, h + 1.0 / 3.0),
        hue_to_rgb(p, q, h),
        hue_to_rgb(p, q, h - 1.0 / 3.0),
    )
}

/// Brightness (additive), contrast (affine about the per-channel image
/// mean), then saturation/hue in HSL space for 3-channel images. Output is
/// clamped to `[0, 1]`.
pub fn color_jitter(img: &ImageBuffer, params: &JitterParams) -> Result<ImageBuffer> {
    let mut means = alloc::vec![0.0; img.channels];
    for y in 0..img.height {
        for x in 0..img.width {
            for (c, m) in means.iter_mut().enumerate() {
                *m += img.get(x, y, c);
            }
        }
    }
    let n = (img.width * img.height) as f64;
    for m in means.iter_mut() {
        *m /= n;
    }
    ImageBuffer::from_fn(img.width, img.height, img.channels, |x, y, c| {
        let v = img.get(x, y, c) + params.brightness;
        let v = means[c] + params.contrast * (v - means[c]);
        v.clamp(0.0, 1.0)
    })
    .and_then(|base| {
        if img.channels != 3 || (params.saturation == 1.0 && params.hue == 0.0) {
            return Ok(base);
        }
        ImageBuffer::from_fn(base.width, base.height, 3, |x, y, c| {
            let (h, s, l) = rgb_to_hsl(base.get(x, y, 0), base.get(x, y, 1), base.get(x, y, 2));
            let mut h = h + params.hue;
            h -= h.floor();
            let s = (s * params.saturation).clamp(0.0, 1.0);
            let (r, g, b) = hsl_to_rgb(h, s, l);
            [r, g, b][c].clamp(0.0, 1.0)
        })
    })
}

/// Apply the full simulator: gamma, color jitter, then random rectangular
/// occluders. Returns the transformed image and the unoccluded mask `R`
/// (false exactly inside the painted rectangles). Deterministic in the seed.
///
/// Sampling order under the seed: gamma, brightness, contrast, saturation,
/// hue, occluder count, then per occluder width, height, x, y.
pub fn apply_appearance_simulator(
    img: &ImageBuffer,
    cfg: &AppearanceSimConfig,
) -> Result<(ImageBuffer, OcclusionMask)> {
    cfg.validate(img.width, img.height)?;
    let mut rng = SeededRng::new(cfg.rng_seed);
    let gamma = rng.range_f64(cfg.gamma_range.0, cfg.gamma_range.1);
    let params = JitterParams {
        brightness: rng.range_f64(cfg.brightness_range.0, cfg.brightness_range.1),
        contrast: rng.range_f64(cfg.contrast_range.0, cfg.contrast_range.1),
        saturation: rng.range_f64(cfg.saturation_range.0, cfg.saturation_range.1),
        hue: rng.range_f64(cfg.hue_range.0, cfg.hue_range.1),
    };
    let mut out = color_jitter(&gamma_correct(img, gamma)?, &params)?;
    let mut mask = OcclusionMask::filled(img.width, img.height, true);
    let count = rng.range_usize(cfg.mask_count.0, cfg.mask_count.1);
    for _ in 0..count {
        let mw = rng.range_usize(cfg.mask_size_range.0, cfg.mask_size_range.1);
        let mh = rng.range_usize(cfg.mask_size_range.0, cfg.mask_size_range.1);
        let x0 = rng.range_usize(0, img.width - mw);
        let y0 = rng.range_usize(0, img.height - mh);
        for y in y0..y0 + mh {
            for x in x0..x0 + mw {
                for c in 0..out.channels {
                    out.set(x, y, c, cfg.mask_fill);
                }
                mask.set(x, y, false);
            }
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn depth(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> DepthMap {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        DepthMap::new(w, h, data).unwrap()
    }

    #[test]
    fn cross_teaching_zero_at_equality() {
        let d = depth(6, 6, |x, y| 40.0 + (x + y) as f64);
        let l = cross_teaching_loss(&d, &d, 0.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.blocked, BlockedOperand::Second);
    }

    #[test]
    fn cross_teaching_analytic() {
        let s = depth(4, 4, |_, _| 3.0);
        let t = depth(4, 4, |_, _| 1.0);
        let l = cross_teaching_loss(&s, &t, 0.0).unwrap();
        assert!((l.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_teaching_scale_invariant() {
        let s = depth(5, 5, |x, y| 50.0 + (x * 3 + y) as f64);
        let t = depth(5, 5, |x, y| 60.0 + (x + y * 2) as f64);
        let a = cross_teaching_loss(&s, &t, 0.0).unwrap().value;
        let b = cross_teaching_loss(&s.map(|d| d * 7.3).unwrap(), &t.map(|d| d * 7.3).unwrap(), 0.0)
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn consistency_bounded_below_one() {
        let s = depth(4, 4, |_, _| 1e-6);
        let t = depth(4, 4, |_, _| 1e6);
        let l = cross_teaching_loss(&s, &t, 0.0).unwrap();
        assert!(l.value >= 0.0 && l.value < 1.0);
        assert!(l.map.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn self_teaching_masked_out_is_zero() {
        let d = depth(4, 4, |_, _| 10.0);
        let other = depth(4, 4, |_, _| 20.0);
        let mask = OcclusionMask::filled(4, 4, false);
        let l = self_teaching_loss(&d, &other, &mask, 0.0).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn self_teaching_analytic_half() {
        // transformed = 2 * original on half the unmasked pixels, equal on
        // the rest: per-pixel loss is 1/3 there, mean is 1/6
        let orig = depth(4, 2, |_, _| 10.0);
        let trans = depth(4, 2, |x, _| if x < 2 { 20.0 } else { 10.0 });
        let mask = OcclusionMask::filled(4, 2, true);
        let l = self_teaching_loss(&orig, &trans, &mask, 0.0).unwrap();
        assert!((l.value - 0.5 * (1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(l.blocked, BlockedOperand::Second);
    }

    #[test]
    fn rejects_nonpositive_depth() {
        assert!(DepthMap::new(2, 1, alloc::vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn gamma_identity_and_power_law() {
        let img = ImageBuffer::from_fn(4, 4, 1, |x, y, _| (x + y) as f64 / 8.0).unwrap();
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        let sq = gamma_correct(&ImageBuffer::from_fn(2, 2, 1, |_, _, _| 0.25).unwrap(), 2.0).unwrap();
        assert!((sq.get(0, 0, 0) - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn jitter_identity_params() {
        let img = ImageBuffer::from_fn(5, 4, 3, |x, y, c| ((x * 2 + y + c) % 9) as f64 / 9.0).unwrap();
        let out = color_jitter(&img, &JitterParams::identity()).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturation_fixes_grayscale() {
        let img = ImageBuffer::from_fn(5, 5, 3, |x, y, _| ((x + y) % 7) as f64 / 7.0).unwrap();
        let params = JitterParams {
            saturation: 0.5,
            ..JitterParams::identity()
        };
        let out = color_jitter(&img, &params).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hsl_roundtrip() {
        let cases = [(0.8, 0.2, 0.4), (0.1, 0.9, 0.3), (0.5, 0.5, 0.5), (0.0, 0.0, 1.0)];
        for (r, g, b) in cases {
            let (h, s, l) = rgb_to_hsl(r, g, b);
            let (r2, g2, b2) = hsl_to_rgb(h, s, l);
            assert!((r - r2).abs() < 1e-9 && (g - g2).abs() < 1e-9 && (b - b2).abs() < 1e-9);
        }
    }

    #[test]
    fn simulator_identity_config() {
        let img = ImageBuffer::from_fn(16, 16, 1, |x, y, _| ((x * y) % 13) as f64 / 13.0).unwrap();
        let (out, mask) = apply_appearance_simulator(&img, &AppearanceSimConfig::identity(3)).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask.count_true(), 256);
    }

    #[test]
    fn simulator_is_bit_reproducible() {
        let img = ImageBuffer::from_fn(40, 40, 1, |x, y, _| ((x + 3 * y) % 17) as f64 / 17.0).unwrap();
        let cfg = AppearanceSimConfig {
            rng_seed: 99,
            ..Default::default()
        };
        let (a, ma) = apply_appearance_simulator(&img, &cfg).unwrap();
        let (b, mb) = apply_appearance_simulator(&img, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn occluder_matches_seeded_replay_oracle() {
        let img = ImageBuffer::from_fn(20, 20, 1, |_, _, _| 0.5).unwrap();
        let cfg = AppearanceSimConfig {
            gamma_range: (1.0, 1.0),
            brightness_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            hue_range: (0.0, 0.0),
            mask_count: (1, 1),
            mask_size_range: (4, 4),
            mask_fill: 0.0,
            rng_seed: 7,
        };
        let (out, mask) = apply_appearance_simulator(&img, &cfg).unwrap();
        // replay the documented sampling order to locate the rectangle
        let mut rng = SeededRng::new(7);
        for _ in 0..5 {
            rng.unit_f64();
        }
        let _count = rng.range_usize(1, 1);
        let mw = rng.range_usize(4, 4);
        let mh = rng.range_usize(4, 4);
        let x0 = rng.range_usize(0, 20 - mw);
        let y0 = rng.range_usize(0, 20 - mh);
        assert_eq!(mask.count_true(), 400 - 16);
        for y in 0..20 {
            for x in 0..20 {
                let inside = x >= x0 && x < x0 + 4 && y >= y0 && y < y0 + 4;
                assert_eq!(mask.get(x, y), !inside);
                assert_eq!(out.get(x, y, 0), if inside { 0.0 } else { 0.5 });
            }
        }
    }
}
