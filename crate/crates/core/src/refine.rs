//! Total objective assembly, analytic gradients of every loss term with
//! respect to depth, central-difference verification, and a coarse-to-fine
//! direct depth refiner.
//!
//! The analytic photometric gradient chains d(pointwise error)/d(sample) ·
//! d(bilinear sample)/d(coordinate) · d(projection)/d(depth) ·
//! d(member depth)/d(depth pixel); the full derivation lives in
//! docs/gradients.md. Pixels where that chain is not differentiable (L1
//! kinks, bilinear cell crossings, min-over-source ties, validity flips) are
//! flagged rather than silently wrong.

use alloc::vec::Vec;

#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};
use crate::geometry::{
    project, projection_depth_jacobian, BilinearTap, DepthMap, ImageBuffer, Intrinsics,
    RigidTransform, ValidityMask,
};
use crate::mathx::sign;
use crate::patchmatch::{patch_photometric_loss, SupportDomain};
use crate::photometric::{
    edge_aware_smoothness, point_photometric, point_ssim_dv, PhotometricConfig,
};
use crate::teaching::{
    cross_teaching_loss, self_teaching_loss, BlockedOperand, OcclusionMask, CONSISTENCY_EPS,
};

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.02,
            lambda3: 0.002,
            lambda4: 0.0001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }

    /// Photometric only; handy for pure-photometric refinement tests.
    pub fn photometric_only() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    Analytic,
    /// Central differences with the configured step.
    FiniteDifference,
}

/// One of the four loss terms, for per-term gradient verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Photometric,
    CrossTeaching,
    SelfTeaching,
    Smoothness,
}

pub const ALL_TERMS: [LossTerm; 4] = [
    LossTerm::Photometric,
    LossTerm::CrossTeaching,
    LossTerm::SelfTeaching,
    LossTerm::Smoothness,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Pyramid levels; the coarsest grid cell is `coarse_factor^(levels-1)`.
    pub levels: usize,
    pub coarse_factor: usize,
    pub iterations_per_level: usize,
    pub step_size: f64,
    pub mode: GradientMode,
    /// Central-difference step in millimetres.
    pub fd_step: f64,
    /// Working depth range (d_min, d_max); iterates are projected onto
    /// [d_min/2, 2*d_max] so depths can never become non-positive.
    pub depth_range: (f64, f64),
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            levels: 3,
            coarse_factor: 4,
            iterations_per_level: 50,
            step_size: 50.0,
            mode: GradientMode::Analytic,
            fd_step: 1e-3,
            depth_range: (40.0, 150.0),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("need at least one pyramid level"));
        }
        if self.coarse_factor < 2 {
            return Err(Error::invalid("coarse factor must be >= 2"));
        }
        if !(self.step_size > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::invalid("step sizes must be > 0"));
        }
        if !(self.depth_range.0 > 0.0 && self.depth_range.1 > self.depth_range.0) {
            return Err(Error::invalid("depth range must satisfy 0 < min < max"));
        }
        Ok(())
    }

    fn clamp_bounds(&self) -> (f64, f64) {
        (self.depth_range.0 * 0.5, self.depth_range.1 * 2.0)
    }
}

/// Per-term loss values; `total` is the weighted sum exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ph: f64,
    pub ct: f64,
    pub st: f64,
    pub es: f64,
    /// Support domains that contributed to the photometric term.
    pub ph_domains: usize,
    pub ct_pixels: usize,
    pub st_pixels: usize,
    /// Forward-difference pairs entering the smoothness term.
    pub es_pairs: usize,
}

/// Immutable inputs of one refinement problem. Poses are target-to-source.
/// `teacher` drives cross-teaching; `self_reference` is the stop-gradient
/// original-branch depth with its unoccluded mask for self-teaching. A term
/// whose input is absent evaluates to zero.
#[derive(Debug, Clone)]
pub struct RefineScene<'a> {
    pub target: &'a ImageBuffer,
    pub sources: &'a [ImageBuffer],
    pub poses: &'a [RigidTransform],
    pub intrinsics: &'a Intrinsics,
    pub domains: &'a [SupportDomain],
    pub teacher: Option<&'a DepthMap>,
    pub self_reference: Option<(&'a DepthMap, &'a OcclusionMask)>,
    pub photometric: PhotometricConfig,
}

impl<'a> RefineScene<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.sources.len() != self.poses.len() {
            return Err(Error::invalid("need sources with matching poses"));
        }
        self.photometric.validate()?;
        for p in self.poses {
            p.validate()?;
        }
        Ok(())
    }
}

fn term_value(scene: &RefineScene, depth: &DepthMap, term: LossTerm) -> Result<(f64, usize)> {
    match term {
        LossTerm::Photometric => {
            if scene.domains.is_empty() {
                return Ok((0.0, 0));
            }
            let r = patch_photometric_loss(
                scene.target,
                scene.sources,
                scene.poses,
                depth,
                scene.domains,
                scene.intrinsics,
                &scene.photometric,
            )?;
            Ok((r.total, scene.domains.len() - r.invalid_domains))
        }
        LossTerm::CrossTeaching => match scene.teacher {
            Some(teacher) => {
                let l = cross_teaching_loss(depth, teacher, CONSISTENCY_EPS)?;
                Ok((l.value, depth.width * depth.height))
            }
            None => Ok((0.0, 0)),
        },
        LossTerm::SelfTeaching => match scene.self_reference {
            Some((original, mask)) => {
                let l = self_teaching_loss(original, depth, mask, CONSISTENCY_EPS)?;
                Ok((l.value, mask.count_true()))
            }
            None => Ok((0.0, 0)),
        },
        LossTerm::Smoothness => {
            let (w, h) = depth.shape();
            let v = edge_aware_smoothness(depth, scene.target)?;
            Ok((v, (w - 1) * h + w * (h - 1)))
        }
    }
}

/// Evaluate all four terms and their exact weighted sum.
pub fn total_loss(scene: &RefineScene, depth: &DepthMap, weights: &LossWeights) -> Result<LossReport> {
    scene.validate()?;
    weights.validate()?;
    let (ph, ph_domains) = term_value(scene, depth, LossTerm::Photometric)?;
    let (ct, ct_pixels) = term_value(scene, depth, LossTerm::CrossTeaching)?;
    let (st, st_pixels) = term_value(scene, depth, LossTerm::SelfTeaching)?;
    let (es, es_pairs) = term_value(scene, depth, LossTerm::Smoothness)?;
    Ok(LossReport {
        total: weights.lambda1 * ph + weights.lambda2 * ct + weights.lambda3 * st
            + weights.lambda4 * es,
        ph,
        ct,
        st,
        es,
        ph_domains,
        ct_pixels,
        st_pixels,
        es_pairs,
    })
}

/// Gradient of a scalar loss with respect to every depth pixel, with
/// non-differentiable sites flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
    flags: Vec<bool>,
}

impl GradientField {
    fn zeros(width: usize, height: usize) -> Self {
        GradientField {
            width,
            height,
            data: vec![0.0; width * height],
            flags: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// True where the loss is not differentiable within the verification
    /// step's reach (kink, cell crossing, tie, or validity flip).
    #[inline]
    pub fn is_flagged(&self, x: usize, y: usize) -> bool {
        self.flags[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    fn add_scaled(&mut self, other: &GradientField, scale: f64) {
        for (d, o) in self.data.iter_mut().zip(&other.data) {
            *d += scale * o;
        }
        for (f, o) in self.flags.iter_mut().zip(&other.flags) {
            *f |= *o;
        }
    }
}

/// Spatial derivative of a border-clamped bilinear sample, per channel,
/// valid inside the tap's cell.
fn sample_spatial_gradient(img: &ImageBuffer, tap: &BilinearTap, c: usize) -> (f64, f64) {
    let g00 = img.get(tap.x0, tap.y0, c);
    let g10 = img.get(tap.x1, tap.y0, c);
    let g01 = img.get(tap.x0, tap.y1, c);
    let g11 = img.get(tap.x1, tap.y1, c);
    (
        (1.0 - tap.fy) * (g10 - g00) + tap.fy * (g11 - g01),
        (1.0 - tap.fx) * (g01 - g00) + tap.fx * (g11 - g10),
    )
}

/// Flag the four depth pixels a member's bilinear depth sample touches.
fn flag_member(flags: &mut [bool], depth: &DepthMap, member: (f64, f64)) {
    let tap = BilinearTap::new(member.0, member.1, depth.width, depth.height);
    for (x, y) in [
        (tap.x0, tap.y0),
        (tap.x1, tap.y0),
        (tap.x0, tap.y1),
        (tap.x1, tap.y1),
    ] {
        flags[y * depth.width + x] = true;
    }
}

/// Gap below which a min-over-sources choice is treated as a tie.
const SOURCE_TIE_TOL: f64 = 1e-3;

fn photometric_gradient(scene: &RefineScene, depth: &DepthMap, fd_step: f64) -> Result<GradientField> {
    let (w, h) = depth.shape();
    let mut field = GradientField::zeros(w, h);
    if scene.domains.is_empty() {
        return Ok(field);
    }
    let channels = scene.target.channels;
    let mut tvals = vec![0.0; channels];
    let mut svals = vec![0.0; channels];
    let num_domains = scene.domains.len() as f64;
    for dom in scene.domains {
        scene.target.sample(dom.center.0, dom.center.1, &mut tvals);
        // per-source mean loss and the per-member derivative d(phi)/d(member depth)
        let mut per_source: Vec<(f64, usize, Vec<(usize, f64)>)> = Vec::new();
        for (src, pose) in scene.sources.iter().zip(scene.poses) {
            let mut acc = 0.0;
            let mut n = 0usize;
            let mut derivs: Vec<(usize, f64)> = Vec::new();
            for (mi, member) in dom.members.iter().enumerate() {
                let (d, depth_ok) = depth.sample(member.0, member.1);
                if !depth_ok || !(d > 0.0) {
                    continue;
                }
                let proj = project(dom.center.0, dom.center.1, d, scene.intrinsics, pose)?;
                if !proj.in_front() {
                    continue;
                }
                if proj.depth < 1e-3 {
                    // a finite step could push the point behind the camera
                    flag_member(&mut field.flags, depth, *member);
                    continue;
                }
                let tap = BilinearTap::new(proj.x, proj.y, src.width, src.height);
                if !tap.in_bounds {
                    // near-miss coordinates could re-enter under perturbation
                    let margin = 0.5;
                    let (mx, my) = ((src.width - 1) as f64, (src.height - 1) as f64);
                    if proj.x > -margin
                        && proj.x < mx + margin
                        && proj.y > -margin
                        && proj.y < my + margin
                    {
                        flag_member(&mut field.flags, depth, *member);
                    }
                    continue;
                }
                src.sample(proj.x, proj.y, &mut svals);
                let (jx, jy) =
                    projection_depth_jacobian(dom.center.0, dom.center.1, d, scene.intrinsics, pose)?;
                let reach = 2.0 * fd_step * (jx.abs() + jy.abs()) + 1e-12;
                // crossing a bilinear cell edge or the image border flips the
                // local slope
                let near_edge = |frac: f64| frac < reach || 1.0 - frac < reach;
                let on_border = proj.x < reach
                    || proj.x > (src.width - 1) as f64 - reach
                    || proj.y < reach
                    || proj.y > (src.height - 1) as f64 - reach;
                if near_edge(tap.fx) || near_edge(tap.fy) || on_border {
                    flag_member(&mut field.flags, depth, *member);
                }
                let mut phi = 0.0;
                let mut dphi_dd = 0.0;
                for c in 0..channels {
                    let (u, v) = (tvals[c], svals[c]);
                    phi += point_photometric(u, v, &scene.photometric);
                    let (dsx, dsy) = sample_spatial_gradient(src, &tap, c);
                    let ds_dd = dsx * jx + dsy * jy;
                    if (u - v).abs() <= 2.0 * fd_step * ds_dd.abs() + 1e-12 {
                        // L1 kink within the verification step's reach
                        flag_member(&mut field.flags, depth, *member);
                    }
                    let dphi_dv = -0.5 * scene.photometric.alpha * point_ssim_dv(u, v, &scene.photometric)
                        + (1.0 - scene.photometric.alpha) * sign(v - u);
                    dphi_dd += dphi_dv * ds_dd;
                }
                acc += phi / channels as f64;
                derivs.push((mi, dphi_dd / channels as f64));
                n += 1;
            }
            if n > 0 {
                per_source.push((acc / n as f64, n, derivs));
            }
        }
        let Some(best) = per_source
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
            .map(|(i, _)| i)
        else {
            continue;
        };
        for (i, (loss, _, _)) in per_source.iter().enumerate() {
            if i != best && loss - per_source[best].0 < SOURCE_TIE_TOL {
                for member in &dom.members {
                    flag_member(&mut field.flags, depth, *member);
                }
            }
        }
        let (_, n, derivs) = &per_source[best];
        let scale = 1.0 / (num_domains * *n as f64);
        for (mi, dphi_dd) in derivs {
            let member = dom.members[*mi];
            let tap = BilinearTap::new(member.0, member.1, w, h);
            for ((x, y), wgt) in [
                ((tap.x0, tap.y0), tap.w00),
                ((tap.x1, tap.y0), tap.w10),
                ((tap.x0, tap.y1), tap.w01),
                ((tap.x1, tap.y1), tap.w11),
            ] {
                field.data[y * w + x] += scale * dphi_dd * wgt;
            }
        }
    }
    Ok(field)
}

/// Analytic gradients of the sum-normalized consistency loss with respect to
/// both operands; the blocked operand's gradient is identically zero by the
/// stop-gradient contract.
pub fn consistency_gradients(
    first: &DepthMap,
    second: &DepthMap,
    mask: Option<&ValidityMask>,
    eps: f64,
    blocked: BlockedOperand,
) -> Result<(GradientField, GradientField)> {
    if first.shape() != second.shape() {
        return Err(Error::ShapeMismatch {
            expected: first.shape(),
            got: second.shape(),
        });
    }
    let (w, h) = first.shape();
    let m = match mask {
        Some(m) => {
            if (m.width, m.height) != (w, h) {
                return Err(Error::invalid("mask shape mismatch"));
            }
            m.count_true()
        }
        None => w * h,
    };
    let mut ga = GradientField::zeros(w, h);
    let mut gb = GradientField::zeros(w, h);
    if m == 0 {
        return Ok((ga, gb));
    }
    let mf = m as f64;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m.get(x, y) {
                    continue;
                }
            }
            let a = first.get(x, y);
            let b = second.get(x, y);
            let den = a + b + eps;
            let s = sign(a - b);
            let num = (a - b).abs();
            if num <= 1e-6 {
                ga.flags[y * w + x] = true;
                gb.flags[y * w + x] = true;
            }
            ga.data[y * w + x] = (s * den - num) / (den * den) / mf;
            gb.data[y * w + x] = (-s * den - num) / (den * den) / mf;
        }
    }
    match blocked {
        BlockedOperand::First => ga.data.iter_mut().for_each(|v| *v = 0.0),
        BlockedOperand::Second => gb.data.iter_mut().for_each(|v| *v = 0.0),
    }
    Ok((ga, gb))
}

fn smoothness_gradient(scene: &RefineScene, depth: &DepthMap, fd_step: f64) -> Result<GradientField> {
    let (w, h) = depth.shape();
    let img = scene.target;
    if depth.shape() != img.shape() {
        return Err(Error::ShapeMismatch {
            expected: depth.shape(),
            got: img.shape(),
        });
    }
    let mu = depth.mean();
    let n = (w * h) as f64;
    let nx = ((w - 1) * h) as f64;
    let ny = (w * (h - 1)) as f64;
    let mut field = GradientField::zeros(w, h);
    let edge_weight = |xa: usize, ya: usize, xb: usize, yb: usize| {
        let mut di = 0.0;
        for c in 0..img.channels {
            di += (img.get(xb, yb, c) - img.get(xa, ya, c)).abs();
        }
        (-di / img.channels as f64).exp()
    };
    // raw sums (before the 1/mu normalization), plus the per-pixel direct part
    let mut ax = 0.0;
    let mut ay = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let delta = depth.get(x + 1, y) - depth.get(x, y);
                let wgt = edge_weight(x, y, x + 1, y);
                ax += delta.abs() * wgt;
                let s = sign(delta) * wgt / (nx * mu);
                field.data[y * w + x + 1] += s;
                field.data[y * w + x] -= s;
                if delta.abs() <= 2.0 * fd_step {
                    field.flags[y * w + x] = true;
                    field.flags[y * w + x + 1] = true;
                }
            }
            if y + 1 < h {
                let delta = depth.get(x, y + 1) - depth.get(x, y);
                let wgt = edge_weight(x, y, x, y + 1);
                ay += delta.abs() * wgt;
                let s = sign(delta) * wgt / (ny * mu);
                field.data[(y + 1) * w + x] += s;
                field.data[y * w + x] -= s;
                if delta.abs() <= 2.0 * fd_step {
                    field.flags[y * w + x] = true;
                    field.flags[(y + 1) * w + x] = true;
                }
            }
        }
    }
    // every pixel moves the normalizing mean: d(1/mu)/dD = -1/(mu^2 N)
    let lx = if nx > 0.0 { ax / nx } else { 0.0 };
    let ly = if ny > 0.0 { ay / ny } else { 0.0 };
    let mean_term = (lx + ly) / (mu * mu * n);
    for v in field.data.iter_mut() {
        *v -= mean_term;
    }
    Ok(field)
}

fn analytic_term_gradient(
    scene: &RefineScene,
    depth: &DepthMap,
    term: LossTerm,
    fd_step: f64,
) -> Result<GradientField> {
    match term {
        LossTerm::Photometric => photometric_gradient(scene, depth, fd_step),
        LossTerm::CrossTeaching => match scene.teacher {
            Some(teacher) => {
                let (g, _) =
                    consistency_gradients(depth, teacher, None, CONSISTENCY_EPS, BlockedOperand::Second)?;
                Ok(g)
            }
            None => Ok(GradientField::zeros(depth.width, depth.height)),
        },
        LossTerm::SelfTeaching => match scene.self_reference {
            Some((original, mask)) => {
                // the transformed branch (our depth) is the first operand
                let (g, _) = consistency_gradients(
                    depth,
                    original,
                    Some(mask),
                    CONSISTENCY_EPS,
                    BlockedOperand::Second,
                )?;
                Ok(g)
            }
            None => Ok(GradientField::zeros(depth.width, depth.height)),
        },
        LossTerm::Smoothness => smoothness_gradient(scene, depth, fd_step),
    }
}

fn fd_term_gradient(
    scene: &RefineScene,
    depth: &DepthMap,
    term: LossTerm,
    h: f64,
) -> Result<GradientField> {
    // flags come from the analytic site scan; only the values are replaced
    let mut field = analytic_term_gradient(scene, depth, term, h)?;
    let mut work = depth.clone();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let base = depth.get(x, y);
            work.set(x, y, base + h);
            let (fp, _) = term_value(scene, &work, term)?;
            work.set(x, y, base - h);
            let (fm, _) = term_value(scene, &work, term)?;
            work.set(x, y, base);
            field.data[y * depth.width + x] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(field)
}

/// Gradient of one loss term with respect to every depth pixel.
pub fn term_gradient(
    scene: &RefineScene,
    depth: &DepthMap,
    term: LossTerm,
    mode: GradientMode,
    fd_step: f64,
) -> Result<GradientField> {
    scene.validate()?;
    if !(fd_step > 0.0) {
        return Err(Error::invalid("fd step must be > 0"));
    }
    match mode {
        GradientMode::Analytic => analytic_term_gradient(scene, depth, term, fd_step),
        GradientMode::FiniteDifference => fd_term_gradient(scene, depth, term, fd_step),
    }
}

/// Gradient of the weighted total; terms with zero weight are skipped.
pub fn loss_gradient_wrt_depth(
    scene: &RefineScene,
    depth: &DepthMap,
    weights: &LossWeights,
    mode: GradientMode,
    fd_step: f64,
) -> Result<GradientField> {
    weights.validate()?;
    let mut total = GradientField::zeros(depth.width, depth.height);
    let lambdas = [
        weights.lambda1,
        weights.lambda2,
        weights.lambda3,
        weights.lambda4,
    ];
    for (term, lambda) in ALL_TERMS.iter().zip(lambdas) {
        if lambda == 0.0 {
            continue;
        }
        let g = term_gradient(scene, depth, *term, mode, fd_step)?;
        total.add_scaled(&g, lambda);
    }
    Ok(total)
}

/// Coarse depth grid bilinearly upsampled to full resolution; the refinement
/// variable at each pyramid level.
struct CoarseGrid {
    /// Node pixel positions along x and y; the last node sits on the image
    /// border, so the final interval can be shorter than `cell`.
    xs: Vec<usize>,
    ys: Vec<usize>,
    values: Vec<f64>,
}

impl CoarseGrid {
    fn node_positions(extent: usize, cell: usize) -> Vec<usize> {
        let mut pos: Vec<usize> = (0..extent - 1).step_by(cell).collect();
        pos.push(extent - 1);
        pos
    }

    fn from_depth(depth: &DepthMap, cell: usize) -> CoarseGrid {
        let xs = CoarseGrid::node_positions(depth.width, cell);
        let ys = CoarseGrid::node_positions(depth.height, cell);
        let mut values = Vec::with_capacity(xs.len() * ys.len());
        for y in &ys {
            for x in &xs {
                values.push(depth.get(*x, *y));
            }
        }
        CoarseGrid { xs, ys, values }
    }

    fn interval(pos: &[usize], p: usize) -> (usize, usize, f64) {
        // index of the last node at or before p
        let i0 = match pos.binary_search(&p) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let i1 = (i0 + 1).min(pos.len() - 1);
        let span = pos[i1].saturating_sub(pos[i0]);
        let f = if span > 0 {
            (p - pos[i0]) as f64 / span as f64
        } else {
            0.0
        };
        (i0, i1, f)
    }

    /// Tap indices and weights of a pixel's bilinear node interpolation.
    fn pixel_taps(&self, x: usize, y: usize) -> [(usize, f64); 4] {
        let gw = self.xs.len();
        let (gx0, gx1, fx) = CoarseGrid::interval(&self.xs, x);
        let (gy0, gy1, fy) = CoarseGrid::interval(&self.ys, y);
        [
            (gy0 * gw + gx0, (1.0 - fx) * (1.0 - fy)),
            (gy0 * gw + gx1, fx * (1.0 - fy)),
            (gy1 * gw + gx0, (1.0 - fx) * fy),
            (gy1 * gw + gx1, fx * fy),
        ]
    }

    fn upsample(&self, width: usize, height: usize) -> Result<DepthMap> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.0;
                for (idx, w) in self.pixel_taps(x, y) {
                    v += w * self.values[idx];
                }
                data.push(v);
            }
        }
        DepthMap::new(width, height, data)
    }
}

/// Refined depth plus the recorded loss trace (one row per iteration, in
/// order across levels, plus the final state).
pub fn refine_depth(
    initial: &DepthMap,
    scene: &RefineScene,
    cfg: &RefineConfig,
    weights: &LossWeights,
) -> Result<(DepthMap, Vec<LossReport>)> {
    cfg.validate()?;
    scene.validate()?;
    weights.validate()?;
    let (w, h) = initial.shape();
    let (lo, hi) = cfg.clamp_bounds();
    let mut current = initial.clone();
    let mut trace = Vec::new();
    for level in 0..cfg.levels {
        if cfg.iterations_per_level == 0 {
            continue;
        }
        let cell = cfg.coarse_factor.pow((cfg.levels - 1 - level) as u32);
        let mut grid = CoarseGrid::from_depth(&current, cell);
        for _ in 0..cfg.iterations_per_level {
            let depth = grid.upsample(w, h)?;
            trace.push(total_loss(scene, &depth, weights)?);
            let g = loss_gradient_wrt_depth(scene, &depth, weights, cfg.mode, cfg.fd_step)?;
            let mut node_grad = vec![0.0; grid.values.len()];
            for y in 0..h {
                for x in 0..w {
                    let gp = g.get(x, y);
                    if gp != 0.0 {
                        for (idx, wgt) in grid.pixel_taps(x, y) {
                            node_grad[idx] += gp * wgt;
                        }
                    }
                }
            }
            for (v, ng) in grid.values.iter_mut().zip(&node_grad) {
                *v = (*v - cfg.step_size * ng).clamp(lo, hi);
            }
        }
        current = grid.upsample(w, h)?;
    }
    trace.push(total_loss(scene, &current, weights)?);
    Ok((current, trace))
}

/// CSV export of a loss trace: `iteration,total,ph,ct,st,es`.
pub fn trace_csv(trace: &[LossReport]) -> alloc::string::String {
    use core::fmt::Write;
    let mut s = alloc::string::String::from("iteration,total,ph,ct,st,es\n");
    for (i, r) in trace.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.total, r.ph, r.ct, r.st, r.es
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchmatch::{build_support_domains, detect_keypoints, FixedGridDecoder};
    use crate::costvolume::{extract_features, DescriptorKind};
    use crate::synth::{render, two_view_spec, Geometry, Texture};
    use alloc::vec::Vec;

    struct Fixture {
        target: ImageBuffer,
        sources: Vec<ImageBuffer>,
        poses: Vec<RigidTransform>,
        intrinsics: Intrinsics,
        domains: Vec<SupportDomain>,
        truth: DepthMap,
    }

    fn fixture(w: usize, h: usize, seed: u64) -> Fixture {
        let k = Intrinsics::new(60.0, 60.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
            .unwrap();
        let spec = two_view_spec(
            Geometry::Plane { depth: 100.0 },
            Texture::Sinusoid {
                base: 0.5,
                amp1: 0.22,
                freq1: 0.013,
                amp2: 0.12,
                freq2: 0.031,
            },
            k,
            [7.0, 3.0, 0.0],
            seed,
        );
        let views = render(&spec).unwrap();
        let rel = views[1].pose.compose(&views[0].pose.inverse());
        let kp = detect_keypoints(&views[0].image, 12, 4).unwrap();
        let feat = extract_features(&views[0].image, DescriptorKind::Grad);
        let domains = build_support_domains(&feat, &kp, 8, &FixedGridDecoder::new()).unwrap();
        Fixture {
            target: views[0].image.clone(),
            sources: alloc::vec![views[1].image.clone()],
            poses: alloc::vec![rel],
            intrinsics: k,
            domains,
            truth: views[0].depth.clone(),
        }
    }

    fn scene<'a>(f: &'a Fixture, teacher: Option<&'a DepthMap>) -> RefineScene<'a> {
        RefineScene {
            target: &f.target,
            sources: &f.sources,
            poses: &f.poses,
            intrinsics: &f.intrinsics,
            domains: &f.domains,
            teacher,
            self_reference: None,
            photometric: PhotometricConfig::default(),
        }
    }

    fn wiggled(truth: &DepthMap, amp: f64, seed: u64) -> DepthMap {
        let mut s = seed;
        truth
            .map(|d| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                d + amp * (((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5) * 2.0
            })
            .unwrap()
    }

    #[test]
    fn total_is_exact_weighted_sum() {
        let f = fixture(20, 16, 1);
        let teacher = f.truth.map(|d| d * 1.05).unwrap();
        let sc = scene(&f, Some(&teacher));
        let depth = wiggled(&f.truth, 3.0, 9);
        let w = LossWeights::default();
        let r = total_loss(&sc, &depth, &w).unwrap();
        let expect = w.lambda1 * r.ph + w.lambda2 * r.ct + w.lambda3 * r.st + w.lambda4 * r.es;
        assert!((r.total - expect).abs() < 1e-12);
        assert!(r.ph > 0.0 && r.ct > 0.0 && r.es > 0.0);
        assert_eq!(r.st, 0.0);
    }

    #[test]
    fn zero_weights_zero_total() {
        let f = fixture(16, 12, 2);
        let sc = scene(&f, None);
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        };
        let r = total_loss(&sc, &f.truth, &w).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn photometric_only_reduces_to_patch_loss() {
        let f = fixture(20, 16, 3);
        let sc = scene(&f, None);
        let depth = wiggled(&f.truth, 5.0, 4);
        let r = total_loss(&sc, &depth, &LossWeights::photometric_only()).unwrap();
        let direct = patch_photometric_loss(
            &f.target,
            &f.sources,
            &f.poses,
            &depth,
            &f.domains,
            &f.intrinsics,
            &PhotometricConfig::default(),
        )
        .unwrap();
        assert_eq!(r.total, direct.total);
    }

    #[test]
    fn only_smoothness_survives_at_truth_with_constant_texture() {
        // constant texture makes the photometric term exactly zero at any
        // depth; teacher = truth and an identity self branch zero the rest
        let k = Intrinsics::new(60.0, 60.0, 11.5, 7.5, 24, 16).unwrap();
        let spec = two_view_spec(
            Geometry::TwoPlaneStep {
                near: 80.0,
                far: 120.0,
                edge_x: 0.0,
            },
            Texture::Constant { value: 0.5 },
            k,
            [5.0, 0.0, 0.0],
            0,
        );
        let views = render(&spec).unwrap();
        let rel = views[1].pose.compose(&views[0].pose.inverse());
        let domains = alloc::vec![crate::patchmatch::assemble_support_domain(
            (12, 8),
            &crate::patchmatch::unit_ring(),
            &alloc::vec![(0.0, 0.0); 8],
        )
        .unwrap()];
        let sources = alloc::vec![views[1].image.clone()];
        let poses = alloc::vec![rel];
        let unoccluded = ValidityMask::filled(24, 16, true);
        let sc = RefineScene {
            target: &views[0].image,
            sources: &sources,
            poses: &poses,
            intrinsics: &k,
            domains: &domains,
            teacher: Some(&views[0].depth),
            self_reference: Some((&views[0].depth, &unoccluded)),
            photometric: PhotometricConfig::default(),
        };
        let w = LossWeights::default();
        let r = total_loss(&sc, &views[0].depth, &w).unwrap();
        assert_eq!(r.ph, 0.0);
        assert_eq!(r.ct, 0.0);
        assert_eq!(r.st, 0.0);
        assert!(r.es > 0.0);
        assert!((r.total - w.lambda4 * r.es).abs() < 1e-15);
    }

    fn check_term(f: &Fixture, sc: &RefineScene, depth: &DepthMap, term: LossTerm) {
        let h = 1e-3;
        let ga = term_gradient(sc, depth, term, GradientMode::Analytic, h).unwrap();
        let gf = term_gradient(sc, depth, term, GradientMode::FiniteDifference, h).unwrap();
        let mut checked = 0usize;
        for y in 0..f.truth.height {
            for x in 0..f.truth.width {
                if ga.is_flagged(x, y) {
                    continue;
                }
                let (a, n) = (ga.get(x, y), gf.get(x, y));
                let denom = a.abs().max(n.abs());
                if denom < 1e-9 {
                    assert!((a - n).abs() < 1e-9, "{term:?} at ({x},{y}): {a} vs {n}");
                } else {
                    assert!(
                        (a - n).abs() / denom < 1e-4,
                        "{term:?} at ({x},{y}): {a} vs {n}"
                    );
                }
                checked += 1;
            }
        }
        assert!(checked > f.truth.width * f.truth.height / 2, "{term:?}: too few unflagged sites");
    }

    #[test]
    fn analytic_matches_central_differences_per_term() {
        let f = fixture(16, 12, 7);
        let teacher = f.truth.map(|d| d * 1.07).unwrap();
        let reference = f.truth.map(|d| d * 0.95).unwrap();
        let mut unoccluded = ValidityMask::filled(16, 12, true);
        unoccluded.set(3, 3, false);
        let mut sc = scene(&f, Some(&teacher));
        sc.self_reference = Some((&reference, &unoccluded));
        let depth = wiggled(&f.truth, 4.0, 11);
        for term in ALL_TERMS {
            check_term(&f, &sc, &depth, term);
        }
    }

    #[test]
    fn gradient_outside_loss_footprint_is_zero() {
        let f = fixture(24, 18, 5);
        // a single domain near the center: far-corner pixels are untouched
        let domains = alloc::vec![f.domains[0].clone()];
        let sc = RefineScene {
            domains: &domains,
            ..scene(&f, None)
        };
        let depth = wiggled(&f.truth, 2.0, 3);
        let g = term_gradient(&sc, &depth, LossTerm::Photometric, GradientMode::Analytic, 1e-3)
            .unwrap();
        let far = (0..24usize)
            .flat_map(|x| (0..18usize).map(move |y| (x, y)))
            .filter(|(x, y)| {
                let c = domains[0].center;
                ((*x as f64 - c.0).abs() > 8.0) || ((*y as f64 - c.1).abs() > 8.0)
            });
        for (x, y) in far {
            assert_eq!(g.get(x, y), 0.0);
        }
    }

    #[test]
    fn blocked_operand_gets_exactly_zero_gradient() {
        let a = DepthMap::constant(6, 5, 90.0).unwrap().map(|d| d).unwrap();
        let b = wiggled(&DepthMap::constant(6, 5, 100.0).unwrap(), 10.0, 2);
        let (ga, gb) =
            consistency_gradients(&a, &b, None, CONSISTENCY_EPS, BlockedOperand::Second).unwrap();
        assert!(gb.data().iter().all(|v| *v == 0.0));
        assert!(ga.data().iter().any(|v| *v != 0.0));
        let (ga2, gb2) =
            consistency_gradients(&a, &b, None, CONSISTENCY_EPS, BlockedOperand::First).unwrap();
        assert!(ga2.data().iter().all(|v| *v == 0.0));
        assert!(gb2.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution() {
        let f = fixture(16, 12, 8);
        let teacher = f.truth.map(|d| d * 1.1).unwrap();
        let sc = scene(&f, Some(&teacher));
        let depth = wiggled(&f.truth, 3.0, 6);
        let w1 = LossWeights {
            lambda2: 0.02,
            ..LossWeights::default()
        };
        let w2 = LossWeights {
            lambda2: 0.04,
            ..LossWeights::default()
        };
        let base = loss_gradient_wrt_depth(&sc, &depth, &LossWeights { lambda2: 0.0, ..w1 },
            GradientMode::Analytic, 1e-3).unwrap();
        let g1 = loss_gradient_wrt_depth(&sc, &depth, &w1, GradientMode::Analytic, 1e-3).unwrap();
        let g2 = loss_gradient_wrt_depth(&sc, &depth, &w2, GradientMode::Analytic, 1e-3).unwrap();
        for i in 0..g1.data().len() {
            let c1 = g1.data()[i] - base.data()[i];
            let c2 = g2.data()[i] - base.data()[i];
            assert!((c2 - 2.0 * c1).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let f = fixture(16, 12, 9);
        let sc = scene(&f, None);
        let cfg = RefineConfig {
            iterations_per_level: 0,
            ..RefineConfig::default()
        };
        let init = wiggled(&f.truth, 10.0, 1);
        let (out, trace) = refine_depth(&init, &sc, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(out, init);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn truth_initialization_is_near_stationary() {
        let f = fixture(24, 18, 10);
        let sc = scene(&f, None);
        let cfg = RefineConfig {
            levels: 1,
            iterations_per_level: 20,
            step_size: 20.0,
            ..RefineConfig::default()
        };
        let (out, _) =
            refine_depth(&f.truth, &sc, &cfg, &LossWeights::photometric_only()).unwrap();
        for (o, t) in out.data().iter().zip(f.truth.data()) {
            assert!((o - t).abs() / t < 1e-3, "{o} vs {t}");
        }
    }

    #[test]
    fn refine_descends_from_biased_initialization() {
        let f = fixture(24, 18, 12);
        let sc = scene(&f, None);
        let init = DepthMap::constant(24, 18, 115.0).unwrap();
        let cfg = RefineConfig {
            levels: 2,
            iterations_per_level: 60,
            step_size: 150.0,
            ..RefineConfig::default()
        };
        let (out, trace) =
            refine_depth(&init, &sc, &cfg, &LossWeights::photometric_only()).unwrap();
        assert!(trace.last().unwrap().total < trace.first().unwrap().total);
        // mean depth should have moved toward 100 mm
        let err0 = (init.mean() - 100.0).abs();
        let err1 = (out.mean() - 100.0).abs();
        assert!(err1 < err0, "{err1} !< {err0}");
        assert!(out.data().iter().all(|d| *d >= 20.0 && *d <= 300.0));
    }

    #[test]
    fn coarse_grid_roundtrip_on_linear_ramp() {
        // a bilinear grid represents a linear ramp exactly at any cell size
        let depth = DepthMap::new(
            17,
            13,
            (0..13)
                .flat_map(|y| (0..17).map(move |x| 50.0 + 2.0 * x as f64 + 3.0 * y as f64))
                .collect(),
        )
        .unwrap();
        for cell in [1usize, 4, 16] {
            let grid = CoarseGrid::from_depth(&depth, cell);
            let up = grid.upsample(17, 13).unwrap();
            for (a, b) in up.data().iter().zip(depth.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn trace_csv_shape() {
        let f = fixture(16, 12, 13);
        let sc = scene(&f, None);
        let cfg = RefineConfig {
            levels: 1,
            iterations_per_level: 3,
            ..RefineConfig::default()
        };
        let (_, trace) =
            refine_depth(&f.truth, &sc, &cfg, &LossWeights::photometric_only()).unwrap();
        let csv = trace_csv(&trace);
        let lines: Vec<&str> = csv.trim_end().split('\n').collect();
        assert_eq!(lines[0], "iteration,total,ph,ct,st,es");
        assert_eq!(lines.len(), trace.len() + 1);
        assert!(lines[1].starts_with("0,"));
    }
}
