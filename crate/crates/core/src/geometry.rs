//! Pinhole camera model, rigid transforms, projection/back-projection,
//! bilinear inverse warping and point-cloud generation.
//!
//! Conventions shared by every module in this crate:
//! - pixel `(i, j)` sits at continuous coordinate `(i, j)` exactly (no +0.5);
//! - depths are millimetres, positive, measured along the camera z axis;
//! - sampling outside `[0, W-1] x [0, H-1]` clamps to the border and is
//!   reported through a validity flag rather than an error.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};

/// Pinhole intrinsics `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid("focal lengths must be finite and > 0"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid("principal point outside image bounds"));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Unit-depth ray direction `K^-1 * (px, py, 1)`.
    #[inline]
    pub fn ray(&self, px: f64, py: f64) -> [f64; 3] {
        [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0]
    }

    /// Dehomogenized projection of a camera-space point (z must be nonzero).
    #[inline]
    pub fn to_pixel(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }
}

/// SE(3) rigid transform: `y = R x + t`, translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

const ORTHONORMALITY_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        RigidTransform {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rodrigues rotation about `axis` (need not be normalized) by `angle`
    /// radians, plus translation.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("rotation axis must be nonzero and finite"));
        }
        let (ux, uy, uz) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = (angle.sin(), angle.cos());
        let ic = 1.0 - c;
        let rotation = [
            [
                c + ux * ux * ic,
                ux * uy * ic - uz * s,
                ux * uz * ic + uy * s,
            ],
            [
                uy * ux * ic + uz * s,
                c + uy * uy * ic,
                uy * uz * ic - ux * s,
            ],
            [
                uz * ux * ic - uy * s,
                uz * uy * ic + ux * s,
                c + uz * uz * ic,
            ],
        ];
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        // R^T R - I within tolerance.
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMALITY_TOL {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        if (self.det() - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(Error::invalid("rotation determinant is not +1"));
        }
        Ok(())
    }

    fn det(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Rotation-only action (used for ray directions).
    #[inline]
    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// `self` after `other`: (self * other).apply(x) = self.apply(other.apply(x)).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rotation[i][j] += self.rotation[i][k] * other.rotation[k][j];
                }
            }
        }
        let translation = self.apply(other.translation);
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = &self.translation;
        let translation = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform {
            rotation: rt,
            translation,
        }
    }
}

/// Row-major, channel-interleaved intensity grid with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid("image data length mismatch"));
        }
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image samples must be finite and in [0,1]"));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        ImageBuffer::new(width, height, channels, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Bilinear sample of every channel at subpixel `(x, y)` into `out`.
    /// Returns false (after border clamping) when the coordinate was outside
    /// `[0, W-1] x [0, H-1]`.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.channels);
        let tap = BilinearTap::new(x, y, self.width, self.height);
        for (c, o) in out.iter_mut().enumerate() {
            *o = tap.w00 * self.get(tap.x0, tap.y0, c)
                + tap.w10 * self.get(tap.x1, tap.y0, c)
                + tap.w01 * self.get(tap.x0, tap.y1, c)
                + tap.w11 * self.get(tap.x1, tap.y1, c);
        }
        tap.in_bounds
    }
}

/// Strictly positive depth grid in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("depth map dimensions must be nonzero"));
        }
        if data.len() != width * height {
            return Err(Error::invalid("depth data length mismatch"));
        }
        if data.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::invalid("depths must be finite and > 0"));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        DepthMap::new(width, height, vec![depth; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear depth sample; same border policy as [`ImageBuffer::sample`].
    pub fn sample(&self, x: f64, y: f64) -> (f64, bool) {
        let tap = BilinearTap::new(x, y, self.width, self.height);
        let v = tap.w00 * self.get(tap.x0, tap.y0)
            + tap.w10 * self.get(tap.x1, tap.y0)
            + tap.w01 * self.get(tap.x0, tap.y1)
            + tap.w11 * self.get(tap.x1, tap.y1);
        (v, tap.in_bounds)
    }

    /// Map every depth through `f`, revalidating the result.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<DepthMap> {
        DepthMap::new(
            self.width,
            self.height,
            self.data.iter().map(|d| f(*d)).collect(),
        )
    }
}

/// Per-pixel boolean grid; true where a warped coordinate was usable.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        ValidityMask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn union(&self, other: &ValidityMask) -> ValidityMask {
        debug_assert_eq!((self.width, self.height), (other.width, other.height));
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }
}

/// The four taps and weights of a border-clamped bilinear lookup.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Fractional position inside the cell, after clamping.
    pub fx: f64,
    pub fy: f64,
    pub w00: f64,
    pub w10: f64,
    pub w01: f64,
    pub w11: f64,
    pub in_bounds: bool,
}

impl BilinearTap {
    pub fn new(x: f64, y: f64, width: usize, height: usize) -> Self {
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        // small tolerance so coordinates that land on the border up to
        // projection round-off still count as inside
        let tol = 1e-9;
        let in_bounds = x.is_finite()
            && y.is_finite()
            && (-tol..=max_x + tol).contains(&x)
            && (-tol..=max_y + tol).contains(&y);
        let cx = if x.is_finite() { x.clamp(0.0, max_x) } else { 0.0 };
        let cy = if y.is_finite() { y.clamp(0.0, max_y) } else { 0.0 };
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        BilinearTap {
            x0,
            y0,
            x1,
            y1,
            fx,
            fy,
            w00: (1.0 - fx) * (1.0 - fy),
            w10: fx * (1.0 - fy),
            w01: (1.0 - fx) * fy,
            w11: fx * fy,
            in_bounds,
        }
    }
}

/// Result of projecting a target pixel into a source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    /// z-coordinate of the transformed point; `<= 0` means behind the camera
    /// and the pixel coordinate must not be trusted.
    pub depth: f64,
}

impl Projection {
    #[inline]
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

/// Back-project pixel `(px, py)` at `depth` to a camera-space 3D point.
pub fn back_project(px: f64, py: f64, depth: f64, k: &Intrinsics) -> Result<[f64; 3]> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid("depth must be finite and > 0"));
    }
    if !px.is_finite() || !py.is_finite() {
        return Err(Error::invalid("pixel coordinate must be finite"));
    }
    let r = k.ray(px, py);
    Ok([r[0] * depth, r[1] * depth, depth])
}

/// Project target pixel `(px, py)` with hypothesis `depth` into the source
/// view given relative pose `m` (target-to-source): `K m (depth * K^-1 p~)`.
///
/// Behind-camera points are returned with `depth <= 0` rather than clamped.
pub fn project(
    px: f64,
    py: f64,
    depth: f64,
    k: &Intrinsics,
    m: &RigidTransform,
) -> Result<Projection> {
    let cam = back_project(px, py, depth, k)?;
    let src = m.apply(cam);
    if src[2] == 0.0 {
        return Ok(Projection {
            x: f64::NAN,
            y: f64::NAN,
            depth: 0.0,
        });
    }
    let (x, y) = k.to_pixel(src);
    Ok(Projection {
        x,
        y,
        depth: src[2],
    })
}

/// Derivative of the projected source pixel coordinate with respect to the
/// hypothesis depth, at fixed target pixel. Used by the analytic gradients.
pub fn projection_depth_jacobian(
    px: f64,
    py: f64,
    depth: f64,
    k: &Intrinsics,
    m: &RigidTransform,
) -> Result<(f64, f64)> {
    let ray = k.ray(px, py);
    let dir = m.rotate(ray); // d(src point)/d(depth)
    let src = m.apply([ray[0] * depth, ray[1] * depth, depth]);
    if src[2] <= 0.0 || !(depth > 0.0) {
        return Err(Error::invalid("jacobian requires a point in front of the camera"));
    }
    let z2 = src[2] * src[2];
    Ok((
        k.fx * (dir[0] * src[2] - src[0] * dir[2]) / z2,
        k.fy * (dir[1] * src[2] - src[1] * dir[2]) / z2,
    ))
}

/// Warp `src` into the target view given the target depth map and relative
/// pose. Pixels that project behind the camera or outside `src` come back
/// masked invalid (behind-camera pixels are left at 0).
pub fn synthesize_view(
    target_depth: &DepthMap,
    src: &ImageBuffer,
    k: &Intrinsics,
    m: &RigidTransform,
) -> Result<(ImageBuffer, ValidityMask)> {
    if target_depth.shape() != src.shape() {
        return Err(Error::ShapeMismatch {
            expected: target_depth.shape(),
            got: src.shape(),
        });
    }
    let (w, h) = target_depth.shape();
    let mut out = ImageBuffer::zeros(w, h, src.channels);
    let mut mask = ValidityMask::filled(w, h, false);
    let mut sample = vec![0.0; src.channels];
    for y in 0..h {
        for x in 0..w {
            let proj = project(x as f64, y as f64, target_depth.get(x, y), k, m)?;
            if !proj.in_front() {
                continue;
            }
            let inside = src.sample(proj.x, proj.y, &mut sample);
            for (c, v) in sample.iter().enumerate() {
                out.set(x, y, c, *v);
            }
            mask.set(x, y, inside);
        }
    }
    Ok((out, mask))
}

/// A 3D point with optional color, millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: [f64; 3],
    pub color: Option<[f64; 3]>,
}

/// Back-project every pixel to a 3D point, row-major order. Color images must
/// have 1 or 3 channels; single channel is replicated to gray RGB.
pub fn depth_to_pointcloud(
    depth: &DepthMap,
    k: &Intrinsics,
    color: Option<&ImageBuffer>,
) -> Result<Vec<CloudPoint>> {
    if let Some(img) = color {
        if img.shape() != depth.shape() {
            return Err(Error::ShapeMismatch {
                expected: depth.shape(),
                got: img.shape(),
            });
        }
        if img.channels != 1 && img.channels != 3 {
            return Err(Error::invalid("point cloud colors need 1 or 3 channels"));
        }
    }
    let mut points = Vec::with_capacity(depth.width * depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let position = back_project(x as f64, y as f64, depth.get(x, y), k)?;
            let color = color.map(|img| {
                if img.channels == 3 {
                    [img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)]
                } else {
                    let v = img.get(x, y, 0);
                    [v, v, v]
                }
            });
            points.push(CloudPoint { position, color });
        }
    }
    Ok(points)
}

/// Plain-text table export used by visualization tooling.
pub fn pointcloud_table(points: &[CloudPoint]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    for p in points {
        let _ = write!(s, "{:.6} {:.6} {:.6}", p.position[0], p.position[1], p.position[2]);
        if let Some(c) = p.color {
            let _ = write!(s, " {:.6} {:.6} {:.6}", c[0], c[1], c[2]);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn k_simple() -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, 32, 32).unwrap()
    }

    #[test]
    fn project_identity_transform() {
        let k = Intrinsics::new(55.0, 60.0, 16.0, 12.0, 32, 24).unwrap();
        let p = project(12.0, 7.0, 5.0, &k, &RigidTransform::identity()).unwrap();
        assert!((p.x - 12.0).abs() < 1e-12);
        assert!((p.y - 7.0).abs() < 1e-12);
        assert!((p.depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn project_analytic_translation() {
        // fx=fy=1, c=(0,0): p=(0,0) at depth 2 translated by (1,0,0) -> (0.5, 0).
        let k = k_simple();
        let m = RigidTransform::from_translation([1.0, 0.0, 0.0]);
        let p = project(0.0, 0.0, 2.0, &k, &m).unwrap();
        assert!((p.x - 0.5).abs() < 1e-12);
        assert!(p.y.abs() < 1e-12);
        assert!((p.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn project_rejects_bad_depth() {
        let k = k_simple();
        assert!(project(1.0, 1.0, 0.0, &k, &RigidTransform::identity()).is_err());
        assert!(project(1.0, 1.0, f64::NAN, &k, &RigidTransform::identity()).is_err());
        assert!(project(f64::INFINITY, 1.0, 1.0, &k, &RigidTransform::identity()).is_err());
    }

    #[test]
    fn behind_camera_is_flagged_not_clamped() {
        let k = k_simple();
        let m = RigidTransform::from_translation([0.0, 0.0, -10.0]);
        let p = project(3.0, 4.0, 2.0, &k, &m).unwrap();
        assert!(!p.in_front());
    }

    #[test]
    fn back_project_principal_ray() {
        let k = Intrinsics::new(50.0, 50.0, 10.0, 8.0, 32, 24).unwrap();
        let p = back_project(10.0, 8.0, 10.0, &k).unwrap();
        assert_eq!(p, [0.0, 0.0, 10.0]);
    }

    #[test]
    fn back_project_analytic() {
        let k = Intrinsics::new(2.0, 2.0, 0.0, 0.0, 16, 16).unwrap();
        let p = back_project(4.0, 2.0, 3.0, &k).unwrap();
        assert!((p[0] - 6.0).abs() < 1e-12);
        assert!((p[1] - 3.0).abs() < 1e-12);
        assert!((p[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn project_back_project_roundtrip() {
        let k = Intrinsics::new(80.0, 75.0, 31.5, 23.5, 64, 48).unwrap();
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let px = next() * 63.0;
            let py = next() * 47.0;
            let d = 40.0 + next() * 110.0;
            let cam = back_project(px, py, d, &k).unwrap();
            let (qx, qy) = k.to_pixel(cam);
            assert!((qx - px).abs() < 1e-9 && (qy - py).abs() < 1e-9);
        }
    }

    #[test]
    fn rigid_transform_inverse_and_compose() {
        let m = RigidTransform::from_axis_angle([0.3, -1.0, 0.2], 0.7, [5.0, -2.0, 1.0]).unwrap();
        m.validate().unwrap();
        let id = m.compose(&m.inverse());
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((id.rotation[i][j] - expected).abs() < 1e-9);
            }
            assert!(id.translation[i].abs() < 1e-9);
        }
    }

    #[test]
    fn compose_is_associative() {
        let a = RigidTransform::from_axis_angle([1.0, 0.0, 0.0], 0.3, [1.0, 2.0, 3.0]).unwrap();
        let b = RigidTransform::from_axis_angle([0.0, 1.0, 0.0], -0.4, [0.5, 0.0, -1.0]).unwrap();
        let c = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 1.1, [-2.0, 0.3, 0.8]).unwrap();
        let lhs = a.compose(&b).compose(&c);
        let rhs = a.compose(&b.compose(&c));
        let p = [3.0, -4.0, 7.0];
        let l = lhs.apply(p);
        let r = rhs.apply(p);
        for i in 0..3 {
            assert!((l[i] - r[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_integer_and_midpoint() {
        let img = ImageBuffer::from_fn(4, 3, 1, |x, y, _| (x + y) as f64 / 8.0).unwrap();
        let mut out = [0.0];
        assert!(img.sample(2.0, 1.0, &mut out));
        assert_eq!(out[0], img.get(2, 1, 0));
        // midway between values 0 and 1 (scaled): use a two-pixel ramp
        let ramp = ImageBuffer::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert!(ramp.sample(0.5, 0.0, &mut out));
        assert!((out[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_clamps_and_flags() {
        let img = ImageBuffer::from_fn(4, 4, 1, |x, y, _| ((x * 4 + y) as f64) / 16.0).unwrap();
        let mut out = [0.0];
        assert!(!img.sample(-3.0, -3.0, &mut out));
        assert_eq!(out[0], img.get(0, 0, 0));
        assert!(!img.sample(100.0, 1.0, &mut out));
        assert_eq!(out[0], img.get(3, 1, 0));
    }

    #[test]
    fn synthesize_identity_pose_is_identity() {
        let src = ImageBuffer::from_fn(8, 6, 2, |x, y, c| ((x + 2 * y + c) % 7) as f64 / 7.0).unwrap();
        let depth = DepthMap::constant(8, 6, 100.0).unwrap();
        let k = Intrinsics::new(10.0, 10.0, 4.0, 3.0, 8, 6).unwrap();
        let (out, mask) = synthesize_view(&depth, &src, &k, &RigidTransform::identity()).unwrap();
        assert_eq!(out, src);
        assert_eq!(mask.count_true(), 48);
    }

    #[test]
    fn synthesize_all_out_of_frame() {
        let src = ImageBuffer::from_fn(8, 6, 1, |x, _, _| x as f64 / 8.0).unwrap();
        let depth = DepthMap::constant(8, 6, 10.0).unwrap();
        let k = Intrinsics::new(10.0, 10.0, 4.0, 3.0, 8, 6).unwrap();
        let m = RigidTransform::from_translation([1e6, 0.0, 0.0]);
        let (_, mask) = synthesize_view(&depth, &src, &k, &m).unwrap();
        assert_eq!(mask.count_true(), 0);
    }

    #[test]
    fn warp_equivariant_under_integer_shift() {
        // Shifting the source texture by one pixel and compensating with a
        // translation of fx*shift*depth... simpler: constant-depth scene,
        // lateral translation t_x = -shift * d / fx reproduces the shift.
        let w = 16;
        let h = 12;
        let d = 50.0;
        let k = Intrinsics::new(20.0, 20.0, 8.0, 6.0, w, h).unwrap();
        let src = ImageBuffer::from_fn(w, h, 1, |x, y, _| {
            (((x * 7 + y * 3) % 11) as f64) / 11.0
        })
        .unwrap();
        let depth = DepthMap::constant(w, h, d).unwrap();
        let shift = 1.0;
        let m = RigidTransform::from_translation([shift * d / k.fx, 0.0, 0.0]);
        let (out, mask) = synthesize_view(&depth, &src, &k, &m).unwrap();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    assert!((out.get(x, y, 0) - src.get(x + 1, y, 0)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pointcloud_principal_point_and_plane() {
        let k = Intrinsics::new(30.0, 30.0, 3.0, 2.0, 8, 6).unwrap();
        let depth = DepthMap::constant(8, 6, 7.0).unwrap();
        let cloud = depth_to_pointcloud(&depth, &k, None).unwrap();
        let center = &cloud[2 * 8 + 3];
        assert!(center.position[0].abs() < 1e-12 && center.position[1].abs() < 1e-12);
        assert!((center.position[2] - 7.0).abs() < 1e-12);
        assert!(cloud.iter().all(|p| (p.position[2] - 7.0).abs() < 1e-12));
    }

    #[test]
    fn pointcloud_rasterizes_back_to_depth() {
        let k = Intrinsics::new(25.0, 28.0, 4.0, 3.0, 8, 6).unwrap();
        let depth = DepthMap::from_fn_test(8, 6, |x, y| 40.0 + (x * 3 + y) as f64);
        let cloud = depth_to_pointcloud(&depth, &k, None).unwrap();
        // rasterizer oracle: project each point, accumulate z at its pixel
        for (i, p) in cloud.iter().enumerate() {
            let (px, py) = k.to_pixel(p.position);
            let x = px.round() as usize;
            let y = py.round() as usize;
            assert_eq!(i, y * 8 + x);
            assert!((p.position[2] - depth.get(x, y)).abs() < 1e-9);
        }
    }

    impl DepthMap {
        fn from_fn_test(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> DepthMap {
            let mut data = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    data.push(f(x, y));
                }
            }
            DepthMap::new(w, h, data).unwrap()
        }
    }
}
