//! Procedural multi-view ground truth: analytic geometry ray-cast per pixel
//! with world-anchored textures, so multi-view photoconsistency holds exactly
//! on Lambertian surfaces. Stands in for real endoscopic footage in every
//! oracle-based test.

use alloc::vec::Vec;

#[allow(unused_imports)]
use crate::mathx::FloatExt;
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImageBuffer, Intrinsics, RigidTransform};
use crate::rng::SeededRng;
use crate::teaching::{apply_appearance_simulator, color_jitter, gamma_correct, AppearanceSimConfig,
    JitterParams, OcclusionMask};

/// Scene surface, defined in world coordinates (world = camera frame of an
/// identity-pose view). Depth parameters are millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// Fronto-parallel plane `z = depth`.
    Plane { depth: f64 },
    /// Two fronto-parallel planes split at world `x = edge_x`: near plane on
    /// the left, far plane on the right.
    TwoPlaneStep { near: f64, far: f64, edge_x: f64 },
    /// Sphere resting in front of a fronto-parallel plane.
    SphereOnPlane {
        plane: f64,
        center: [f64; 3],
        radius: f64,
    },
}

/// World-anchored texture field evaluated at the hit point's world (x, y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    Constant { value: f64 },
    /// Checkerboard with the given world-space period.
    Checker { period: f64, low: f64, high: f64 },
    /// Sum of two sinusoid products; frequencies in cycles per millimetre.
    Sinusoid {
        base: f64,
        amp1: f64,
        freq1: f64,
        amp2: f64,
        freq2: f64,
    },
    /// Smooth seeded value noise on a world-space lattice.
    ValueNoise { cell: f64, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub geometry: Geometry,
    pub texture: Texture,
    pub intrinsics: Intrinsics,
    /// World-to-camera pose per view; view 0 is usually the identity.
    pub poses: Vec<RigidTransform>,
    pub channels: usize,
    /// Multiplies the texture on the near plane of a two-plane step, so the
    /// depth edge can coincide with an intensity edge.
    pub near_albedo: f64,
    pub far_albedo: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::invalid("scene needs at least one pose"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("scene needs at least one channel"));
        }
        let ok = match self.geometry {
            Geometry::Plane { depth } => depth > 0.0,
            Geometry::TwoPlaneStep { near, far, .. } => near > 0.0 && far > near,
            Geometry::SphereOnPlane { plane, radius, .. } => plane > 0.0 && radius > 0.0,
        };
        if !ok {
            return Err(Error::invalid("geometry depths must be positive"));
        }
        Ok(())
    }
}

/// One rendered view with its exact analytic depth and pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub pose: RigidTransform,
}

struct NoiseLattice {
    values: Vec<f64>,
    size: usize,
}

impl NoiseLattice {
    fn new(seed: u64, size: usize) -> Self {
        let mut rng = SeededRng::substream(seed, 0xA11CE);
        NoiseLattice {
            values: (0..size * size).map(|_| rng.unit_f64()).collect(),
            size,
        }
    }

    /// Bilinear value noise, periodic over the lattice.
    fn sample(&self, u: f64, v: f64) -> f64 {
        let s = self.size as f64;
        let wrap = |t: f64| {
            let m = t - (t / s).floor() * s;
            m
        };
        let u = wrap(u);
        let v = wrap(v);
        let x0 = u.floor() as usize % self.size;
        let y0 = v.floor() as usize % self.size;
        let x1 = (x0 + 1) % self.size;
        let y1 = (y0 + 1) % self.size;
        let fx = u - u.floor();
        let fy = v - v.floor();
        let g = |x: usize, y: usize| self.values[y * self.size + x];
        (1.0 - fx) * (1.0 - fy) * g(x0, y0)
            + fx * (1.0 - fy) * g(x1, y0)
            + (1.0 - fx) * fy * g(x0, y1)
            + fx * fy * g(x1, y1)
    }
}

fn texture_value(tex: &Texture, noise: &NoiseLattice, wx: f64, wy: f64) -> f64 {
    match *tex {
        Texture::Constant { value } => value,
        Texture::Checker { period, low, high } => {
            let cell = (wx / period).floor() + (wy / period).floor();
            if (cell as i64).rem_euclid(2) == 0 {
                high
            } else {
                low
            }
        }
        Texture::Sinusoid {
            base,
            amp1,
            freq1,
            amp2,
            freq2,
        } => {
            let tau = 2.0 * core::f64::consts::PI;
            let v = base
                + amp1 * (tau * freq1 * wx).sin() * (tau * freq1 * 0.83 * wy + 0.7).sin()
                + amp2 * (tau * freq2 * wx + 1.3).sin() * (tau * freq2 * 1.19 * wy + 2.1).sin();
            v.clamp(0.0, 1.0)
        }
        Texture::ValueNoise { cell, amplitude } => {
            let v = 0.5 + amplitude * (noise.sample(wx / cell, wy / cell) - 0.5) * 2.0;
            v.clamp(0.0, 1.0)
        }
    }
}

/// Ray-cast hit: world point and camera-space depth.
fn cast_ray(
    geometry: &Geometry,
    origin: [f64; 3],
    dir: [f64; 3],
) -> Option<([f64; 3], f64)> {
    let plane_hit = |z: f64| -> Option<([f64; 3], f64)> {
        if dir[2].abs() < 1e-15 {
            return None;
        }
        let s = (z - origin[2]) / dir[2];
        if s <= 0.0 {
            return None;
        }
        Some((
            [origin[0] + s * dir[0], origin[1] + s * dir[1], z],
            s,
        ))
    };
    match *geometry {
        Geometry::Plane { depth } => plane_hit(depth),
        Geometry::TwoPlaneStep { near, far, edge_x } => {
            // the near plane occludes the far one over its own half-space
            if let Some((p, s)) = plane_hit(near) {
                if p[0] < edge_x {
                    return Some((p, s));
                }
            }
            let (p, s) = plane_hit(far)?;
            Some((p, s))
        }
        Geometry::SphereOnPlane {
            plane,
            center,
            radius,
        } => {
            let oc = [
                origin[0] - center[0],
                origin[1] - center[1],
                origin[2] - center[2],
            ];
            let a = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
            let b = 2.0 * (oc[0] * dir[0] + oc[1] * dir[1] + oc[2] * dir[2]);
            let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let s = (-b - disc.sqrt()) / (2.0 * a);
                if s > 0.0 {
                    return Some((
                        [origin[0] + s * dir[0], origin[1] + s * dir[1], origin[2] + s * dir[2]],
                        s,
                    ));
                }
            }
            plane_hit(plane)
        }
    }
}

/// Render every view of the scene. Depth is the exact analytic camera-space
/// z of the hit; texture is sampled at the hit's world coordinates.
pub fn render(spec: &SceneSpec) -> Result<Vec<ViewRender>> {
    spec.validate()?;
    let k = &spec.intrinsics;
    let (w, h) = (k.width, k.height);
    let noise = NoiseLattice::new(spec.rng_seed, 64);
    let mut views = Vec::with_capacity(spec.poses.len());
    for pose in &spec.poses {
        pose.validate()?;
        let cam_to_world = pose.inverse();
        let origin = cam_to_world.translation;
        let mut img = Vec::with_capacity(w * h * spec.channels);
        let mut depth = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let ray_cam = k.ray(x as f64, y as f64);
                let dir = cam_to_world.rotate(ray_cam);
                let (world, _) = cast_ray(&spec.geometry, origin, dir).ok_or_else(|| {
                    Error::invalid("ray missed the scene; geometry does not cover the frustum")
                })?;
                // camera-space depth = z of the hit in this camera's frame
                let cam_pt = pose.apply(world);
                if !(cam_pt[2] > 0.0) {
                    return Err(Error::invalid("scene surface behind a camera"));
                }
                depth.push(cam_pt[2]);
                let mut v = texture_value(&spec.texture, &noise, world[0], world[1]);
                if let Geometry::TwoPlaneStep { edge_x, .. } = spec.geometry {
                    let albedo = if world[0] < edge_x {
                        spec.near_albedo
                    } else {
                        spec.far_albedo
                    };
                    v = (v * albedo).clamp(0.0, 1.0);
                }
                for c in 0..spec.channels {
                    // slight per-channel modulation keeps color images non-gray
                    let shifted = if spec.channels == 1 {
                        v
                    } else {
                        (v * (1.0 - 0.08 * c as f64)).clamp(0.0, 1.0)
                    };
                    img.push(shifted);
                }
            }
        }
        views.push(ViewRender {
            image: ImageBuffer::new(w, h, spec.channels, img)?,
            depth: DepthMap::new(w, h, depth)?,
            pose: *pose,
        });
    }
    Ok(views)
}

/// Photometric perturbations applied on top of rendered views to create
/// brightness-inconsistent multi-view fixtures.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Identity,
    Gamma(f64),
    Jitter(JitterParams),
    /// Full appearance simulator (per-view seeded substreams).
    Simulator(AppearanceSimConfig),
}

/// Perturb a single view; `view_index` selects the RNG substream when the
/// simulator is used. The analytic depth and pose are left untouched.
pub fn perturb_view(
    view: &ViewRender,
    perturbation: &Perturbation,
    seed: u64,
    view_index: u64,
) -> Result<(ViewRender, Option<OcclusionMask>)> {
    let (image, mask) = match perturbation {
        Perturbation::Identity => (view.image.clone(), None),
        Perturbation::Gamma(g) => (gamma_correct(&view.image, *g)?, None),
        Perturbation::Jitter(p) => (color_jitter(&view.image, p)?, None),
        Perturbation::Simulator(cfg) => {
            let cfg = AppearanceSimConfig {
                rng_seed: seed ^ (view_index.wrapping_mul(0x9E3779B97F4A7C15)),
                ..cfg.clone()
            };
            let (img, m) = apply_appearance_simulator(&view.image, &cfg)?;
            (img, Some(m))
        }
    };
    Ok((
        ViewRender {
            image,
            depth: view.depth.clone(),
            pose: view.pose,
        },
        mask,
    ))
}

/// Perturb every view in a batch.
pub fn perturb_views(
    views: &[ViewRender],
    perturbation: &Perturbation,
    seed: u64,
) -> Result<Vec<(ViewRender, Option<OcclusionMask>)>> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| perturb_view(v, perturbation, seed, i as u64))
        .collect()
}

/// Convenience two-view spec: identity target plus one translated source.
pub fn two_view_spec(
    geometry: Geometry,
    texture: Texture,
    intrinsics: Intrinsics,
    baseline: [f64; 3],
    seed: u64,
) -> SceneSpec {
    SceneSpec {
        geometry,
        texture,
        intrinsics,
        poses: alloc::vec![
            RigidTransform::identity(),
            RigidTransform::from_translation(baseline),
        ],
        channels: 1,
        near_albedo: 1.0,
        far_albedo: 1.0,
        rng_seed: seed,
    }
}
