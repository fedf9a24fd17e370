//! Run configuration: UTF-8 `section.key = value` lines with `#` comments.
//! Unknown keys are rejected with file/line diagnostics, and every run echoes
//! its effective configuration so outputs are self-describing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use endodepth_core::costvolume::DescriptorKind;
use endodepth_core::geometry::Intrinsics;
use endodepth_core::photometric::PhotometricConfig;
use endodepth_core::refine::{GradientMode, LossWeights, RefineConfig};
use endodepth_core::synth::{Geometry, SceneSpec, Texture};
use endodepth_core::teaching::AppearanceSimConfig;

pub const CONFIG_VERSION: &str = "1";

/// Raw parsed key/value pairs with their source lines.
struct RawConfig {
    path: String,
    pairs: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    fn parse(path: &str, text: &str) -> Result<RawConfig> {
        let mut pairs = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{path}:{ln}: expected 'section.key = value'"))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || !key.contains('.') {
                bail!("{path}:{ln}: key '{key}' must be 'section.key'");
            }
            if pairs
                .insert(key.to_owned(), (value.to_owned(), ln))
                .is_some()
            {
                bail!("{path}:{ln}: duplicate key '{key}'");
            }
        }
        Ok(RawConfig {
            path: path.to_owned(),
            pairs,
        })
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.pairs.remove(key)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((v, ln)) => v.parse().map_err(|_| {
                anyhow!("{}:{ln}: key '{key}': cannot parse value '{v}'", self.path)
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (_, ln))) = self.pairs.into_iter().next() {
            bail!("{}:{ln}: unknown key '{key}'", self.path);
        }
        Ok(())
    }
}

/// Everything a run can configure, flattened from the key=value file.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub version: String,
    // scene
    pub geometry: String,
    pub depth: f64,
    pub near: f64,
    pub far: f64,
    pub edge_x: f64,
    pub plane: f64,
    pub center: [f64; 3],
    pub radius: f64,
    pub texture: String,
    pub tex_value: f64,
    pub period: f64,
    pub low: f64,
    pub high: f64,
    pub base: f64,
    pub amp1: f64,
    pub freq1: f64,
    pub amp2: f64,
    pub freq2: f64,
    pub noise_cell: f64,
    pub amplitude: f64,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub baseline: [f64; 3],
    pub near_albedo: f64,
    pub far_albedo: f64,
    pub scene_seed: u64,
    // depth range
    pub d_min: f64,
    pub d_max: f64,
    pub momentum: f64,
    // sweep
    pub planes: usize,
    pub temperature: f64,
    pub descriptor: String,
    // photometric
    pub alpha: f64,
    pub ssim_window: usize,
    // weights
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    // refine
    pub levels: usize,
    pub coarse_factor: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub grad_mode: String,
    pub fd_step: f64,
    pub init_depth: Option<f64>,
    pub keypoints: usize,
    pub kp_cell: usize,
    pub search_range: usize,
    pub decoder: String,
    pub decoder_temperature: f64,
    pub max_radius: f64,
    // simulator
    pub gamma_range: (f64, f64),
    pub brightness: f64,
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub hue: f64,
    pub mask_count: (usize, usize),
    pub mask_size: (usize, usize),
    pub mask_fill: f64,
    // eval
    pub clip_mm: f64,
    pub mask_gt_beyond_clip: bool,
}

impl Default for AppConfig {
    fn default() -> Self {
        let sim = AppearanceSimConfig::default();
        AppConfig {
            version: CONFIG_VERSION.to_owned(),
            geometry: "plane".into(),
            depth: 100.0,
            near: 80.0,
            far: 120.0,
            edge_x: 0.0,
            plane: 120.0,
            center: [0.0, 0.0, 110.0],
            radius: 25.0,
            texture: "sinusoid".into(),
            tex_value: 0.5,
            period: 10.0,
            low: 0.2,
            high: 0.8,
            base: 0.5,
            amp1: 0.22,
            freq1: 0.014,
            amp2: 0.12,
            freq2: 0.033,
            noise_cell: 8.0,
            amplitude: 0.4,
            width: 64,
            height: 48,
            channels: 1,
            fx: 90.0,
            fy: 90.0,
            cx: None,
            cy: None,
            baseline: [8.0, 2.0, 0.0],
            near_albedo: 1.0,
            far_albedo: 1.0,
            scene_seed: 7,
            d_min: 50.0,
            d_max: 150.0,
            momentum: 0.99,
            planes: 32,
            temperature: 1e-3,
            descriptor: "patch3".into(),
            alpha: 0.85,
            ssim_window: 3,
            lambda1: 1.0,
            lambda2: 0.02,
            lambda3: 0.002,
            lambda4: 0.0001,
            levels: 3,
            coarse_factor: 4,
            iterations: 80,
            step_size: 3e4,
            grad_mode: "analytic".into(),
            fd_step: 1e-3,
            init_depth: None,
            keypoints: 48,
            kp_cell: 4,
            search_range: 8,
            decoder: "adaptive".into(),
            decoder_temperature: 0.05,
            max_radius: 4.0,
            gamma_range: sim.gamma_range,
            brightness: sim.brightness_range.1,
            contrast_range: sim.contrast_range,
            saturation_range: sim.saturation_range,
            hue: sim.hue_range.1,
            mask_count: sim.mask_count,
            mask_size: sim.mask_size_range,
            mask_fill: sim.mask_fill,
            clip_mm: 150.0,
            mask_gt_beyond_clip: false,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        AppConfig::from_text(&path.display().to_string(), &text)
    }

    pub fn from_text(path: &str, text: &str) -> Result<AppConfig> {
        let mut raw = RawConfig::parse(path, text)?;
        let d = AppConfig::default();
        let mut c = AppConfig {
            version: raw.take_parsed("run.version", d.version)?,
            geometry: raw.take_parsed("scene.geometry", d.geometry)?,
            depth: raw.take_parsed("scene.depth", d.depth)?,
            near: raw.take_parsed("scene.near", d.near)?,
            far: raw.take_parsed("scene.far", d.far)?,
            edge_x: raw.take_parsed("scene.edge_x", d.edge_x)?,
            plane: raw.take_parsed("scene.plane", d.plane)?,
            center: [
                raw.take_parsed("scene.center_x", d.center[0])?,
                raw.take_parsed("scene.center_y", d.center[1])?,
                raw.take_parsed("scene.center_z", d.center[2])?,
            ],
            radius: raw.take_parsed("scene.radius", d.radius)?,
            texture: raw.take_parsed("scene.texture", d.texture)?,
            tex_value: raw.take_parsed("scene.value", d.tex_value)?,
            period: raw.take_parsed("scene.period", d.period)?,
            low: raw.take_parsed("scene.low", d.low)?,
            high: raw.take_parsed("scene.high", d.high)?,
            base: raw.take_parsed("scene.base", d.base)?,
            amp1: raw.take_parsed("scene.amp1", d.amp1)?,
            freq1: raw.take_parsed("scene.freq1", d.freq1)?,
            amp2: raw.take_parsed("scene.amp2", d.amp2)?,
            freq2: raw.take_parsed("scene.freq2", d.freq2)?,
            noise_cell: raw.take_parsed("scene.cell", d.noise_cell)?,
            amplitude: raw.take_parsed("scene.amplitude", d.amplitude)?,
            width: raw.take_parsed("scene.width", d.width)?,
            height: raw.take_parsed("scene.height", d.height)?,
            channels: raw.take_parsed("scene.channels", d.channels)?,
            fx: raw.take_parsed("scene.fx", d.fx)?,
            fy: raw.take_parsed("scene.fy", d.fy)?,
            cx: match raw.take("scene.cx") {
                Some((v, ln)) => Some(v.parse().map_err(|_| {
                    anyhow!("{path}:{ln}: key 'scene.cx': cannot parse value '{v}'")
                })?),
                None => None,
            },
            cy: match raw.take("scene.cy") {
                Some((v, ln)) => Some(v.parse().map_err(|_| {
                    anyhow!("{path}:{ln}: key 'scene.cy': cannot parse value '{v}'")
                })?),
                None => None,
            },
            baseline: [
                raw.take_parsed("scene.baseline_x", d.baseline[0])?,
                raw.take_parsed("scene.baseline_y", d.baseline[1])?,
                raw.take_parsed("scene.baseline_z", d.baseline[2])?,
            ],
            near_albedo: raw.take_parsed("scene.near_albedo", d.near_albedo)?,
            far_albedo: raw.take_parsed("scene.far_albedo", d.far_albedo)?,
            scene_seed: raw.take_parsed("scene.seed", d.scene_seed)?,
            d_min: raw.take_parsed("depth_range.min_mm", d.d_min)?,
            d_max: raw.take_parsed("depth_range.max_mm", d.d_max)?,
            momentum: raw.take_parsed("depth_range.momentum", d.momentum)?,
            planes: raw.take_parsed("sweep.planes", d.planes)?,
            temperature: raw.take_parsed("sweep.temperature", d.temperature)?,
            descriptor: raw.take_parsed("sweep.descriptor", d.descriptor)?,
            alpha: raw.take_parsed("photometric.alpha", d.alpha)?,
            ssim_window: raw.take_parsed("photometric.window", d.ssim_window)?,
            lambda1: raw.take_parsed("weights.lambda1", d.lambda1)?,
            lambda2: raw.take_parsed("weights.lambda2", d.lambda2)?,
            lambda3: raw.take_parsed("weights.lambda3", d.lambda3)?,
            lambda4: raw.take_parsed("weights.lambda4", d.lambda4)?,
            levels: raw.take_parsed("refine.levels", d.levels)?,
            coarse_factor: raw.take_parsed("refine.coarse_factor", d.coarse_factor)?,
            iterations: raw.take_parsed("refine.iterations", d.iterations)?,
            step_size: raw.take_parsed("refine.step_size", d.step_size)?,
            grad_mode: raw.take_parsed("refine.mode", d.grad_mode)?,
            fd_step: raw.take_parsed("refine.fd_step", d.fd_step)?,
            init_depth: match raw.take("refine.init_depth") {
                Some((v, ln)) => Some(v.parse().map_err(|_| {
                    anyhow!("{path}:{ln}: key 'refine.init_depth': cannot parse value '{v}'")
                })?),
                None => None,
            },
            keypoints: raw.take_parsed("refine.keypoints", d.keypoints)?,
            kp_cell: raw.take_parsed("refine.kp_cell", d.kp_cell)?,
            search_range: raw.take_parsed("refine.search_range", d.search_range)?,
            decoder: raw.take_parsed("refine.decoder", d.decoder)?,
            decoder_temperature: raw.take_parsed("refine.temperature", d.decoder_temperature)?,
            max_radius: raw.take_parsed("refine.max_radius", d.max_radius)?,
            gamma_range: (
                raw.take_parsed("simulator.gamma_min", d.gamma_range.0)?,
                raw.take_parsed("simulator.gamma_max", d.gamma_range.1)?,
            ),
            brightness: raw.take_parsed("simulator.brightness", d.brightness)?,
            contrast_range: (
                raw.take_parsed("simulator.contrast_min", d.contrast_range.0)?,
                raw.take_parsed("simulator.contrast_max", d.contrast_range.1)?,
            ),
            saturation_range: (
                raw.take_parsed("simulator.saturation_min", d.saturation_range.0)?,
                raw.take_parsed("simulator.saturation_max", d.saturation_range.1)?,
            ),
            hue: raw.take_parsed("simulator.hue", d.hue)?,
            mask_count: (
                raw.take_parsed("simulator.mask_count_min", d.mask_count.0)?,
                raw.take_parsed("simulator.mask_count_max", d.mask_count.1)?,
            ),
            mask_size: (
                raw.take_parsed("simulator.mask_size_min", d.mask_size.0)?,
                raw.take_parsed("simulator.mask_size_max", d.mask_size.1)?,
            ),
            mask_fill: raw.take_parsed("simulator.mask_fill", d.mask_fill)?,
            clip_mm: raw.take_parsed("eval.clip_mm", d.clip_mm)?,
            mask_gt_beyond_clip: raw.take_parsed("eval.mask_gt_beyond_clip", d.mask_gt_beyond_clip)?,
        };
        if c.version != CONFIG_VERSION {
            bail!("{path}: unsupported run.version '{}'", c.version);
        }
        // square principal point default: image center
        c.cx.get_or_insert((c.width as f64 - 1.0) / 2.0);
        c.cy.get_or_insert((c.height as f64 - 1.0) / 2.0);
        raw.finish()?;
        Ok(c)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let cx = self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0);
        let cy = self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0);
        Intrinsics::new(self.fx, self.fy, cx, cy, self.width, self.height)
            .map_err(|e| anyhow!("intrinsics: {e}"))
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Ok(match self.geometry.as_str() {
            "plane" => Geometry::Plane { depth: self.depth },
            "two_plane_step" => Geometry::TwoPlaneStep {
                near: self.near,
                far: self.far,
                edge_x: self.edge_x,
            },
            "sphere_on_plane" => Geometry::SphereOnPlane {
                plane: self.plane,
                center: self.center,
                radius: self.radius,
            },
            g => bail!("scene.geometry: unknown geometry '{g}'"),
        })
    }

    pub fn texture(&self) -> Result<Texture> {
        Ok(match self.texture.as_str() {
            "constant" => Texture::Constant {
                value: self.tex_value,
            },
            "checker" => Texture::Checker {
                period: self.period,
                low: self.low,
                high: self.high,
            },
            "sinusoid" => Texture::Sinusoid {
                base: self.base,
                amp1: self.amp1,
                freq1: self.freq1,
                amp2: self.amp2,
                freq2: self.freq2,
            },
            "value_noise" => Texture::ValueNoise {
                cell: self.noise_cell,
                amplitude: self.amplitude,
            },
            t => bail!("scene.texture: unknown texture '{t}'"),
        })
    }

    /// Two-view scene (identity target plus one translated source), with the
    /// seed optionally overridden from the command line.
    pub fn scene_spec(&self, seed_override: Option<u64>) -> Result<SceneSpec> {
        use endodepth_core::geometry::RigidTransform;
        Ok(SceneSpec {
            geometry: self.geometry()?,
            texture: self.texture()?,
            intrinsics: self.intrinsics()?,
            poses: vec![
                RigidTransform::identity(),
                RigidTransform::from_translation(self.baseline),
            ],
            channels: self.channels,
            near_albedo: self.near_albedo,
            far_albedo: self.far_albedo,
            rng_seed: seed_override.unwrap_or(self.scene_seed),
        })
    }

    pub fn descriptor(&self) -> Result<DescriptorKind> {
        Ok(match self.descriptor.as_str() {
            "intensity" => DescriptorKind::Intensity,
            "grad" => DescriptorKind::Grad,
            "patch3" => DescriptorKind::Patch3,
            k => bail!("sweep.descriptor: unknown descriptor '{k}'"),
        })
    }

    pub fn photometric(&self) -> PhotometricConfig {
        PhotometricConfig {
            alpha: self.alpha,
            ssim_window: self.ssim_window,
            ..PhotometricConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
        }
    }

    pub fn refine_config(&self) -> Result<RefineConfig> {
        let mode = match self.grad_mode.as_str() {
            "analytic" => GradientMode::Analytic,
            "fd" => GradientMode::FiniteDifference,
            m => bail!("refine.mode: unknown mode '{m}' (expected analytic|fd)"),
        };
        Ok(RefineConfig {
            levels: self.levels,
            coarse_factor: self.coarse_factor,
            iterations_per_level: self.iterations,
            step_size: self.step_size,
            mode,
            fd_step: self.fd_step,
            depth_range: (self.d_min, self.d_max),
        })
    }

    pub fn simulator(&self, seed: u64) -> AppearanceSimConfig {
        AppearanceSimConfig {
            gamma_range: self.gamma_range,
            brightness_range: (-self.brightness, self.brightness),
            contrast_range: self.contrast_range,
            saturation_range: self.saturation_range,
            hue_range: (-self.hue, self.hue),
            mask_count: self.mask_count,
            mask_size_range: self.mask_size,
            mask_fill: self.mask_fill,
            rng_seed: seed,
        }
    }

    /// Effective configuration echo: every key with its value, sorted, so a
    /// run's outputs are reproducible from its echo alone.
    pub fn echo(&self, seed: Option<u64>) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        let mut p = |k: &str, v: String| rows.push((k.to_owned(), v));
        p("run.version", self.version.clone());
        p("run.seed", seed.map_or_else(|| "none".into(), |s| s.to_string()));
        p("scene.geometry", self.geometry.clone());
        p("scene.depth", self.depth.to_string());
        p("scene.near", self.near.to_string());
        p("scene.far", self.far.to_string());
        p("scene.edge_x", self.edge_x.to_string());
        p("scene.plane", self.plane.to_string());
        p("scene.center_x", self.center[0].to_string());
        p("scene.center_y", self.center[1].to_string());
        p("scene.center_z", self.center[2].to_string());
        p("scene.radius", self.radius.to_string());
        p("scene.texture", self.texture.clone());
        p("scene.value", self.tex_value.to_string());
        p("scene.period", self.period.to_string());
        p("scene.low", self.low.to_string());
        p("scene.high", self.high.to_string());
        p("scene.base", self.base.to_string());
        p("scene.amp1", self.amp1.to_string());
        p("scene.freq1", self.freq1.to_string());
        p("scene.amp2", self.amp2.to_string());
        p("scene.freq2", self.freq2.to_string());
        p("scene.cell", self.noise_cell.to_string());
        p("scene.amplitude", self.amplitude.to_string());
        p("scene.width", self.width.to_string());
        p("scene.height", self.height.to_string());
        p("scene.channels", self.channels.to_string());
        p("scene.fx", self.fx.to_string());
        p("scene.fy", self.fy.to_string());
        p("scene.cx", self.cx.map_or_else(|| "auto".into(), |v| v.to_string()));
        p("scene.cy", self.cy.map_or_else(|| "auto".into(), |v| v.to_string()));
        p("scene.baseline_x", self.baseline[0].to_string());
        p("scene.baseline_y", self.baseline[1].to_string());
        p("scene.baseline_z", self.baseline[2].to_string());
        p("scene.near_albedo", self.near_albedo.to_string());
        p("scene.far_albedo", self.far_albedo.to_string());
        p("scene.seed", self.scene_seed.to_string());
        p("depth_range.min_mm", self.d_min.to_string());
        p("depth_range.max_mm", self.d_max.to_string());
        p("depth_range.momentum", self.momentum.to_string());
        p("sweep.planes", self.planes.to_string());
        p("sweep.temperature", self.temperature.to_string());
        p("sweep.descriptor", self.descriptor.clone());
        p("photometric.alpha", self.alpha.to_string());
        p("photometric.window", self.ssim_window.to_string());
        p("weights.lambda1", self.lambda1.to_string());
        p("weights.lambda2", self.lambda2.to_string());
        p("weights.lambda3", self.lambda3.to_string());
        p("weights.lambda4", self.lambda4.to_string());
        p("refine.levels", self.levels.to_string());
        p("refine.coarse_factor", self.coarse_factor.to_string());
        p("refine.iterations", self.iterations.to_string());
        p("refine.step_size", self.step_size.to_string());
        p("refine.mode", self.grad_mode.clone());
        p("refine.fd_step", self.fd_step.to_string());
        p(
            "refine.init_depth",
            self.init_depth.map_or_else(|| "auto".into(), |v| v.to_string()),
        );
        p("refine.keypoints", self.keypoints.to_string());
        p("refine.kp_cell", self.kp_cell.to_string());
        p("refine.search_range", self.search_range.to_string());
        p("refine.decoder", self.decoder.clone());
        p("refine.temperature", self.decoder_temperature.to_string());
        p("refine.max_radius", self.max_radius.to_string());
        p("simulator.gamma_min", self.gamma_range.0.to_string());
        p("simulator.gamma_max", self.gamma_range.1.to_string());
        p("simulator.brightness", self.brightness.to_string());
        p("simulator.contrast_min", self.contrast_range.0.to_string());
        p("simulator.contrast_max", self.contrast_range.1.to_string());
        p("simulator.saturation_min", self.saturation_range.0.to_string());
        p("simulator.saturation_max", self.saturation_range.1.to_string());
        p("simulator.hue", self.hue.to_string());
        p("simulator.mask_count_min", self.mask_count.0.to_string());
        p("simulator.mask_count_max", self.mask_count.1.to_string());
        p("simulator.mask_size_min", self.mask_size.0.to_string());
        p("simulator.mask_size_max", self.mask_size.1.to_string());
        p("simulator.mask_fill", self.mask_fill.to_string());
        p("eval.clip_mm", self.clip_mm.to_string());
        p("eval.mask_gt_beyond_clip", self.mask_gt_beyond_clip.to_string());
        rows.sort();
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
