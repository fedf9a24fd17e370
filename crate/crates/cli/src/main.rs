//! Command-line front end: renders synthetic endoscopic scenes, runs the
//! plane-sweep and refinement pipelines on them, and evaluates depth maps.
//!
//! Every run writes its effective configuration to `run_config.txt` in the
//! output directory, and all outputs are deterministic in `--seed`.

use endodepth::{config, formats};

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use endodepth_core::costvolume::{
    build_cost_volume, extract_features, soft_argmin_depth, DepthRangeState,
};
use endodepth_core::geometry::{depth_to_pointcloud, DepthMap, ImageBuffer};
use endodepth_core::metrics::{compute_metrics, median_scale, MetricsConfig, MetricsReport};
use endodepth_core::patchmatch::{
    build_support_domains, detect_keypoints, FixedGridDecoder, OffsetDecoder,
    SectorSoftArgmaxDecoder,
};
use endodepth_core::refine::{refine_depth, trace_csv, RefineScene};
use endodepth_core::synth::{render, ViewRender};
use endodepth_core::teaching::apply_appearance_simulator;

use config::AppConfig;

#[derive(Parser)]
#[command(name = "endodepth", version, about = "Multi-frame depth estimation pipeline")]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding `scene.seed`; also drives the appearance simulator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured scene to images and ground-truth depth maps.
    Render,
    /// Plane-sweep cost volume with soft-argmin depth, evaluated against
    /// ground truth.
    Sweep,
    /// Gradient-based depth refinement from a fronto-parallel initialization.
    Refine,
    /// Compare a predicted depth map against ground truth after median
    /// scaling.
    Eval {
        /// Predicted depth, PFM.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth depth, PFM.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Back-project a depth map to an ascii PLY point cloud.
    Pointcloud {
        /// Depth map, PFM.
        #[arg(long)]
        depth: PathBuf,
        /// Optional image whose colors are attached to the points.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Apply the appearance simulator to the rendered target view.
    Simulate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    let echo = cfg.echo(cli.seed);
    fs::write(cli.out.join("run_config.txt"), &echo)
        .with_context(|| format!("writing {}", cli.out.join("run_config.txt").display()))?;
    print!("{echo}");

    match &cli.command {
        Command::Render => cmd_render(&cfg, cli),
        Command::Sweep => cmd_sweep(&cfg, cli),
        Command::Refine => cmd_refine(&cfg, cli),
        Command::Eval { pred, gt } => cmd_eval(&cfg, cli, pred, gt),
        Command::Pointcloud { depth, image } => cmd_pointcloud(&cfg, cli, depth, image.as_deref()),
        Command::Simulate => cmd_simulate(&cfg, cli),
    }
}

fn render_scene(cfg: &AppConfig, cli: &Cli) -> Result<Vec<ViewRender>> {
    let spec = cfg.scene_spec(cli.seed)?;
    render(&spec).map_err(|e| anyhow!("rendering scene: {e}"))
}

fn write_view_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    formats::write_pnm(path, img)
}

fn image_path(out: &Path, stem: &str, channels: usize) -> PathBuf {
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    out.join(format!("{stem}.{ext}"))
}

fn metrics_lines(r: &MetricsReport) -> String {
    format!(
        "abs_rel = {:.6}\nsq_rel = {:.6}\nrmse = {:.6}\nrmse_log = {:.6}\ndelta = {:.6}\nn = {}\n",
        r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.delta, r.n
    )
}

fn evaluate(pred: &DepthMap, gt: &DepthMap, cfg: &AppConfig, out: &Path) -> Result<()> {
    let (scaled, factor) = median_scale(pred, gt).map_err(|e| anyhow!("median scaling: {e}"))?;
    let mcfg = MetricsConfig {
        clip_mm: Some(cfg.clip_mm),
        mask_gt_beyond_clip: cfg.mask_gt_beyond_clip,
    };
    let report = compute_metrics(&scaled, gt, &mcfg).map_err(|e| anyhow!("metrics: {e}"))?;
    let mut text = metrics_lines(&report);
    text.push_str(&format!("scale = {factor:.9}\n"));
    fs::write(out.join("metrics.txt"), &text)
        .with_context(|| format!("writing {}", out.join("metrics.txt").display()))?;
    print!("{text}");
    Ok(())
}

fn cmd_render(cfg: &AppConfig, cli: &Cli) -> Result<()> {
    let views = render_scene(cfg, cli)?;
    for (i, v) in views.iter().enumerate() {
        write_view_image(&image_path(&cli.out, &format!("view{i}"), v.image.channels), &v.image)?;
        formats::write_pfm(&cli.out.join(format!("depth{i}.pfm")), &v.depth)?;
    }
    println!("rendered {} views to {}", views.len(), cli.out.display());
    Ok(())
}

fn cmd_sweep(cfg: &AppConfig, cli: &Cli) -> Result<()> {
    let views = render_scene(cfg, cli)?;
    let k = cfg.intrinsics()?;
    let kind = cfg.descriptor()?;
    let tf = extract_features(&views[0].image, kind);
    let source_feats: Vec<_> = views[1..]
        .iter()
        .map(|v| extract_features(&v.image, kind))
        .collect();
    let poses: Vec<_> = views[1..]
        .iter()
        .map(|v| v.pose.compose(&views[0].pose.inverse()))
        .collect();
    let state = DepthRangeState::new(cfg.d_min, cfg.d_max, cfg.momentum)
        .map_err(|e| anyhow!("depth range: {e}"))?;
    let cv = build_cost_volume(&tf, &source_feats, &poses, &k, &state, cfg.planes)
        .map_err(|e| anyhow!("building cost volume: {e}"))?;
    let depth = soft_argmin_depth(&cv, cfg.temperature)
        .map_err(|e| anyhow!("soft-argmin: {e}"))?;
    formats::write_pfm(&cli.out.join("sweep_depth.pfm"), &depth)?;
    formats::write_pfm(&cli.out.join("gt_depth.pfm"), &views[0].depth)?;
    evaluate(&depth, &views[0].depth, cfg, &cli.out)
}

fn cmd_refine(cfg: &AppConfig, cli: &Cli) -> Result<()> {
    let views = render_scene(cfg, cli)?;
    let k = cfg.intrinsics()?;
    let feat = extract_features(&views[0].image, cfg.descriptor()?);
    let kp = detect_keypoints(&views[0].image, cfg.keypoints, cfg.kp_cell)
        .map_err(|e| anyhow!("keypoint detection: {e}"))?;
    let fixed = FixedGridDecoder::new();
    let adaptive;
    let decoder: &dyn OffsetDecoder = match cfg.decoder.as_str() {
        "fixed" => &fixed,
        "adaptive" => {
            adaptive = SectorSoftArgmaxDecoder::new(cfg.decoder_temperature, cfg.max_radius)
                .map_err(|e| anyhow!("decoder: {e}"))?;
            &adaptive
        }
        d => bail!("refine.decoder: unknown decoder '{d}' (expected fixed|adaptive)"),
    };
    let domains = build_support_domains(&feat, &kp, cfg.search_range, decoder)
        .map_err(|e| anyhow!("support domains: {e}"))?;
    let sources: Vec<_> = views[1..].iter().map(|v| v.image.clone()).collect();
    let poses: Vec<_> = views[1..]
        .iter()
        .map(|v| v.pose.compose(&views[0].pose.inverse()))
        .collect();
    let scene = RefineScene {
        target: &views[0].image,
        sources: &sources,
        poses: &poses,
        intrinsics: &k,
        domains: &domains,
        teacher: None,
        self_reference: None,
        photometric: cfg.photometric(),
    };
    let init_value = cfg.init_depth.unwrap_or(0.5 * (cfg.d_min + cfg.d_max));
    let init = DepthMap::constant(cfg.width, cfg.height, init_value)
        .map_err(|e| anyhow!("initial depth: {e}"))?;
    let (refined, trace) = refine_depth(&init, &scene, &cfg.refine_config()?, &cfg.weights())
        .map_err(|e| anyhow!("refinement: {e}"))?;
    formats::write_pfm(&cli.out.join("refined_depth.pfm"), &refined)?;
    formats::write_pfm(&cli.out.join("gt_depth.pfm"), &views[0].depth)?;
    fs::write(cli.out.join("trace.csv"), trace_csv(&trace))
        .with_context(|| format!("writing {}", cli.out.join("trace.csv").display()))?;
    evaluate(&refined, &views[0].depth, cfg, &cli.out)
}

fn cmd_eval(cfg: &AppConfig, cli: &Cli, pred: &Path, gt: &Path) -> Result<()> {
    let pred = formats::read_pfm(pred)?;
    let gt = formats::read_pfm(gt)?;
    evaluate(&pred, &gt, cfg, &cli.out)
}

fn cmd_pointcloud(cfg: &AppConfig, cli: &Cli, depth: &Path, image: Option<&Path>) -> Result<()> {
    let depth = formats::read_pfm(depth)?;
    let img = image.map(formats::read_pnm).transpose()?;
    let (w, h) = depth.shape();
    let k = endodepth_core::geometry::Intrinsics::new(
        cfg.fx,
        cfg.fy,
        cfg.cx.unwrap_or((w as f64 - 1.0) / 2.0),
        cfg.cy.unwrap_or((h as f64 - 1.0) / 2.0),
        w,
        h,
    )
    .map_err(|e| anyhow!("intrinsics: {e}"))?;
    let points = depth_to_pointcloud(&depth, &k, img.as_ref())
        .map_err(|e| anyhow!("back-projection: {e}"))?;
    formats::write_ply(&cli.out.join("cloud.ply"), &points)?;
    println!("wrote {} points to {}", points.len(), cli.out.join("cloud.ply").display());
    Ok(())
}

fn cmd_simulate(cfg: &AppConfig, cli: &Cli) -> Result<()> {
    let views = render_scene(cfg, cli)?;
    let sim = cfg.simulator(cli.seed.unwrap_or(cfg.scene_seed));
    let (img, mask) = apply_appearance_simulator(&views[0].image, &sim)
        .map_err(|e| anyhow!("appearance simulator: {e}"))?;
    write_view_image(
        &image_path(&cli.out, "original", views[0].image.channels),
        &views[0].image,
    )?;
    write_view_image(&image_path(&cli.out, "simulated", img.channels), &img)?;
    let mask_img = ImageBuffer::from_fn(mask.width, mask.height, 1, |x, y, _| {
        if mask.get(x, y) {
            1.0
        } else {
            0.0
        }
    })
    .map_err(|e| anyhow!("mask image: {e}"))?;
    formats::write_pnm(&cli.out.join("unoccluded_mask.pgm"), &mask_img)?;
    println!(
        "simulated view written to {}",
        image_path(&cli.out, "simulated", img.channels).display()
    );
    Ok(())
}
