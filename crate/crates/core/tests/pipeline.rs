//! End-to-end smoke tests: render a synthetic scene, run the plane sweep,
//! assemble support domains, refine, and evaluate — all modules in one flow.

use endodepth_core::costvolume::{
    build_cost_volume, extract_features, soft_argmin_depth, DepthRangeState, DescriptorKind,
};
use endodepth_core::geometry::{DepthMap, Intrinsics, RigidTransform};
use endodepth_core::metrics::{compute_metrics, median_scale, MetricsConfig};
use endodepth_core::patchmatch::{
    build_support_domains, detect_keypoints, SectorSoftArgmaxDecoder,
};
use endodepth_core::photometric::PhotometricConfig;
use endodepth_core::refine::{refine_depth, LossWeights, RefineConfig, RefineScene};
use endodepth_core::synth::{render, two_view_spec, Geometry, Texture};

fn scene_views() -> (Intrinsics, Vec<endodepth_core::synth::ViewRender>, RigidTransform) {
    let k = Intrinsics::new(90.0, 90.0, 31.5, 23.5, 64, 48).unwrap();
    let spec = two_view_spec(
        Geometry::Plane { depth: 100.0 },
        Texture::Sinusoid {
            base: 0.5,
            amp1: 0.22,
            freq1: 0.014,
            amp2: 0.12,
            freq2: 0.033,
        },
        k,
        [8.0, 2.0, 0.0],
        21,
    );
    let views = render(&spec).unwrap();
    let rel = views[1].pose.compose(&views[0].pose.inverse());
    (k, views, rel)
}

#[test]
fn plane_sweep_recovers_plane_depth() {
    let (k, views, rel) = scene_views();
    let tf = extract_features(&views[0].image, DescriptorKind::Patch3);
    let sf = extract_features(&views[1].image, DescriptorKind::Patch3);
    let state = DepthRangeState::new(50.0, 150.0, 0.99).unwrap();
    let cv = build_cost_volume(&tf, std::slice::from_ref(&sf), &[rel], &k, &state, 32).unwrap();
    let depth = soft_argmin_depth(&cv, 1e-3).unwrap();
    let (scaled, _) = median_scale(&depth, &views[0].depth).unwrap();
    let r = compute_metrics(&scaled, &views[0].depth, &MetricsConfig::default()).unwrap();
    assert!(r.abs_rel < 0.05, "abs_rel {}", r.abs_rel);
    assert!(r.delta > 95.0, "delta {}", r.delta);
}

#[test]
fn refinement_improves_on_biased_initialization() {
    let (k, views, rel) = scene_views();
    let feat = extract_features(&views[0].image, DescriptorKind::Grad);
    let kp = detect_keypoints(&views[0].image, 48, 4).unwrap();
    let decoder = SectorSoftArgmaxDecoder::new(0.05, 4.0).unwrap();
    let domains = build_support_domains(&feat, &kp, 8, &decoder).unwrap();
    let sources = vec![views[1].image.clone()];
    let poses = vec![rel];
    let scene = RefineScene {
        target: &views[0].image,
        sources: &sources,
        poses: &poses,
        intrinsics: &k,
        domains: &domains,
        teacher: None,
        self_reference: None,
        photometric: PhotometricConfig::default(),
    };
    let init = DepthMap::constant(64, 48, 120.0).unwrap();
    let cfg = RefineConfig {
        levels: 3,
        iterations_per_level: 80,
        step_size: 3e4,
        ..RefineConfig::default()
    };
    let weights = LossWeights::photometric_only();
    let (out, trace) = refine_depth(&init, &scene, &cfg, &weights).unwrap();
    let first = trace.first().unwrap().total;
    let last = trace.last().unwrap().total;
    assert!(last < first, "loss did not descend: {first} -> {last}");
    let err0 = (init.mean() - 100.0).abs();
    let err1 = (out.mean() - 100.0).abs();
    assert!(err1 < 0.5 * err0, "mean depth {} -> {}", init.mean(), out.mean());
}
