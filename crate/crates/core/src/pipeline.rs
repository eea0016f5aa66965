//! End-to-end localization of a bundle's query.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{filter_references, DataError, SceneBundle};
use crate::refine::{
    build_tracks, guided_match, initialize_tracks, pnp_refine, select_final, structure_only_ba,
    BaConfig, Correspondence2D3D, GuidedMatchParams, PnpParams, PnpResult, Track, ViewCamera,
};
use crate::scale::{
    choose_scale, collect_depth_samples, force_stage1, force_stage2, init_query_pose,
    rotation_align, select_confidence_anchor, stage1_scale, stage2_ransac_scale, ScaleError,
    ScaleEstimate, TrajectoryRansacParams,
};
use crate::geometry::RigidPose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    Auto,
    TriOnly,
    TrajOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k_max: usize,
    /// Meters.
    pub min_baseline: f64,
    /// Meters, closed interval.
    pub baseline_range: (f64, f64),
    pub stage1_threshold: f64,
    pub confidence_floor: f64,
    pub ransac_iterations: usize,
    /// Meters.
    pub inlier_radius: f64,
    /// Pixels.
    pub search_radius: f64,
    pub max_descriptor_distance: f64,
    pub scale_mode: ScaleMode,
    /// Pixels.
    pub pnp_inlier_px: f64,
    pub pnp_iterations: usize,
    pub ba: BaConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_max: 10,
            min_baseline: 0.3,
            baseline_range: (0.3, 10.0),
            stage1_threshold: 0.05,
            confidence_floor: 0.0,
            ransac_iterations: 500,
            inlier_radius: 0.10,
            search_radius: 20.0,
            max_descriptor_distance: 0.9,
            scale_mode: ScaleMode::Auto,
            pnp_inlier_px: 5.0,
            pnp_iterations: 1000,
            ba: BaConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no metric scale: {0}")]
    Scale(ScaleError),
}

/// Pose and every intermediate needed to explain it.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub pose: RigidPose,
    pub coarse_pose: RigidPose,
    /// Solver pose using tracks before bundle adjustment, when it succeeded.
    pub pre_ba_pose: Option<RigidPose>,
    pub scale: ScaleEstimate,
    pub references: Vec<usize>,
    pub confidence_anchor: usize,
    pub refinement_anchor: usize,
    pub tracks: Vec<Track>,
    pub tracks_dropped: usize,
    pub correspondences: Vec<Correspondence2D3D>,
    pub init_inliers: usize,
    pub refined_inliers: Option<usize>,
    pub final_result: PnpResult,
    pub fallback: bool,
}

/// Scale and alignment for the given references and confidence anchor.
pub fn estimate_scale(
    bundle: &SceneBundle,
    refs: &[usize],
    anchor: usize,
    config: &RunConfig,
) -> Result<ScaleEstimate, ScaleError> {
    let preds = &bundle.predictions;
    let local: Vec<Vector3<f64>> = refs.iter().map(|&r| preds.local_poses[r].center).collect();
    let gt: Vec<Vector3<f64>> = refs
        .iter()
        .map(|&r| bundle.gt_pose(r).map(|p| p.center).unwrap_or_default())
        .collect();
    let anchor_gt = bundle.gt_pose(anchor).ok_or(ScaleError::NoScaleAvailable)?;
    let r_align = rotation_align(&preds.local_poses[anchor].rotation, &anchor_gt.rotation);

    let s_tri = || {
        collect_depth_samples(bundle, refs, config.baseline_range, config.confidence_floor)
            .and_then(|s| stage1_scale(&s))
    };
    let params = TrajectoryRansacParams {
        iterations: config.ransac_iterations,
        inlier_radius: config.inlier_radius,
        seed: config.seed,
    };
    let stage2 = || stage2_ransac_scale(&local, &gt, &r_align, &params);

    match config.scale_mode {
        ScaleMode::Auto => choose_scale(
            s_tri().ok(),
            stage2,
            &local,
            &gt,
            &r_align,
            config.stage1_threshold,
        ),
        ScaleMode::TriOnly => s_tri()
            .map(|s| force_stage1(s, &local, &gt, &r_align))
            .map_err(|_| ScaleError::NoScaleAvailable),
        ScaleMode::TrajOnly => stage2()
            .map(|t| force_stage2(&t, &local, &gt, &r_align))
            .map_err(|_| ScaleError::NoScaleAvailable),
    }
}

fn solve(
    tracks: &[Track],
    init: &RigidPose,
    bundle: &SceneBundle,
    config: &RunConfig,
) -> (Vec<Correspondence2D3D>, Result<PnpResult, crate::refine::RefineError>) {
    let q = SceneBundle::QUERY;
    let params = GuidedMatchParams {
        radius: config.search_radius,
        max_descriptor_distance: config.max_descriptor_distance,
    };
    let corr = guided_match(tracks, init, &bundle.features[q], bundle.intrinsics(q), &params);
    let pnp = PnpParams {
        iterations: config.pnp_iterations,
        inlier_threshold: config.pnp_inlier_px,
        seed: config.seed,
        ..PnpParams::default()
    };
    let result = pnp_refine(&corr, init, bundle.intrinsics(q), &pnp);
    (corr, result)
}

/// Localizes the query (view 0) of a validated bundle.
pub fn localize(bundle: &SceneBundle, config: &RunConfig) -> Result<Localization, PipelineError> {
    let refs = filter_references(bundle, config.k_max, config.min_baseline)?;
    let conf_anchor = select_confidence_anchor(&bundle.predictions, &refs);
    let scale = estimate_scale(bundle, &refs, conf_anchor, config).map_err(PipelineError::Scale)?;

    let q = SceneBundle::QUERY;
    let preds = &bundle.predictions;
    let anchor_gt = bundle
        .gt_pose(conf_anchor)
        .ok_or(PipelineError::Scale(ScaleError::NoScaleAvailable))?;
    let coarse = init_query_pose(
        &scale,
        &preds.local_poses[conf_anchor],
        anchor_gt,
        &preds.local_poses[q],
    );

    let anchor = refs[0];
    let tracks = build_tracks(bundle, anchor, &refs[1..]);
    let (mut tracks, dropped) = initialize_tracks(tracks, bundle, anchor, scale.scale);

    let (_, pre_ba) = solve(&tracks, &coarse, bundle, config);
    let pre_ba_pose = pre_ba.ok().map(|r| r.pose);

    let cameras: BTreeMap<usize, ViewCamera> = refs
        .iter()
        .filter_map(|&r| {
            bundle.gt_pose(r).map(|p| {
                (
                    r,
                    ViewCamera {
                        pose: *p,
                        intrinsics: *bundle.intrinsics(r),
                    },
                )
            })
        })
        .collect();
    structure_only_ba(&mut tracks, &cameras, &config.ba);

    let (correspondences, refined) = solve(&tracks, &coarse, bundle, config);
    let refined_inliers = refined.as_ref().ok().map(|r| {
        crate::refine::count_inliers(&r.pose, bundle.intrinsics(q), &correspondences, config.pnp_inlier_px).0
    });
    let (init_inliers, _) =
        crate::refine::count_inliers(&coarse, bundle.intrinsics(q), &correspondences, config.pnp_inlier_px);
    let final_result = select_final(
        refined,
        &coarse,
        bundle.intrinsics(q),
        &correspondences,
        config.pnp_inlier_px,
    );

    Ok(Localization {
        pose: final_result.pose,
        coarse_pose: coarse,
        pre_ba_pose,
        scale,
        references: refs,
        confidence_anchor: conf_anchor,
        refinement_anchor: anchor,
        tracks,
        tracks_dropped: dropped,
        init_inliers,
        refined_inliers,
        fallback: !final_result.refined,
        final_result,
        correspondences,
    })
}
