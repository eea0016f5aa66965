//! Metric scale recovery and coarse query pose initialization.
//!
//! Two estimators are combined. The triangulation estimator compares depths
//! of points triangulated with ground-truth reference poses against the
//! predicted point maps. The trajectory estimator aligns predicted reference
//! camera centers to their ground-truth positions with a RANSAC over camera
//! pairs. Each estimate is judged by how well it reproduces the spread of
//! the ground-truth trajectory around its centroid.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{PredictionSet, SceneBundle};
use crate::geometry::{orthonormalize, triangulate_pair, RigidPose};
use crate::stats::median;

/// Local center distances below this are unusable for a scale candidate.
const MIN_LOCAL_DISTANCE: f64 = 1e-9;
/// Ground-truth trajectories with a smaller radius carry no scale information.
const MIN_GT_RADIUS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("no reference pair has a baseline inside the allowed range")]
    NoValidPairs,
    #[error("no usable depth ratio samples")]
    EmptySamples,
    #[error("ground-truth trajectory radius {0} m is degenerate")]
    DegenerateRadius(f64),
    #[error("need at least two cameras, got {0}")]
    TooFewCameras(usize),
    #[error("every sampled camera pair has coincident local centers")]
    AllCandidatesDegenerate,
    #[error("local and ground-truth center lists differ in length ({0} vs {1})")]
    MismatchedCenters(usize, usize),
    #[error("neither scale stage produced an estimate")]
    NoScaleAvailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleStage {
    /// Triangulated depth ratios.
    Stage1,
    /// Trajectory RANSAC.
    Stage2,
}

/// Recovered local-to-metric alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleEstimate {
    /// Metric = `scale` · local.
    pub scale: f64,
    pub r_align: Matrix3<f64>,
    pub d_tri: Option<f64>,
    pub d_traj: Option<f64>,
    pub stage_used: ScaleStage,
    /// Offset between the ground-truth centroid and the scaled, rotated
    /// local centroid, meters.
    pub translation_offset: nalgebra::Vector3<f64>,
    /// Inlier count of the trajectory RANSAC, when it ran.
    pub stage2_inliers: Option<usize>,
}

/// RMS spread of camera centers around their centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStats {
    pub radius: f64,
    pub centroid: Vector3<f64>,
}

impl TrajectoryStats {
    pub fn from_centers(centers: &[Vector3<f64>]) -> Self {
        if centers.is_empty() {
            return Self {
                radius: 0.0,
                centroid: Vector3::zeros(),
            };
        }
        let n = centers.len() as f64;
        let centroid = centers.iter().sum::<Vector3<f64>>() / n;
        let mean_sq = centers
            .iter()
            .map(|c| (c - centroid).norm_squared())
            .sum::<f64>()
            / n;
        Self {
            radius: mean_sq.sqrt(),
            centroid,
        }
    }
}

/// One triangulated depth paired with the predicted depth at the same pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRatioSample {
    pub gt_depth: f64,
    pub local_depth: f64,
    pub view_index: usize,
    pub pixel: Vector2<f64>,
}

impl DepthRatioSample {
    pub fn ratio(&self) -> f64 {
        self.gt_depth / self.local_depth
    }
}

/// Reference with the largest total confidence; ties go to the first listed.
pub fn select_confidence_anchor(predictions: &PredictionSet, references: &[usize]) -> usize {
    let mut best = references[0];
    let mut best_total = predictions.confidence_maps[best].total();
    for &r in &references[1..] {
        let total = predictions.confidence_maps[r].total();
        if total > best_total {
            best = r;
            best_total = total;
        }
    }
    best
}

/// All unordered pairs `(i, j)`, `i < j`, of `poses` whose center distance
/// lies in the closed interval `range`.
pub fn sample_baseline_pairs(
    poses: &[RigidPose],
    range: (f64, f64),
) -> Result<Vec<(usize, usize)>, ScaleError> {
    let mut pairs = Vec::new();
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            let d = (poses[i].center - poses[j].center).norm();
            if d >= range.0 && d <= range.1 {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(ScaleError::NoValidPairs);
    }
    Ok(pairs)
}

/// Triangulates every match of every baseline-valid reference pair with
/// ground-truth poses and pairs each point's depth in the first camera with
/// the predicted depth at the keypoint.
pub fn collect_depth_samples(
    bundle: &SceneBundle,
    references: &[usize],
    baseline_range: (f64, f64),
    confidence_floor: f64,
) -> Result<Vec<DepthRatioSample>, ScaleError> {
    let poses: Vec<RigidPose> = references
        .iter()
        .filter_map(|&r| bundle.gt_pose(r).copied())
        .collect();
    if poses.len() != references.len() {
        return Err(ScaleError::NoValidPairs);
    }
    let pairs = sample_baseline_pairs(&poses, baseline_range)?;

    let mut samples = Vec::new();
    for (a, b) in pairs {
        let (vi, vj) = (references[a], references[b]);
        let (pi, pj) = (&poses[a], &poses[b]);
        let (ki, kj) = (bundle.intrinsics(vi), bundle.intrinsics(vj));
        let (fi, fj) = (&bundle.features[vi], &bundle.features[vj]);
        let point_map = &bundle.predictions.point_maps[vi];
        let confidence = &bundle.predictions.confidence_maps[vi];
        for m in bundle.matches_between(vi, vj) {
            let ui = fi.keypoints[m.index_a];
            let uj = fj.keypoints[m.index_b];
            let Ok(x) = triangulate_pair(&ui, &uj, pi, pj, ki, kj) else {
                continue;
            };
            let gt_depth = pi.world_to_camera(&x)[2];
            let Some(local_depth) = point_map.sample_depth(&ui) else {
                continue;
            };
            match confidence.sample(&ui) {
                Some(c) if c >= confidence_floor => {}
                _ => continue,
            }
            if gt_depth > 0.0 && local_depth > 0.0 {
                samples.push(DepthRatioSample {
                    gt_depth,
                    local_depth,
                    view_index: vi,
                    pixel: ui,
                });
            }
        }
    }
    Ok(samples)
}

/// Median ratio of ground-truth to predicted depth.
pub fn stage1_scale(samples: &[DepthRatioSample]) -> Result<f64, ScaleError> {
    let mut ratios: Vec<f64> = samples.iter().map(DepthRatioSample::ratio).collect();
    median(&mut ratios).ok_or(ScaleError::EmptySamples)
}

/// Relative deviation between the scaled local trajectory radius and the
/// ground-truth radius.
pub fn trajectory_deviation(
    scale: f64,
    local_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
) -> Result<(TrajectoryStats, TrajectoryStats, f64), ScaleError> {
    if local_centers.len() != gt_centers.len() {
        return Err(ScaleError::MismatchedCenters(
            local_centers.len(),
            gt_centers.len(),
        ));
    }
    if local_centers.len() < 2 {
        return Err(ScaleError::TooFewCameras(local_centers.len()));
    }
    let local = TrajectoryStats::from_centers(local_centers);
    let gt = TrajectoryStats::from_centers(gt_centers);
    if gt.radius < MIN_GT_RADIUS {
        return Err(ScaleError::DegenerateRadius(gt.radius));
    }
    let d = (scale * local.radius / gt.radius - 1.0).abs();
    Ok((local, gt, d))
}

/// Rotation taking the local frame's orientation to the world's, from one
/// camera seen in both.
pub fn rotation_align(local_rot_anchor: &Matrix3<f64>, gt_rot_anchor: &Matrix3<f64>) -> Matrix3<f64> {
    let r = gt_rot_anchor * local_rot_anchor.transpose();
    orthonormalize(&r).unwrap_or(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRansacParams {
    pub iterations: usize,
    /// Position error, meters, under which a camera counts as an inlier.
    pub inlier_radius: f64,
    pub seed: u64,
}

impl Default for TrajectoryRansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_radius: 0.10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryScale {
    pub scale: f64,
    pub translation_offset: Vector3<f64>,
    pub inlier_count: usize,
    pub mean_inlier_error: f64,
    pub inliers: Vec<bool>,
}

struct Candidate {
    scale: f64,
    offset: Vector3<f64>,
    inliers: Vec<bool>,
    count: usize,
    mean_error: f64,
}

/// Offset that moves the centroid of the scaled local centers in `members`
/// onto the centroid of their ground-truth counterparts.
fn centroid_offset_over(
    scale: f64,
    rotated_local: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    members: &[usize],
) -> Vector3<f64> {
    let n = members.len() as f64;
    let local: Vector3<f64> = members.iter().map(|&i| rotated_local[i]).sum();
    let target: Vector3<f64> = members.iter().map(|&i| gt[i]).sum();
    (target - local * scale) / n
}

fn score_candidate(
    scale: f64,
    offset: Vector3<f64>,
    rotated_local: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    inlier_radius: f64,
) -> Candidate {
    let mut inliers = Vec::with_capacity(gt.len());
    let mut count = 0;
    let mut err_sum = 0.0;
    for (l, g) in rotated_local.iter().zip(gt) {
        let err = (l * scale + offset - g).norm();
        let ok = err <= inlier_radius;
        if ok {
            count += 1;
            err_sum += err;
        }
        inliers.push(ok);
    }
    Candidate {
        scale,
        offset,
        inliers,
        count,
        mean_error: if count > 0 {
            err_sum / count as f64
        } else {
            f64::INFINITY
        },
    }
}

/// Scale from a RANSAC over camera pairs after rotating the local
/// trajectory into world orientation.
///
/// Each iteration draws one pair of distinct cameras, takes the ratio of
/// their ground-truth to local distance as the candidate scale, translates
/// the scaled trajectory so the pair's centroids coincide and counts cameras
/// within `inlier_radius`. The candidate with most inliers wins, ties going
/// to the smaller mean inlier error. The winning translation is then refit
/// on the centroid of its inliers.
pub fn stage2_ransac_scale(
    local_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
    r_align: &Matrix3<f64>,
    params: &TrajectoryRansacParams,
) -> Result<TrajectoryScale, ScaleError> {
    if local_centers.len() != gt_centers.len() {
        return Err(ScaleError::MismatchedCenters(
            local_centers.len(),
            gt_centers.len(),
        ));
    }
    let n = local_centers.len();
    if n < 2 {
        return Err(ScaleError::TooFewCameras(n));
    }
    let rotated: Vec<Vector3<f64>> = local_centers.iter().map(|c| r_align * c).collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let local = (local_centers[i] - local_centers[j]).norm();
            if local >= MIN_LOCAL_DISTANCE {
                pairs.push((i, j, local));
            }
        }
    }
    if pairs.is_empty() {
        return Err(ScaleError::AllCandidatesDegenerate);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<Candidate> = None;
    for _ in 0..params.iterations {
        let (i, j, local) = pairs[rng.random_range(0..pairs.len())];
        let scale = (gt_centers[i] - gt_centers[j]).norm() / local;
        if !(scale > 0.0) || !scale.is_finite() {
            continue;
        }
        let offset = centroid_offset_over(scale, &rotated, gt_centers, &[i, j]);
        let cand = score_candidate(scale, offset, &rotated, gt_centers, params.inlier_radius);
        let better = match &best {
            None => true,
            Some(b) => {
                cand.count > b.count || (cand.count == b.count && cand.mean_error < b.mean_error)
            }
        };
        if better {
            best = Some(cand);
        }
    }
    let mut best = best.ok_or(ScaleError::AllCandidatesDegenerate)?;
    let members: Vec<usize> = (0..n).filter(|&i| best.inliers[i]).collect();
    if !members.is_empty() {
        let offset = centroid_offset_over(best.scale, &rotated, gt_centers, &members);
        let refit = score_candidate(best.scale, offset, &rotated, gt_centers, params.inlier_radius);
        if refit.count >= best.count {
            best = refit;
        }
    }
    Ok(TrajectoryScale {
        scale: best.scale,
        translation_offset: best.offset,
        inlier_count: best.count,
        mean_inlier_error: best.mean_error,
        inliers: best.inliers,
    })
}

fn centroid_offset(
    scale: f64,
    r_align: &Matrix3<f64>,
    local_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
) -> Vector3<f64> {
    let local = TrajectoryStats::from_centers(local_centers).centroid;
    let gt = TrajectoryStats::from_centers(gt_centers).centroid;
    gt - scale * (r_align * local)
}

/// Picks between the two scale stages.
///
/// A triangulation scale whose deviation is at most `threshold` is adopted
/// immediately and `stage2` is never called. Otherwise the trajectory stage
/// runs and the scale with the smaller deviation is kept, ties going to the
/// triangulation scale.
pub fn choose_scale<F>(
    s_tri: Option<f64>,
    stage2: F,
    local_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
    r_align: &Matrix3<f64>,
    threshold: f64,
) -> Result<ScaleEstimate, ScaleError>
where
    F: FnOnce() -> Result<TrajectoryScale, ScaleError>,
{
    let d_tri = s_tri.and_then(|s| {
        trajectory_deviation(s, local_centers, gt_centers)
            .ok()
            .map(|(_, _, d)| d)
    });
    let stage1 = |d_traj: Option<f64>, inliers: Option<usize>, s: f64| ScaleEstimate {
        scale: s,
        r_align: *r_align,
        d_tri,
        d_traj,
        stage_used: ScaleStage::Stage1,
        translation_offset: centroid_offset(s, r_align, local_centers, gt_centers),
        stage2_inliers: inliers,
    };

    if let (Some(s), Some(d)) = (s_tri, d_tri) {
        if d <= threshold {
            return Ok(stage1(None, None, s));
        }
    }

    let traj = stage2().ok();
    let d_traj = traj.as_ref().and_then(|t| {
        trajectory_deviation(t.scale, local_centers, gt_centers)
            .ok()
            .map(|(_, _, d)| d)
    });
    let inliers = traj.as_ref().map(|t| t.inlier_count);

    match (s_tri, traj) {
        (None, None) => Err(ScaleError::NoScaleAvailable),
        (Some(s), None) => Ok(stage1(None, None, s)),
        (Some(s), Some(t)) => {
            let use_traj = match (d_tri, d_traj) {
                (Some(a), Some(b)) => b < a,
                (None, Some(_)) => true,
                _ => false,
            };
            if use_traj {
                Ok(ScaleEstimate {
                    scale: t.scale,
                    r_align: *r_align,
                    d_tri,
                    d_traj,
                    stage_used: ScaleStage::Stage2,
                    translation_offset: t.translation_offset,
                    stage2_inliers: inliers,
                })
            } else {
                Ok(stage1(d_traj, inliers, s))
            }
        }
        (None, Some(t)) => Ok(ScaleEstimate {
            scale: t.scale,
            r_align: *r_align,
            d_tri: None,
            d_traj,
            stage_used: ScaleStage::Stage2,
            translation_offset: t.translation_offset,
            stage2_inliers: inliers,
        }),
    }
}

/// Estimate that uses the triangulation scale unconditionally.
pub fn force_stage1(
    s_tri: f64,
    local_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
    r_align: &Matrix3<f64>,
) -> ScaleEstimate {
    ScaleEstimate {
        scale: s_tri,
        r_align: *r_align,
        d_tri: trajectory_deviation(s_tri, local_centers, gt_centers)
            .ok()
            .map(|(_, _, d)| d),
        d_traj: None,
        stage_used: ScaleStage::Stage1,
        translation_offset: centroid_offset(s_tri, r_align, local_centers, gt_centers),
        stage2_inliers: None,
    }
}

/// Estimate that uses the trajectory scale unconditionally.
pub fn force_stage2(
    traj: &TrajectoryScale,
    local_centers: &[Vector3<f64>],
    gt_centers: &[Vector3<f64>],
    r_align: &Matrix3<f64>,
) -> ScaleEstimate {
    ScaleEstimate {
        scale: traj.scale,
        r_align: *r_align,
        d_tri: None,
        d_traj: trajectory_deviation(traj.scale, local_centers, gt_centers)
            .ok()
            .map(|(_, _, d)| d),
        stage_used: ScaleStage::Stage2,
        translation_offset: traj.translation_offset,
        stage2_inliers: Some(traj.inlier_count),
    }
}

/// Coarse metric query pose: the query's offset from the anchor in the local
/// frame is scaled, rotated into world orientation and attached to the
/// anchor's ground-truth position.
pub fn init_query_pose(
    estimate: &ScaleEstimate,
    anchor_local: &RigidPose,
    anchor_gt: &RigidPose,
    query_local: &RigidPose,
) -> RigidPose {
    let rotation = estimate.r_align * query_local.rotation;
    let center = anchor_gt.center
        + estimate.r_align * (estimate.scale * (query_local.center - anchor_local.center));
    RigidPose {
        rotation: orthonormalize(&rotation).unwrap_or(rotation),
        center,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ConfidenceMap;
    use crate::geometry::{exp_so3, rotation_angle, SimilarityTransform};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let v = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        exp_so3(&v)
    }

    fn sample(ratio: f64) -> DepthRatioSample {
        DepthRatioSample {
            gt_depth: ratio,
            local_depth: 1.0,
            view_index: 1,
            pixel: Vector2::zeros(),
        }
    }

    fn predictions_with_totals(totals: &[f64]) -> PredictionSet {
        let maps = totals
            .iter()
            .map(|&t| ConfidenceMap::new(2, 2, vec![t / 4.0; 4]))
            .collect();
        PredictionSet {
            point_maps: vec![],
            confidence_maps: maps,
            local_poses: vec![],
        }
    }

    #[test]
    fn anchor_is_confidence_argmax() {
        let p = predictions_with_totals(&[9.0, 1.0, 3.0, 2.0]);
        assert_eq!(select_confidence_anchor(&p, &[1, 2, 3]), 2);
        let p = predictions_with_totals(&[9.0, 2.0, 2.0, 2.0]);
        assert_eq!(select_confidence_anchor(&p, &[1, 2, 3]), 1);
        assert_eq!(select_confidence_anchor(&p, &[3]), 3);
    }

    fn poses_at(xs: &[f64]) -> Vec<RigidPose> {
        xs.iter()
            .map(|&x| RigidPose::new(Matrix3::identity(), Vector3::new(x, 0.0, 0.0)))
            .collect()
    }

    #[test]
    fn baseline_pairs_respect_range() {
        let range = (0.3, 10.0);
        assert_eq!(
            sample_baseline_pairs(&poses_at(&[0.0, 0.5, 20.0]), range).unwrap(),
            vec![(0, 1)]
        );
        assert_eq!(
            sample_baseline_pairs(&poses_at(&[0.0, 1.0, 2.0]), range).unwrap(),
            vec![(0, 1), (0, 2), (1, 2)]
        );
        assert_eq!(
            sample_baseline_pairs(&poses_at(&[0.0, 0.05, 0.1]), range),
            Err(ScaleError::NoValidPairs)
        );
        // Closed interval at both ends.
        assert_eq!(
            sample_baseline_pairs(&poses_at(&[0.0, 0.3, 10.3]), range).unwrap(),
            vec![(0, 1), (1, 2)]
        );
    }

    #[test]
    fn stage1_median_examples() {
        let s: Vec<_> = [2.0, 2.0, 2.0].iter().map(|&r| sample(r)).collect();
        assert_eq!(stage1_scale(&s).unwrap(), 2.0);
        let s: Vec<_> = [1.9, 2.0, 2.1, 100.0].iter().map(|&r| sample(r)).collect();
        assert!((stage1_scale(&s).unwrap() - 2.05).abs() < 1e-12);
        assert_eq!(stage1_scale(&[]), Err(ScaleError::EmptySamples));
    }

    #[test]
    fn trajectory_deviation_examples() {
        let gt = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)];
        let local = [Vector3::new(0.5, 0.0, 0.0), Vector3::new(-0.5, 0.0, 0.0)];
        let (l, g, d) = trajectory_deviation(2.0, &local, &gt).unwrap();
        assert_eq!((l.radius, g.radius, d), (0.5, 1.0, 0.0));
        let (_, _, d) = trajectory_deviation(1.0, &local, &gt).unwrap();
        assert_eq!(d, 0.5);
        let same = [Vector3::new(1.0, 2.0, 3.0); 3];
        assert!(matches!(
            trajectory_deviation(1.0, &local[..1], &gt[..1]),
            Err(ScaleError::TooFewCameras(1))
        ));
        assert!(matches!(
            trajectory_deviation(1.0, &same, &same),
            Err(ScaleError::DegenerateRadius(_))
        ));
    }

    /// Direct evaluation of the radius/deviation formula, written
    /// independently of `TrajectoryStats`.
    fn brute_force_deviation(scale: f64, local: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
        let radius = |pts: &[Vector3<f64>]| {
            let k = pts.len() as f64;
            let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
            for p in pts {
                cx += p.x;
                cy += p.y;
                cz += p.z;
            }
            let (cx, cy, cz) = (cx / k, cy / k, cz / k);
            let mut acc = 0.0;
            for p in pts {
                acc += (p.x - cx).powi(2) + (p.y - cy).powi(2) + (p.z - cz).powi(2);
            }
            (acc / k).sqrt()
        };
        (scale * radius(local) / radius(gt) - 1.0).abs()
    }

    #[test]
    fn trajectory_deviation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(2..15);
            let mut pts = || -> Vec<Vector3<f64>> {
                (0..n)
                    .map(|_| {
                        Vector3::new(
                            rng.random_range(-20.0..20.0),
                            rng.random_range(-20.0..20.0),
                            rng.random_range(-20.0..20.0),
                        )
                    })
                    .collect()
            };
            let local = pts();
            let gt = pts();
            let scale = 0.1 + 10.0 * (n as f64).sqrt().fract();
            let (_, _, d) = trajectory_deviation(scale, &local, &gt).unwrap();
            let oracle = brute_force_deviation(scale, &local, &gt);
            assert!((d - oracle).abs() <= 1e-12 * oracle.max(1.0), "{d} vs {oracle}");
        }
    }

    #[test]
    fn rotation_align_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng);
        let i = Matrix3::identity();
        assert!(rotation_angle(&rotation_align(&i, &r), &r) < 1e-9);
        assert!(rotation_angle(&rotation_align(&r, &r), &i) < 1e-9);
        for _ in 0..100 {
            let local = random_rotation(&mut rng);
            let gt = random_rotation(&mut rng);
            let align = rotation_align(&local, &gt);
            assert!((align * local - gt).abs().max() < 1e-9);
        }
    }

    /// Ground-truth ring of cameras and its local image under a similarity.
    fn trajectory(
        rng: &mut impl Rng,
        n: usize,
        sim: &SimilarityTransform,
    ) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let gt: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                Vector3::new(
                    4.0 * a.cos() + rng.random_range(-0.3..0.3),
                    4.0 * a.sin() + rng.random_range(-0.3..0.3),
                    2.0 + rng.random_range(-0.3..0.3),
                )
            })
            .collect();
        let local = gt.iter().map(|g| sim.apply_inverse(g)).collect();
        (local, gt)
    }

    fn random_similarity(rng: &mut impl Rng, scale: f64) -> SimilarityTransform {
        SimilarityTransform {
            scale,
            rotation: random_rotation(rng),
            translation: Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
        }
    }

    #[test]
    fn ransac_recovers_noiseless_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = random_similarity(&mut rng, 3.0);
        let (local, gt) = trajectory(&mut rng, 8, &sim);
        let out = stage2_ransac_scale(&local, &gt, &sim.rotation, &Default::default()).unwrap();
        assert!((out.scale - 3.0).abs() < 1e-9);
        assert_eq!(out.inlier_count, 8);
        assert!((out.translation_offset - sim.translation).norm() < 1e-9);
    }

    #[test]
    fn ransac_tolerates_corrupted_centers() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let true_scale = 0.5 + 4.0 * rng.random::<f64>();
            let sim = random_similarity(&mut rng, true_scale);
            let (mut local, gt) = trajectory(&mut rng, 10, &sim);
            for c in local.iter_mut().take(3) {
                let dir: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                *c += dir.normalize() * (1.0 / sim.scale);
            }
            let params = TrajectoryRansacParams {
                seed,
                ..Default::default()
            };
            let out = stage2_ransac_scale(&local, &gt, &sim.rotation, &params).unwrap();
            assert!(
                (out.scale / sim.scale - 1.0).abs() < 0.01,
                "seed {seed}: {} vs {}",
                out.scale,
                sim.scale
            );
        }
    }

    #[test]
    fn ransac_error_paths() {
        let one = [Vector3::zeros()];
        assert_eq!(
            stage2_ransac_scale(&one, &one, &Matrix3::identity(), &Default::default()),
            Err(ScaleError::TooFewCameras(1))
        );
        let same = [Vector3::zeros(); 3];
        let gt = [Vector3::zeros(), Vector3::x(), Vector3::y()];
        assert_eq!(
            stage2_ransac_scale(&same, &gt, &Matrix3::identity(), &Default::default()),
            Err(ScaleError::AllCandidatesDegenerate)
        );
    }

    #[test]
    fn ransac_is_reproducible_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sim = random_similarity(&mut rng, 1.7);
        let (mut local, gt) = trajectory(&mut rng, 10, &sim);
        for c in local.iter_mut() {
            *c += Vector3::from_fn(|_, _| 0.05 * rng.random::<f64>());
        }
        let params = TrajectoryRansacParams {
            seed: 42,
            ..Default::default()
        };
        let a = stage2_ransac_scale(&local, &gt, &sim.rotation, &params).unwrap();
        let b = stage2_ransac_scale(&local, &gt, &sim.rotation, &params).unwrap();
        assert_eq!(a.scale.to_bits(), b.scale.to_bits());
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.translation_offset, b.translation_offset);
    }

    #[test]
    fn ransac_inliers_invariant_under_global_rotation() {
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
            let sim = random_similarity(&mut rng, 2.0);
            let (mut local, gt) = trajectory(&mut rng, 9, &sim);
            for c in local.iter_mut() {
                *c += Vector3::from_fn(|_, _| 0.04 * (rng.random::<f64>() - 0.5));
            }
            let local_anchor_rot = random_rotation(&mut rng);
            let gt_anchor_rot = sim.rotation * local_anchor_rot;
            let params = TrajectoryRansacParams {
                seed: trial,
                ..Default::default()
            };
            let base = stage2_ransac_scale(
                &local,
                &gt,
                &rotation_align(&local_anchor_rot, &gt_anchor_rot),
                &params,
            )
            .unwrap();

            let g = random_rotation(&mut rng);
            let rotated: Vec<_> = local.iter().map(|c| g * c).collect();
            let align = rotation_align(&(g * local_anchor_rot), &gt_anchor_rot);
            let moved = stage2_ransac_scale(&rotated, &gt, &align, &params).unwrap();
            assert_eq!(base.inlier_count, moved.inlier_count, "trial {trial}");
        }
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sim = random_similarity(&mut rng, 2.5);
        let (local, gt) = trajectory(&mut rng, 7, &sim);
        let params = TrajectoryRansacParams {
            seed: 9,
            ..Default::default()
        };
        let base = stage2_ransac_scale(&local, &gt, &sim.rotation, &params).unwrap();
        let samples: Vec<_> = (0..25)
            .map(|i| DepthRatioSample {
                gt_depth: 2.0 + i as f64 * 0.1,
                local_depth: (2.0 + i as f64 * 0.1) / 2.5 * (1.0 + 0.01 * (i as f64).sin()),
                view_index: 1,
                pixel: Vector2::zeros(),
            })
            .collect();
        let s1 = stage1_scale(&samples).unwrap();
        for lambda in [0.01, 0.37, 1.0, 4.2, 250.0] {
            let scaled: Vec<_> = local.iter().map(|c| c * lambda).collect();
            let out = stage2_ransac_scale(&scaled, &gt, &sim.rotation, &params).unwrap();
            assert!((out.scale * lambda / base.scale - 1.0).abs() < 1e-9);
            let scaled_samples: Vec<_> = samples
                .iter()
                .map(|s| DepthRatioSample {
                    local_depth: s.local_depth * lambda,
                    ..*s
                })
                .collect();
            let s = stage1_scale(&scaled_samples).unwrap();
            assert!((s * lambda / s1 - 1.0).abs() < 1e-9);
        }
    }

    fn ring(scale: f64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let gt: Vec<_> = (0..4)
            .map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_2;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let local = gt.iter().map(|g| g / scale).collect();
        (local, gt)
    }

    fn traj(scale: f64) -> TrajectoryScale {
        TrajectoryScale {
            scale,
            translation_offset: Vector3::zeros(),
            inlier_count: 4,
            mean_inlier_error: 0.0,
            inliers: vec![true; 4],
        }
    }

    #[test]
    fn selector_skips_stage2_below_threshold() {
        let (local, gt) = ring(2.0);
        let est = choose_scale(
            Some(2.0 * 1.02),
            || panic!("stage 2 must not run"),
            &local,
            &gt,
            &Matrix3::identity(),
            0.05,
        )
        .unwrap();
        assert_eq!(est.stage_used, ScaleStage::Stage1);
        assert!((est.d_tri.unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(est.d_traj, None);
    }

    #[test]
    fn selector_prefers_smaller_deviation() {
        let (local, gt) = ring(2.0);
        let id = Matrix3::identity();
        let est = choose_scale(Some(2.4), || Ok(traj(2.1)), &local, &gt, &id, 0.05).unwrap();
        assert_eq!(est.stage_used, ScaleStage::Stage2);
        assert_eq!(est.scale, 2.1);
        let est = choose_scale(Some(2.4), || Ok(traj(2.6)), &local, &gt, &id, 0.05).unwrap();
        assert_eq!(est.stage_used, ScaleStage::Stage1);
        assert_eq!(est.scale, 2.4);
        assert_eq!(est.stage2_inliers, Some(4));
        // Equal deviations keep the triangulation scale.
        let est = choose_scale(Some(2.4), || Ok(traj(2.4)), &local, &gt, &id, 0.05).unwrap();
        assert_eq!(est.stage_used, ScaleStage::Stage1);
    }

    #[test]
    fn selector_falls_back_between_stages() {
        let (local, gt) = ring(2.0);
        let id = Matrix3::identity();
        let est = choose_scale(None, || Ok(traj(2.0)), &local, &gt, &id, 0.05).unwrap();
        assert_eq!(est.stage_used, ScaleStage::Stage2);
        let est = choose_scale(
            Some(3.0),
            || Err(ScaleError::AllCandidatesDegenerate),
            &local,
            &gt,
            &id,
            0.05,
        )
        .unwrap();
        assert_eq!(est.stage_used, ScaleStage::Stage1);
        let err = choose_scale(
            None,
            || Err(ScaleError::TooFewCameras(1)),
            &local,
            &gt,
            &id,
            0.05,
        )
        .unwrap_err();
        assert_eq!(err, ScaleError::NoScaleAvailable);
    }

    proptest! {
        #[test]
        fn selector_returns_minimum_deviation(s_tri in 0.5f64..4.0, s_traj in 0.5f64..4.0) {
            let (local, gt) = ring(2.0);
            let est = choose_scale(
                Some(s_tri), || Ok(traj(s_traj)), &local, &gt, &Matrix3::identity(), 0.05,
            ).unwrap();
            let d_tri = (s_tri / 2.0 - 1.0).abs();
            let d_traj = (s_traj / 2.0 - 1.0).abs();
            let chosen = match est.stage_used {
                ScaleStage::Stage1 => est.d_tri.unwrap(),
                ScaleStage::Stage2 => est.d_traj.unwrap(),
            };
            let available = if d_tri <= 0.05 { d_tri } else { d_tri.min(d_traj) };
            prop_assert!(chosen <= available + 1e-12);
        }
    }

    #[test]
    fn init_pose_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = ScaleEstimate {
            scale: 1.0,
            r_align: Matrix3::identity(),
            d_tri: None,
            d_traj: None,
            stage_used: ScaleStage::Stage1,
            translation_offset: Vector3::zeros(),
            stage2_inliers: None,
        };
        let anchor = RigidPose::new(random_rotation(&mut rng), Vector3::new(1.0, 2.0, 3.0));
        let query = RigidPose::new(random_rotation(&mut rng), Vector3::new(-1.0, 0.5, 2.0));
        let init = init_query_pose(&est, &anchor, &anchor, &query);
        assert!((init.center - query.center).norm() < 1e-12);
        assert!(rotation_angle(&init.rotation, &query.rotation) < 1e-9);

        // Local frame is the ground-truth frame shifted by (0, 0, 10).
        let shift = Vector3::new(0.0, 0.0, 10.0);
        let anchor_local = RigidPose::new(anchor.rotation, anchor.center + shift);
        let query_local = RigidPose::new(query.rotation, query.center + shift);
        let init = init_query_pose(&est, &anchor_local, &anchor, &query_local);
        assert!((init.center - query.center).norm() < 1e-12);
    }

    #[test]
    fn init_pose_inverts_a_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let true_scale = rng.random_range(0.1..10.0);
            let sim = random_similarity(&mut rng, true_scale);
            let anchor_gt = RigidPose::new(
                random_rotation(&mut rng),
                Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            );
            let query_gt = RigidPose::new(
                random_rotation(&mut rng),
                Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            );
            let est = ScaleEstimate {
                scale: sim.scale,
                r_align: sim.rotation,
                d_tri: None,
                d_traj: None,
                stage_used: ScaleStage::Stage1,
                translation_offset: sim.translation,
                stage2_inliers: None,
            };
            let init = init_query_pose(
                &est,
                &sim.apply_inverse_pose(&anchor_gt),
                &anchor_gt,
                &sim.apply_inverse_pose(&query_gt),
            );
            assert!((init.center - query_gt.center).norm() < 1e-9);
            assert!(rotation_angle(&init.rotation, &query_gt.rotation) < 1e-7);
        }
    }
}
