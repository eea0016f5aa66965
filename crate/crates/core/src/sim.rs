//! Synthetic scenes with exact ground truth.
//!
//! The surface is the upper envelope of a set of planes, viewed from above,
//! so every surface point in front of a camera and inside its image is
//! visible. Predictions are the metric camera-frame geometry expressed in a
//! local frame related to the world by a known similarity, plus noise.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    ConfidenceMap, FeatureSet, MatchSet, PointMap, PredictionSet, SceneBundle, ViewRecord,
};
use crate::geometry::{orthonormalize, project, Intrinsics, RigidPose};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid corruption spec: {0}")]
    InvalidCorruption(String),
    #[error("view {view} sees only {count} points")]
    InvisibleScene { view: usize, count: usize },
    #[error("could not write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: [f64; 3],
    /// Must point up (positive z).
    pub normal: [f64; 3],
}

impl Plane {
    fn p(&self) -> Vector3<f64> {
        Vector3::from(self.point)
    }

    fn n(&self) -> Vector3<f64> {
        Vector3::from(self.normal).normalize()
    }

    /// Height of the plane above `(x, y)`.
    fn height(&self, x: f64, y: f64) -> f64 {
        let (p, n) = (self.p(), self.n());
        p[2] - (n[0] * (x - p[0]) + n[1] * (y - p[1])) / n[2]
    }

    fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.n().dot(&(x - self.p()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_references: usize,
    pub num_world_points: usize,
    /// Side of the square in which world points are sampled, meters.
    pub scene_extent: f64,
    pub camera_ring_radius: f64,
    pub camera_height: f64,
    /// Random displacement of each camera's look-at target, meters.
    pub target_jitter: f64,
    pub intrinsics: Intrinsics,
    pub planes: Vec<Plane>,
    pub descriptor_dim: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let mut planes = vec![Plane {
            point: [0.0, 0.0, 0.0],
            normal: [0.0, 0.0, 1.0],
        }];
        for (i, slope) in [0.35, 0.45, 0.4].into_iter().enumerate() {
            let a = i as f64 * std::f64::consts::TAU / 3.0 + 0.3;
            let d = Vector3::new(a.cos(), a.sin(), 0.0);
            let n = (Vector3::z() - d * slope).normalize();
            planes.push(Plane {
                point: (d * 1.2).into(),
                normal: n.into(),
            });
        }
        Self {
            num_references: 10,
            num_world_points: 400,
            scene_extent: 5.0,
            camera_ring_radius: 4.0,
            camera_height: 2.5,
            target_jitter: 0.3,
            intrinsics: Intrinsics::new(320.0, 320.0, 160.0, 120.0, 320, 240),
            planes,
            descriptor_dim: 32,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if self.num_references < 1 {
            return bad("num_references must be at least 1");
        }
        if self.num_world_points < 1 {
            return bad("num_world_points must be at least 1");
        }
        if !(self.scene_extent > 0.0) {
            return bad("scene_extent must be positive");
        }
        if !(self.camera_ring_radius > 0.0) || !self.camera_height.is_finite() {
            return bad("camera ring must have a positive radius");
        }
        if !(self.target_jitter >= 0.0) {
            return bad("target_jitter must be nonnegative");
        }
        if self.descriptor_dim < 1 {
            return bad("descriptor_dim must be at least 1");
        }
        self.intrinsics
            .validate()
            .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        if self.planes.is_empty() {
            return bad("at least one plane is required");
        }
        for p in &self.planes {
            let n = Vector3::from(p.normal);
            if !(n.norm() > 0.0) || !(n[2] / n.norm() > 1e-3) {
                return bad("plane normals must point upwards");
            }
        }
        Ok(())
    }

    fn surface_height(&self, x: f64, y: f64) -> f64 {
        self.planes
            .iter()
            .map(|p| p.height(x, y))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Metric = `sim_scale` · local.
    pub sim_scale: f64,
    /// Row-major; local orientations are `sim_rotationᵀ` times metric ones.
    pub sim_rotation: [[f64; 3]; 3],
    pub sim_translation: [f64; 3],
    /// Local units.
    pub pointmap_noise_sigma: f64,
    /// Local units.
    pub pose_center_noise_sigma: f64,
    /// Pixels.
    pub keypoint_noise_sigma: f64,
    pub descriptor_noise_sigma: f64,
    pub outlier_fraction_centers: f64,
    /// Metric displacement of an outlier center, meters.
    pub center_outlier_magnitude: f64,
    /// Confidence multiplier for views with an outlier center.
    pub outlier_confidence: f64,
    pub outlier_fraction_matches: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            sim_scale: 1.0,
            sim_rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            sim_translation: [0.0; 3],
            pointmap_noise_sigma: 0.0,
            pose_center_noise_sigma: 0.0,
            keypoint_noise_sigma: 0.0,
            descriptor_noise_sigma: 0.0,
            outlier_fraction_centers: 0.0,
            center_outlier_magnitude: 1.0,
            outlier_confidence: 0.5,
            outlier_fraction_matches: 0.0,
        }
    }
}

impl CorruptionSpec {
    pub fn rotation(&self) -> Matrix3<f64> {
        let r = self.sim_rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn with_rotation(mut self, r: &Matrix3<f64>) -> Self {
        for i in 0..3 {
            for j in 0..3 {
                self.sim_rotation[i][j] = r[(i, j)];
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidCorruption(m.to_string()));
        if !(self.sim_scale > 0.0) || !self.sim_scale.is_finite() {
            return bad("sim_scale must be positive");
        }
        let r = self.rotation();
        if !crate::geometry::is_rotation(&r, 1e-6) {
            return bad("sim_rotation must be a rotation");
        }
        for s in [
            self.pointmap_noise_sigma,
            self.pose_center_noise_sigma,
            self.keypoint_noise_sigma,
            self.descriptor_noise_sigma,
            self.center_outlier_magnitude,
        ] {
            if !(s >= 0.0) || !s.is_finite() {
                return bad("noise levels must be nonnegative");
            }
        }
        for f in [self.outlier_fraction_centers, self.outlier_fraction_matches] {
            if !(0.0..1.0).contains(&f) {
                return bad("outlier fractions must lie in [0, 1)");
            }
        }
        if !(self.outlier_confidence > 0.0) || self.outlier_confidence > 1.0 {
            return bad("outlier_confidence must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Ground truth stored next to a simulated bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub query_id: String,
    /// Camera-to-world `[R | c]`, row-major.
    pub gt_query_pose: [f64; 12],
    pub true_scale: f64,
    pub true_align_rotation: [[f64; 3]; 3],
    pub sim_translation: [f64; 3],
    /// Indexed by world point id.
    pub world_points: Vec<[f64; 3]>,
    /// Per bundle view, the world point id of each keypoint.
    pub keypoint_sources: Vec<Vec<usize>>,
    /// Views whose local center was replaced by an outlier.
    pub outlier_views: Vec<usize>,
    pub scene_extent: f64,
}

impl OracleRecord {
    pub fn query_pose(&self) -> RigidPose {
        RigidPose::from_row_major(&self.gt_query_pose).unwrap_or_default()
    }

    pub fn align_rotation(&self) -> Matrix3<f64> {
        let r = self.true_align_rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn world_point(&self, id: usize) -> Vector3<f64> {
        Vector3::from(self.world_points[id])
    }

    pub fn write(&self, path: &Path) -> Result<(), SimError> {
        let text = serde_json::to_string_pretty(self).expect("oracle serializes");
        std::fs::write(path, text).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimView {
    pub image_id: String,
    pub pose: RigidPose,
    pub keypoints: Vec<Vector2<f64>>,
    /// World point id per keypoint.
    pub sources: Vec<usize>,
}

/// Metric geometry before any prediction is derived from it. View 0 is the
/// query; references follow in ascending distance to the query.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScene {
    pub spec: SceneSpec,
    pub world_points: Vec<Vector3<f64>>,
    /// Plane index each world point lies on.
    pub point_planes: Vec<usize>,
    /// Unit vector per world point.
    pub descriptors: Vec<Vec<f64>>,
    pub views: Vec<SimView>,
}

/// Nearest plane hit along a camera ray, as (plane, camera-frame point).
fn intersect(
    planes: &[Plane],
    pose: &RigidPose,
    k: &Intrinsics,
    pixel: &Vector2<f64>,
) -> Option<(usize, Vector3<f64>)> {
    let ray_c = k.unproject(pixel);
    let dir = pose.rotation * ray_c;
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in planes.iter().enumerate() {
        let n = p.n();
        let denom = n.dot(&dir);
        if denom >= 0.0 {
            continue;
        }
        let t = -p.signed_distance(&pose.center) / denom;
        if t > 0.0 && best.is_none_or(|(_, bt)| t < bt) {
            best = Some((i, t));
        }
    }
    best.map(|(i, t)| (i, ray_c * t))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn ring_camera(spec: &SceneSpec, rng: &mut ChaCha8Rng, angle: f64, radius: f64, height: f64) -> RigidPose {
    let center = Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
    let j = spec.target_jitter;
    let target = Vector3::new(
        rng.random_range(-1.0..=1.0) * j,
        rng.random_range(-1.0..=1.0) * j,
        rng.random_range(0.0..=1.0) * j,
    );
    RigidPose::look_at(center, target, Vector3::z())
}

/// Keypoints of the world points a camera sees, keeping only those whose
/// four interpolation neighbours lie on the point's own plane.
fn observe(
    spec: &SceneSpec,
    pose: &RigidPose,
    world: &[Vector3<f64>],
    planes_of: &[usize],
) -> (Vec<Vector2<f64>>, Vec<usize>) {
    let k = &spec.intrinsics;
    let (w, h) = (f64::from(k.width), f64::from(k.height));
    let margin = 2.0;
    let mut kps = Vec::new();
    let mut src = Vec::new();
    for (id, x) in world.iter().enumerate() {
        let Ok(u) = project(pose, k, x) else {
            continue;
        };
        if !(u[0] >= margin && u[1] >= margin && u[0] <= w - 1.0 - margin && u[1] <= h - 1.0 - margin) {
            continue;
        }
        let (c0, r0) = (u[0].floor(), u[1].floor());
        let same_plane = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .iter()
            .all(|(dc, dr)| {
                intersect(&spec.planes, pose, k, &Vector2::new(c0 + dc, r0 + dr))
                    .is_some_and(|(p, _)| p == planes_of[id])
            });
        if same_plane {
            kps.push(u);
            src.push(id);
        }
    }
    (kps, src)
}

/// World points, cameras and exact keypoints.
pub fn generate_scene(spec: &SceneSpec) -> Result<MetricScene, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let half = spec.scene_extent / 2.0;
    let mut world_points = Vec::with_capacity(spec.num_world_points);
    let mut point_planes = Vec::with_capacity(spec.num_world_points);
    for _ in 0..spec.num_world_points {
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        let z = spec.surface_height(x, y);
        let p = Vector3::new(x, y, z);
        let plane = spec
            .planes
            .iter()
            .enumerate()
            .map(|(i, pl)| (i, pl.signed_distance(&p).abs()))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
            .0;
        world_points.push(p);
        point_planes.push(plane);
    }
    let descriptors: Vec<Vec<f64>> = (0..spec.num_world_points)
        .map(|_| random_unit(&mut rng, spec.descriptor_dim))
        .collect();

    let n = spec.num_references;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / n as f64;
    let mut refs = Vec::with_capacity(n);
    for i in 0..n {
        let angle = phase + i as f64 * step + rng.random_range(-0.15..0.15) * step;
        let height = spec.camera_height + rng.random_range(-0.2..0.2);
        refs.push(ring_camera(spec, &mut rng, angle, spec.camera_ring_radius, height));
    }
    let q_angle = phase + rng.random_range(0.0..std::f64::consts::TAU);
    let q_radius = spec.camera_ring_radius * rng.random_range(0.85..1.0);
    let q_height = spec.camera_height + rng.random_range(-0.3..0.3);
    let query = ring_camera(spec, &mut rng, q_angle, q_radius, q_height);

    for p in &spec.planes {
        for pose in refs.iter().chain(std::iter::once(&query)) {
            if p.signed_distance(&pose.center) <= 0.0 {
                return Err(SimError::InvalidSpec(
                    "every camera must lie above every plane".into(),
                ));
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let da = (refs[a].center - query.center).norm();
        let db = (refs[b].center - query.center).norm();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let poses: Vec<RigidPose> = std::iter::once(query)
        .chain(order.iter().map(|&i| refs[i]))
        .collect();

    let mut views = Vec::with_capacity(poses.len());
    for (v, pose) in poses.into_iter().enumerate() {
        let (keypoints, sources) = observe(spec, &pose, &world_points, &point_planes);
        if keypoints.len() < 8 {
            return Err(SimError::InvisibleScene {
                view: v,
                count: keypoints.len(),
            });
        }
        views.push(SimView {
            image_id: if v == 0 {
                format!("s{}_query", spec.rng_seed)
            } else {
                format!("s{}_ref{v:03}", spec.rng_seed)
            },
            pose,
            keypoints,
            sources,
        });
    }

    Ok(MetricScene {
        spec: spec.clone(),
        world_points,
        point_planes,
        descriptors,
        views,
    })
}

/// Metric camera-frame point maps with binary confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMaps {
    pub point_maps: Vec<PointMap>,
    pub confidence_maps: Vec<ConfidenceMap>,
}

/// Per-pixel ray casts against the planes; pixels whose rays miss get a
/// zero point and zero confidence.
pub fn render_pointmaps(scene: &MetricScene) -> MetricMaps {
    let k = &scene.spec.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let mut point_maps = Vec::with_capacity(scene.views.len());
    let mut confidence_maps = Vec::with_capacity(scene.views.len());
    for view in &scene.views {
        let mut points = Vec::with_capacity(w * h);
        let mut conf = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                match intersect(&scene.spec.planes, &view.pose, k, &Vector2::new(c as f64, r as f64)) {
                    Some((_, p)) => {
                        points.push(p);
                        conf.push(1.0);
                    }
                    None => {
                        points.push(Vector3::zeros());
                        conf.push(0.0);
                    }
                }
            }
        }
        point_maps.push(PointMap::new(w, h, points));
        confidence_maps.push(ConfidenceMap::new(w, h, conf));
    }
    MetricMaps {
        point_maps,
        confidence_maps,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).map(|d| d.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(gaussian(rng, sigma), gaussian(rng, sigma), gaussian(rng, sigma))
}

/// Expresses the scene in the local frame, applies noise and outliers and
/// assembles the bundle and its oracle.
pub fn corrupt(
    scene: &MetricScene,
    maps: &MetricMaps,
    corruption: &CorruptionSpec,
) -> Result<(SceneBundle, OracleRecord), SimError> {
    corruption.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.spec.rng_seed);
    rng.set_stream(1);

    let s = corruption.sim_scale;
    let rot = orthonormalize(&corruption.rotation())
        .map_err(|e| SimError::InvalidCorruption(e.to_string()))?;
    let trans = Vector3::from(corruption.sim_translation);
    let b = scene.views.len();
    let k = scene.spec.intrinsics;
    let dim = scene.spec.descriptor_dim;

    let mut local_poses: Vec<RigidPose> = scene
        .views
        .iter()
        .map(|v| RigidPose {
            rotation: rot.transpose() * v.pose.rotation,
            center: rot.transpose() * (v.pose.center - trans) / s,
        })
        .collect();
    for p in local_poses.iter_mut() {
        p.center += gaussian3(&mut rng, corruption.pose_center_noise_sigma);
    }

    let num_refs = b - 1;
    let num_outliers = ((corruption.outlier_fraction_centers * num_refs as f64).round() as usize).min(num_refs);
    let mut ref_ids: Vec<usize> = (1..b).collect();
    ref_ids.shuffle(&mut rng);
    let mut outlier_views: Vec<usize> = ref_ids[..num_outliers].to_vec();
    outlier_views.sort_unstable();
    for &v in &outlier_views {
        let dir = loop {
            let d = gaussian3(&mut rng, 1.0);
            if d.norm() > 1e-6 {
                break d.normalize();
            }
        };
        local_poses[v].center += dir * (corruption.center_outlier_magnitude / s);
    }

    let mut point_maps = Vec::with_capacity(b);
    let mut confidence_maps = Vec::with_capacity(b);
    for v in 0..b {
        let pm = &maps.point_maps[v];
        let cm = &maps.confidence_maps[v];
        let points = pm
            .points
            .iter()
            .zip(&cm.values)
            .map(|(p, c)| {
                if *c > 0.0 {
                    p / s + gaussian3(&mut rng, corruption.pointmap_noise_sigma)
                } else {
                    *p
                }
            })
            .collect();
        point_maps.push(PointMap::new(pm.width, pm.height, points));
        let factor = if outlier_views.contains(&v) {
            corruption.outlier_confidence
        } else {
            1.0
        };
        confidence_maps.push(ConfidenceMap::new(
            cm.width,
            cm.height,
            cm.values.iter().map(|c| c * factor).collect(),
        ));
    }

    let (w, h) = (f64::from(k.width), f64::from(k.height));
    let mut features = Vec::with_capacity(b);
    for view in &scene.views {
        let keypoints: Vec<Vector2<f64>> = view
            .keypoints
            .iter()
            .map(|u| {
                if corruption.keypoint_noise_sigma > 0.0 {
                    let j = Vector2::new(
                        gaussian(&mut rng, corruption.keypoint_noise_sigma),
                        gaussian(&mut rng, corruption.keypoint_noise_sigma),
                    );
                    let p = u + j;
                    Vector2::new(p[0].clamp(0.0, w - 1.0), p[1].clamp(0.0, h - 1.0))
                } else {
                    *u
                }
            })
            .collect();
        let mut desc = Vec::with_capacity(keypoints.len() * dim);
        for &id in &view.sources {
            let base = &scene.descriptors[id];
            if corruption.descriptor_noise_sigma > 0.0 {
                let noisy: Vec<f64> = base
                    .iter()
                    .map(|x| x + gaussian(&mut rng, corruption.descriptor_noise_sigma))
                    .collect();
                let n = noisy.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    desc.extend(noisy.iter().map(|x| x / n));
                } else {
                    desc.extend_from_slice(base);
                }
            } else {
                desc.extend_from_slice(base);
            }
        }
        features.push(FeatureSet::new(keypoints, dim, desc));
    }

    let mut matches = BTreeMap::new();
    for i in 1..b {
        let index_i: BTreeMap<usize, usize> = scene.views[i]
            .sources
            .iter()
            .enumerate()
            .map(|(kp, &id)| (id, kp))
            .collect();
        for j in i + 1..b {
            let n_j = scene.views[j].sources.len();
            let mut pairs = Vec::new();
            for (kp_j, id) in scene.views[j].sources.iter().enumerate() {
                if let Some(&kp_i) = index_i.get(id) {
                    pairs.push((kp_i, kp_j));
                }
            }
            if corruption.outlier_fraction_matches > 0.0 && n_j > 1 {
                let n_bad = (corruption.outlier_fraction_matches * pairs.len() as f64).round() as usize;
                let mut ids: Vec<usize> = (0..pairs.len()).collect();
                ids.shuffle(&mut rng);
                for &m in &ids[..n_bad] {
                    let good = pairs[m].1;
                    let mut wrong = rng.random_range(0..n_j - 1);
                    if wrong >= good {
                        wrong += 1;
                    }
                    pairs[m].1 = wrong;
                }
            }
            if !pairs.is_empty() {
                matches.insert((i, j), MatchSet { pairs, scores: None });
            }
        }
    }

    let views = scene
        .views
        .iter()
        .enumerate()
        .map(|(v, sv)| ViewRecord {
            image_id: sv.image_id.clone(),
            intrinsics: k,
            gt_pose: if v == 0 { None } else { Some(sv.pose) },
        })
        .collect();

    let bundle = SceneBundle {
        views,
        retrieval: (1..b).collect(),
        predictions: PredictionSet {
            point_maps,
            confidence_maps,
            local_poses,
        },
        features,
        matches,
    };

    let oracle = OracleRecord {
        query_id: scene.views[0].image_id.clone(),
        gt_query_pose: scene.views[0].pose.to_row_major(),
        true_scale: s,
        true_align_rotation: corruption.sim_rotation,
        sim_translation: corruption.sim_translation,
        world_points: scene.world_points.iter().map(|p| (*p).into()).collect(),
        keypoint_sources: scene.views.iter().map(|v| v.sources.clone()).collect(),
        outlier_views,
        scene_extent: scene.spec.scene_extent,
    };
    Ok((bundle, oracle))
}

/// Scene, maps and corruption in one call.
pub fn simulate(
    spec: &SceneSpec,
    corruption: &CorruptionSpec,
) -> Result<(SceneBundle, OracleRecord), SimError> {
    let scene = generate_scene(spec)?;
    let maps = render_pointmaps(&scene);
    corrupt(&scene, &maps, corruption)
}

/// Uniformly distributed random rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ));
    q.to_rotation_matrix().into_inner()
}
