//! The scene bundle: everything the localizer consumes for one query.
//!
//! View 0 is the query; views `1..=K` are references. Reference ground-truth
//! poses are mandatory, the query's is optional and only used for
//! evaluation.

pub mod blob;
mod io;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, RigidPose};

pub use io::{read_bundle, write_bundle};

/// Corner depths at or below this value are treated as invalid when sampling.
pub const MIN_SAMPLE_DEPTH: f64 = 1e-6;

const DESCRIPTOR_NORM_TOL: f64 = 1e-6;
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("blob {0} is truncated or has trailing bytes")]
    TruncatedBlob(String),
    #[error("blob {path} has shape {found:?}, manifest implies {expected:?}")]
    ShapeMismatch {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing blob {0}")]
    MissingBlob(String),
    #[error("bundle invariant violated: {0}")]
    InvariantViolation(String),
    #[error("no reference survives the baseline filter")]
    NoReferencesSurvive,
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<GeometryError> for DataError {
    fn from(e: GeometryError) -> Self {
        DataError::InvariantViolation(e.to_string())
    }
}

fn violation(msg: impl Into<String>) -> DataError {
    DataError::InvariantViolation(msg.into())
}

/// Per-pixel 3D points in the camera's own frame, row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
}

impl PointMap {
    pub fn new(width: usize, height: usize, points: Vec<Vector3<f64>>) -> Self {
        debug_assert_eq!(points.len(), width * height);
        Self {
            width,
            height,
            points,
        }
    }

    pub fn at(&self, col: usize, row: usize) -> &Vector3<f64> {
        &self.points[row * self.width + col]
    }

    /// Camera-frame depth at a sub-pixel location.
    ///
    /// Inverse depth is interpolated bilinearly, which is exact wherever the
    /// four neighbouring pixels see the same plane. Returns `None` outside
    /// the pixel grid or when a neighbour has no valid depth.
    pub fn sample_depth(&self, pixel: &Vector2<f64>) -> Option<f64> {
        let (c0, r0, fu, fv) = bilinear_cell(self.width, self.height, pixel)?;
        let corners = [(c0, r0), (c0 + 1, r0), (c0, r0 + 1), (c0 + 1, r0 + 1)];
        let mut inv = [0.0; 4];
        for (slot, &(c, r)) in inv.iter_mut().zip(corners.iter()) {
            let z = self.at(c, r)[2];
            if !(z > MIN_SAMPLE_DEPTH) || !z.is_finite() {
                return None;
            }
            *slot = 1.0 / z;
        }
        let interp = (1.0 - fv) * ((1.0 - fu) * inv[0] + fu * inv[1])
            + fv * ((1.0 - fu) * inv[2] + fu * inv[3]);
        Some(1.0 / interp)
    }
}

/// Per-pixel nonnegative confidence, row-major `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            values,
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn sample(&self, pixel: &Vector2<f64>) -> Option<f64> {
        let (c0, r0, fu, fv) = bilinear_cell(self.width, self.height, pixel)?;
        let v = |c: usize, r: usize| self.values[r * self.width + c];
        Some(
            (1.0 - fv) * ((1.0 - fu) * v(c0, r0) + fu * v(c0 + 1, r0))
                + fv * ((1.0 - fu) * v(c0, r0 + 1) + fu * v(c0 + 1, r0 + 1)),
        )
    }
}

/// Top-left corner and fractional offsets of the bilinear cell containing
/// `pixel`, or `None` when it is outside `[0, W-1] × [0, H-1]`.
fn bilinear_cell(
    width: usize,
    height: usize,
    pixel: &Vector2<f64>,
) -> Option<(usize, usize, f64, f64)> {
    if width < 2 || height < 2 {
        return None;
    }
    let (u, v) = (pixel[0], pixel[1]);
    let (max_u, max_v) = ((width - 1) as f64, (height - 1) as f64);
    if !(u >= 0.0 && v >= 0.0 && u <= max_u && v <= max_v) {
        return None;
    }
    let c0 = (u.floor() as usize).min(width - 2);
    let r0 = (v.floor() as usize).min(height - 2);
    Some((c0, r0, u - c0 as f64, v - r0 as f64))
}

/// Network-output surrogate: point maps, confidences and local poses, one
/// entry per view.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub point_maps: Vec<PointMap>,
    pub confidence_maps: Vec<ConfidenceMap>,
    pub local_poses: Vec<RigidPose>,
}

/// Keypoints and unit-norm descriptors of one view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Vector2<f64>>,
    pub descriptor_dim: usize,
    /// Row-major `N × D`.
    pub descriptors: Vec<f64>,
}

impl FeatureSet {
    pub fn new(keypoints: Vec<Vector2<f64>>, descriptor_dim: usize, descriptors: Vec<f64>) -> Self {
        Self {
            keypoints,
            descriptor_dim,
            descriptors,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.descriptor_dim..(i + 1) * self.descriptor_dim]
    }
}

/// Euclidean distance between two descriptors.
pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Keypoint index pairs between two views, with optional similarity scores
/// (higher is better).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub image_id: String,
    pub intrinsics: Intrinsics,
    pub gt_pose: Option<RigidPose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub views: Vec<ViewRecord>,
    /// Reference view indices by descending retrieval score.
    pub retrieval: Vec<usize>,
    pub predictions: PredictionSet,
    pub features: Vec<FeatureSet>,
    /// Keyed by `(view_a, view_b)`; pair indices are `(index in a, index in b)`.
    pub matches: BTreeMap<(usize, usize), MatchSet>,
}

/// One oriented match between two views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedMatch {
    pub index_a: usize,
    pub index_b: usize,
    pub score: Option<f64>,
}

impl SceneBundle {
    pub const QUERY: usize = 0;

    pub fn num_references(&self) -> usize {
        self.views.len().saturating_sub(1)
    }

    pub fn query(&self) -> &ViewRecord {
        &self.views[Self::QUERY]
    }

    pub fn intrinsics(&self, view: usize) -> &Intrinsics {
        &self.views[view].intrinsics
    }

    /// Ground-truth pose of a reference view. Validated bundles always have
    /// one for every reference.
    pub fn gt_pose(&self, view: usize) -> Option<&RigidPose> {
        self.views[view].gt_pose.as_ref()
    }

    /// Matches between `a` and `b` oriented so that `index_a` indexes view
    /// `a`, whichever way round they are stored.
    pub fn matches_between(&self, a: usize, b: usize) -> Vec<OrientedMatch> {
        let mut out = Vec::new();
        if let Some(set) = self.matches.get(&(a, b)) {
            for (n, &(ia, ib)) in set.pairs.iter().enumerate() {
                out.push(OrientedMatch {
                    index_a: ia,
                    index_b: ib,
                    score: set.scores.as_ref().map(|s| s[n]),
                });
            }
        }
        if let Some(set) = self.matches.get(&(b, a)) {
            for (n, &(ib, ia)) in set.pairs.iter().enumerate() {
                out.push(OrientedMatch {
                    index_a: ia,
                    index_b: ib,
                    score: set.scores.as_ref().map(|s| s[n]),
                });
            }
        }
        out
    }

    /// Checks every bundle invariant.
    pub fn validate(&self) -> Result<(), DataError> {
        let b = self.views.len();
        if b < 2 {
            return Err(violation(format!(
                "bundle needs a query and at least one reference, got {b} views"
            )));
        }
        for (i, view) in self.views.iter().enumerate() {
            view.intrinsics
                .validate()
                .map_err(|e| violation(format!("view {i}: {e}")))?;
            match &view.gt_pose {
                Some(p) if !p.is_valid(ROTATION_TOL) => {
                    return Err(violation(format!("view {i}: invalid ground-truth pose")))
                }
                None if i != Self::QUERY => {
                    return Err(violation(format!(
                        "reference view {i} has no ground-truth pose"
                    )))
                }
                _ => {}
            }
        }

        let k = b - 1;
        let mut seen = vec![false; k + 1];
        if self.retrieval.len() != k {
            return Err(violation(format!(
                "retrieval list has {} entries for {k} references",
                self.retrieval.len()
            )));
        }
        for &r in &self.retrieval {
            if r == 0 || r > k || seen[r] {
                return Err(violation(format!(
                    "retrieval list is not a permutation of 1..={k}"
                )));
            }
            seen[r] = true;
        }

        let pred = &self.predictions;
        if pred.point_maps.len() != b || pred.confidence_maps.len() != b || pred.local_poses.len() != b
        {
            return Err(violation("prediction set does not cover every view"));
        }
        for (i, view) in self.views.iter().enumerate() {
            let (w, h) = (
                view.intrinsics.width as usize,
                view.intrinsics.height as usize,
            );
            let pm = &pred.point_maps[i];
            if pm.width != w || pm.height != h || pm.points.len() != w * h {
                return Err(violation(format!("view {i}: point map shape mismatch")));
            }
            if pm.points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(violation(format!("view {i}: non-finite point map value")));
            }
            let cm = &pred.confidence_maps[i];
            if cm.width != w || cm.height != h || cm.values.len() != w * h {
                return Err(violation(format!(
                    "view {i}: confidence map shape mismatch"
                )));
            }
            if cm.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(violation(format!(
                    "view {i}: confidence values must be finite and nonnegative"
                )));
            }
            if !pred.local_poses[i].is_valid(ROTATION_TOL) {
                return Err(violation(format!("view {i}: invalid local pose")));
            }
        }

        if self.features.len() != b {
            return Err(violation("feature sets do not cover every view"));
        }
        let dim = self.features[0].descriptor_dim;
        for (i, fs) in self.features.iter().enumerate() {
            if fs.descriptor_dim != dim {
                return Err(violation(format!(
                    "view {i}: descriptor dimension {} differs from {dim}",
                    fs.descriptor_dim
                )));
            }
            if fs.descriptors.len() != fs.keypoints.len() * dim {
                return Err(violation(format!(
                    "view {i}: descriptor count does not match keypoints"
                )));
            }
            let k = &self.views[i].intrinsics;
            if let Some(bad) = fs.keypoints.iter().position(|kp| !k.contains(kp)) {
                return Err(violation(format!(
                    "view {i}: keypoint {bad} lies outside the image"
                )));
            }
            if dim > 0 {
                for n in 0..fs.len() {
                    let norm = fs.descriptor(n).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (norm - 1.0).abs() > DESCRIPTOR_NORM_TOL {
                        return Err(violation(format!(
                            "view {i}: descriptor {n} has norm {norm}"
                        )));
                    }
                }
            }
        }

        for (&(a, bv), set) in &self.matches {
            if a >= b || bv >= b || a == bv {
                return Err(violation(format!("match set ({a}, {bv}) has bad view ids")));
            }
            let (na, nb) = (self.features[a].len(), self.features[bv].len());
            if set.pairs.iter().any(|&(ia, ib)| ia >= na || ib >= nb) {
                return Err(violation(format!(
                    "match set ({a}, {bv}) indexes past the keypoint lists"
                )));
            }
            if let Some(scores) = &set.scores {
                if scores.len() != set.pairs.len() || scores.iter().any(|s| !s.is_finite()) {
                    return Err(violation(format!(
                        "match set ({a}, {bv}) has inconsistent scores"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Greedy spatial-diversity filter over the retrieval ranking.
///
/// A reference is kept only if its ground-truth center is at least
/// `min_baseline` meters from every reference kept so far; the scan stops
/// after `k_max` references.
pub fn filter_references(
    bundle: &SceneBundle,
    k_max: usize,
    min_baseline: f64,
) -> Result<Vec<usize>, DataError> {
    let mut kept: Vec<usize> = Vec::new();
    for &r in &bundle.retrieval {
        if kept.len() >= k_max {
            break;
        }
        let Some(pose) = bundle.gt_pose(r) else {
            continue;
        };
        let far_enough = kept.iter().all(|&other| {
            bundle
                .gt_pose(other)
                .map(|p| (p.center - pose.center).norm() >= min_baseline)
                .unwrap_or(true)
        });
        if far_enough {
            kept.push(r);
        }
    }
    if kept.is_empty() {
        return Err(DataError::NoReferencesSurvive);
    }
    Ok(kept)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use nalgebra::Matrix3;

    /// Small valid bundle with references placed at the given x offsets.
    pub fn bundle_with_centers(xs: &[f64]) -> SceneBundle {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 1.5, 4, 3);
        let mut views = vec![ViewRecord {
            image_id: "query".into(),
            intrinsics: k,
            gt_pose: None,
        }];
        for (i, &x) in xs.iter().enumerate() {
            views.push(ViewRecord {
                image_id: format!("ref{}", i + 1),
                intrinsics: k,
                gt_pose: Some(RigidPose::new(Matrix3::identity(), Vector3::new(x, 0.0, 0.0))),
            });
        }
        let b = views.len();
        let pm = PointMap::new(4, 3, vec![Vector3::new(0.0, 0.0, 1.0); 12]);
        let cm = ConfidenceMap::new(4, 3, vec![1.0; 12]);
        let features = (0..b)
            .map(|_| FeatureSet::new(vec![Vector2::new(1.0, 1.0)], 2, vec![1.0, 0.0]))
            .collect();
        SceneBundle {
            views,
            retrieval: (1..b).collect(),
            predictions: PredictionSet {
                point_maps: vec![pm; b],
                confidence_maps: vec![cm; b],
                local_poses: vec![RigidPose::identity(); b],
            },
            features,
            matches: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::bundle_with_centers;
    use super::*;

    #[test]
    fn filter_keeps_spatially_diverse_references() {
        let bundle = bundle_with_centers(&[0.0, 0.1, 1.0]);
        assert_eq!(filter_references(&bundle, 10, 0.3).unwrap(), vec![1, 3]);
    }

    #[test]
    fn filter_with_zero_baseline_takes_top_k() {
        let bundle = bundle_with_centers(&[0.0, 0.1, 1.0, 2.0]);
        assert_eq!(filter_references(&bundle, 2, 0.0).unwrap(), vec![1, 2]);
    }

    #[test]
    fn filter_keeps_single_reference_when_all_coincide() {
        let bundle = bundle_with_centers(&[0.5, 0.5, 0.5]);
        assert_eq!(filter_references(&bundle, 10, 0.3).unwrap(), vec![1]);
    }

    #[test]
    fn filter_follows_retrieval_order() {
        let mut bundle = bundle_with_centers(&[0.0, 0.1, 1.0]);
        bundle.retrieval = vec![2, 3, 1];
        assert_eq!(filter_references(&bundle, 10, 0.3).unwrap(), vec![2, 3]);
    }

    #[test]
    fn filter_with_zero_budget_fails() {
        let bundle = bundle_with_centers(&[0.0]);
        assert!(matches!(
            filter_references(&bundle, 0, 0.3),
            Err(DataError::NoReferencesSurvive)
        ));
    }

    #[test]
    fn validation_rejects_broken_bundles() {
        assert!(bundle_with_centers(&[0.0, 1.0]).validate().is_ok());

        let mut b = bundle_with_centers(&[]);
        assert!(b.validate().is_err());
        b = bundle_with_centers(&[0.0, 1.0]);
        b.views[2].gt_pose = None;
        assert!(b.validate().is_err());
        b = bundle_with_centers(&[0.0, 1.0]);
        b.retrieval = vec![1, 1];
        assert!(b.validate().is_err());
        b = bundle_with_centers(&[0.0, 1.0]);
        b.predictions.confidence_maps[1].values[3] = -1.0;
        assert!(b.validate().is_err());
        b = bundle_with_centers(&[0.0, 1.0]);
        b.features[1].descriptors = vec![0.5, 0.5];
        assert!(b.validate().is_err());
        b = bundle_with_centers(&[0.0, 1.0]);
        b.features[1].keypoints[0] = Vector2::new(3.6, 1.0);
        assert!(b.validate().is_err());
        b = bundle_with_centers(&[0.0, 1.0]);
        b.matches.insert(
            (1, 2),
            MatchSet {
                pairs: vec![(0, 1)],
                scores: None,
            },
        );
        assert!(b.validate().is_err());
    }

    #[test]
    fn matches_are_oriented_on_lookup() {
        let mut b = bundle_with_centers(&[0.0, 1.0]);
        b.matches.insert(
            (1, 2),
            MatchSet {
                pairs: vec![(0, 0)],
                scores: Some(vec![0.7]),
            },
        );
        let fwd = b.matches_between(1, 2);
        let rev = b.matches_between(2, 1);
        assert_eq!(fwd.len(), 1);
        assert_eq!(rev.len(), 1);
        assert_eq!(fwd[0].score, Some(0.7));
        assert_eq!((rev[0].index_a, rev[0].index_b), (0, 0));
    }

    #[test]
    fn inverse_depth_interpolation_is_exact_on_planes() {
        // Plane z = 2 + 0.1·x seen by a camera with fx = fy = 10, c = (2, 1.5).
        let k = Intrinsics::new(10.0, 10.0, 2.0, 1.5, 5, 4);
        let depth_at = |u: f64, v: f64| {
            let ray = k.unproject(&Vector2::new(u, v));
            2.0 / (1.0 - 0.1 * ray[0])
        };
        let mut pts = Vec::new();
        for r in 0..4 {
            for c in 0..5 {
                let z = depth_at(c as f64, r as f64);
                pts.push(k.unproject(&Vector2::new(c as f64, r as f64)) * z);
            }
        }
        let pm = PointMap::new(5, 4, pts);
        for &(u, v) in &[(0.3, 0.7), (2.5, 1.25), (3.99, 2.01), (4.0, 3.0)] {
            let got = pm.sample_depth(&Vector2::new(u, v)).unwrap();
            assert!((got - depth_at(u, v)).abs() < 1e-12, "{u},{v}");
        }
        assert!(pm.sample_depth(&Vector2::new(-0.1, 1.0)).is_none());
        assert!(pm.sample_depth(&Vector2::new(4.01, 1.0)).is_none());
    }

    #[test]
    fn depth_sampling_rejects_invalid_corners() {
        let mut pm = PointMap::new(3, 3, vec![Vector3::new(0.0, 0.0, 2.0); 9]);
        pm.points[4] = Vector3::zeros();
        assert!(pm.sample_depth(&Vector2::new(0.5, 0.5)).is_none());
        assert_eq!(pm.sample_depth(&Vector2::new(0.0, 0.0)), None);
        pm.points[4] = Vector3::new(0.0, 0.0, 2.0);
        assert_eq!(pm.sample_depth(&Vector2::new(0.5, 0.5)), Some(2.0));
    }
}
