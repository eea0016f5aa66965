use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};

use super::ba::BaReport;
use super::RefineError;
use crate::dataio::{descriptor_distance, SceneBundle};
use crate::geometry::{backproject, Intrinsics, RigidPose};

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub view: usize,
    pub keypoint: usize,
    pub pixel: Vector2<f64>,
}

/// An anchor keypoint, its matches in other references and one 3D point.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub anchor_keypoint: usize,
    /// The anchor observation comes first.
    pub observations: Vec<Observation>,
    /// World frame, meters.
    pub point: Vector3<f64>,
    pub descriptor: Vec<f64>,
    /// Filled in by bundle adjustment.
    pub ba: Option<BaReport>,
}

impl Track {
    pub fn anchor_pixel(&self) -> Vector2<f64> {
        self.observations[0].pixel
    }

    /// False only when bundle adjustment ran and did not converge.
    pub fn is_usable(&self) -> bool {
        self.ba.map(|r| r.converged).unwrap_or(true)
    }
}

/// Merges anchor↔reference matches into tracks keyed by anchor keypoint.
///
/// When one reference matches the same anchor keypoint more than once the
/// match with the highest score is kept, or, without scores, the one with
/// the closest descriptor. Anchor keypoints matched nowhere yield no track.
pub fn build_tracks(bundle: &SceneBundle, anchor: usize, others: &[usize]) -> Vec<Track> {
    let anchor_features = &bundle.features[anchor];
    // anchor keypoint -> (reference view -> (reference keypoint, quality))
    let mut merged: BTreeMap<usize, BTreeMap<usize, (usize, f64)>> = BTreeMap::new();
    for &r in others {
        if r == anchor {
            continue;
        }
        let ref_features = &bundle.features[r];
        for m in bundle.matches_between(anchor, r) {
            let quality = m.score.unwrap_or_else(|| {
                -descriptor_distance(
                    anchor_features.descriptor(m.index_a),
                    ref_features.descriptor(m.index_b),
                )
            });
            let slot = merged.entry(m.index_a).or_default();
            match slot.get(&r) {
                Some(&(_, q)) if q >= quality => {}
                _ => {
                    slot.insert(r, (m.index_b, quality));
                }
            }
        }
    }

    let order: BTreeMap<usize, usize> = others.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    merged
        .into_iter()
        .map(|(kp, refs)| {
            let mut observations = vec![Observation {
                view: anchor,
                keypoint: kp,
                pixel: anchor_features.keypoints[kp],
            }];
            let mut refs: Vec<_> = refs.into_iter().collect();
            refs.sort_by_key(|(r, _)| order.get(r).copied().unwrap_or(usize::MAX));
            observations.extend(refs.into_iter().map(|(r, (idx, _))| Observation {
                view: r,
                keypoint: idx,
                pixel: bundle.features[r].keypoints[idx],
            }));
            Track {
                anchor_keypoint: kp,
                observations,
                point: Vector3::zeros(),
                descriptor: anchor_features.descriptor(kp).to_vec(),
                ba: None,
            }
        })
        .collect()
}

/// Back-projects the anchor keypoint at the scaled predicted depth.
pub fn init_track_point(
    track: &Track,
    anchor_point_map: &crate::dataio::PointMap,
    anchor_intrinsics: &Intrinsics,
    scale: f64,
    anchor_gt: &RigidPose,
) -> Result<Vector3<f64>, RefineError> {
    let pixel = track.anchor_pixel();
    let depth = anchor_point_map
        .sample_depth(&pixel)
        .map(|z| scale * z)
        .filter(|d| *d > 0.0 && d.is_finite())
        .ok_or(RefineError::InvalidDepth(track.anchor_keypoint))?;
    backproject(anchor_gt, anchor_intrinsics, &pixel, depth)
        .map_err(|_| RefineError::InvalidDepth(track.anchor_keypoint))
}

/// Initializes every track's point; returns the survivors and the number
/// dropped for lack of a valid depth.
pub fn initialize_tracks(
    tracks: Vec<Track>,
    bundle: &SceneBundle,
    anchor: usize,
    scale: f64,
) -> (Vec<Track>, usize) {
    let Some(anchor_gt) = bundle.gt_pose(anchor) else {
        let n = tracks.len();
        return (Vec::new(), n);
    };
    let point_map = &bundle.predictions.point_maps[anchor];
    let k = bundle.intrinsics(anchor);
    let mut dropped = 0;
    let kept = tracks
        .into_iter()
        .filter_map(|mut t| match init_track_point(&t, point_map, k, scale, anchor_gt) {
            Ok(x) => {
                t.point = x;
                Some(t)
            }
            Err(_) => {
                dropped += 1;
                None
            }
        })
        .collect();
    (kept, dropped)
}
