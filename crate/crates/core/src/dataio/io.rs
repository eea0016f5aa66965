//! Bundle directory layout:
//!
//! ```text
//! manifest.json
//! pred/pointmap_<i>.f32   H × W × 3
//! pred/conf_<i>.f32       H × W
//! feat/kp_<i>.f32         N × 2
//! feat/desc_<i>.f32       N × D
//! match/<i>_<j>.f32       M × 2, keypoint indices stored as floats
//! match/<i>_<j>.score.f32 M      (only when the manifest says so)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{
    blob, ConfidenceMap, DataError, FeatureSet, MatchSet, PointMap, PredictionSet, SceneBundle,
    ViewRecord,
};
use crate::geometry::{Intrinsics, RigidPose};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_NAME: &str = "scene-bundle";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    descriptor_dim: usize,
    views: Vec<ManifestView>,
    retrieval: Vec<usize>,
    matches: Vec<ManifestMatch>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestView {
    image_id: String,
    intrinsics: Intrinsics,
    /// Camera-to-world `[R | c]`, row-major.
    gt_pose: Option<Vec<f64>>,
    local_pose: Vec<f64>,
    num_keypoints: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestMatch {
    view_a: usize,
    view_b: usize,
    count: usize,
    has_scores: bool,
}

fn pointmap_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("pred").join(format!("pointmap_{i}.f32"))
}

fn conf_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("pred").join(format!("conf_{i}.f32"))
}

fn kp_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("feat").join(format!("kp_{i}.f32"))
}

fn desc_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("feat").join(format!("desc_{i}.f32"))
}

fn match_path(dir: &Path, a: usize, b: usize) -> PathBuf {
    dir.join("match").join(format!("{a}_{b}.f32"))
}

fn score_path(dir: &Path, a: usize, b: usize) -> PathBuf {
    dir.join("match").join(format!("{a}_{b}.score.f32"))
}

fn create_dir(path: &Path) -> Result<(), DataError> {
    fs::create_dir_all(path).map_err(|e| DataError::io(path, e))
}

/// Writes a validated bundle to `dir`, creating it if needed.
pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<(), DataError> {
    bundle.validate()?;
    for sub in ["pred", "feat", "match"] {
        create_dir(&dir.join(sub))?;
    }

    let descriptor_dim = bundle.features[0].descriptor_dim;
    let views = bundle
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| ManifestView {
            image_id: v.image_id.clone(),
            intrinsics: v.intrinsics,
            gt_pose: v.gt_pose.map(|p| p.to_row_major().to_vec()),
            local_pose: bundle.predictions.local_poses[i].to_row_major().to_vec(),
            num_keypoints: bundle.features[i].len(),
        })
        .collect();
    let matches = bundle
        .matches
        .iter()
        .map(|(&(a, b), set)| ManifestMatch {
            view_a: a,
            view_b: b,
            count: set.pairs.len(),
            has_scores: set.scores.is_some(),
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        descriptor_dim,
        views,
        retrieval: bundle.retrieval.clone(),
        matches,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    let manifest_path = dir.join(MANIFEST);
    fs::write(&manifest_path, text + "\n").map_err(|e| DataError::io(&manifest_path, e))?;

    for (i, view) in bundle.views.iter().enumerate() {
        let (w, h) = (
            view.intrinsics.width as usize,
            view.intrinsics.height as usize,
        );
        let pm: Vec<f32> = bundle.predictions.point_maps[i]
            .points
            .iter()
            .flat_map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
            .collect();
        blob::write(&pointmap_path(dir, i), &[h, w, 3], &pm)?;
        let conf: Vec<f32> = bundle.predictions.confidence_maps[i]
            .values
            .iter()
            .map(|&v| v as f32)
            .collect();
        blob::write(&conf_path(dir, i), &[h, w], &conf)?;

        let fs_ = &bundle.features[i];
        let kp: Vec<f32> = fs_
            .keypoints
            .iter()
            .flat_map(|k| [k[0] as f32, k[1] as f32])
            .collect();
        blob::write(&kp_path(dir, i), &[fs_.len(), 2], &kp)?;
        let desc: Vec<f32> = fs_.descriptors.iter().map(|&v| v as f32).collect();
        blob::write(&desc_path(dir, i), &[fs_.len(), descriptor_dim], &desc)?;
    }

    for (&(a, b), set) in &bundle.matches {
        let pairs: Vec<f32> = set
            .pairs
            .iter()
            .flat_map(|&(ia, ib)| [ia as f32, ib as f32])
            .collect();
        blob::write(&match_path(dir, a, b), &[set.pairs.len(), 2], &pairs)?;
        if let Some(scores) = &set.scores {
            let s: Vec<f32> = scores.iter().map(|&v| v as f32).collect();
            blob::write(&score_path(dir, a, b), &[scores.len()], &s)?;
        }
    }
    Ok(())
}

fn pose_from_manifest(values: &[f64], what: &str) -> Result<RigidPose, DataError> {
    RigidPose::from_row_major(values)
        .map_err(|e| DataError::InvariantViolation(format!("{what}: {e}")))
}

fn index_from_f32(v: f32, path: &Path) -> Result<usize, DataError> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
        Ok(v as usize)
    } else {
        Err(DataError::InvariantViolation(format!(
            "{}: match index {v} is not a nonnegative integer",
            path.display()
        )))
    }
}

/// Loads and fully validates a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<SceneBundle, DataError> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(DataError::MissingBlob(manifest_path.display().to_string()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| DataError::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(DataError::Manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let dim = manifest.descriptor_dim;

    let mut views = Vec::with_capacity(manifest.views.len());
    let mut point_maps = Vec::new();
    let mut confidence_maps = Vec::new();
    let mut local_poses = Vec::new();
    let mut features = Vec::new();
    for (i, mv) in manifest.views.iter().enumerate() {
        mv.intrinsics
            .validate()
            .map_err(|e| DataError::InvariantViolation(format!("view {i}: {e}")))?;
        let gt_pose = mv
            .gt_pose
            .as_deref()
            .map(|v| pose_from_manifest(v, &format!("view {i} gt_pose")))
            .transpose()?;
        local_poses.push(pose_from_manifest(
            &mv.local_pose,
            &format!("view {i} local_pose"),
        )?);
        let (w, h) = (mv.intrinsics.width as usize, mv.intrinsics.height as usize);

        let pm = blob::read_shaped(&pointmap_path(dir, i), &[h, w, 3])?;
        let points = pm
            .chunks_exact(3)
            .map(|c| Vector3::new(f64::from(c[0]), f64::from(c[1]), f64::from(c[2])))
            .collect();
        point_maps.push(PointMap::new(w, h, points));

        let conf = blob::read_shaped(&conf_path(dir, i), &[h, w])?;
        confidence_maps.push(ConfidenceMap::new(
            w,
            h,
            conf.into_iter().map(f64::from).collect(),
        ));

        let n = mv.num_keypoints;
        let kp = blob::read_shaped(&kp_path(dir, i), &[n, 2])?;
        let keypoints = kp
            .chunks_exact(2)
            .map(|c| Vector2::new(f64::from(c[0]), f64::from(c[1])))
            .collect();
        let desc = blob::read_shaped(&desc_path(dir, i), &[n, dim])?;
        // Re-normalize to undo float32 rounding of unit vectors.
        let mut descriptors: Vec<f64> = desc.into_iter().map(f64::from).collect();
        if dim > 0 {
            for row in descriptors.chunks_exact_mut(dim) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        features.push(FeatureSet::new(keypoints, dim, descriptors));

        views.push(ViewRecord {
            image_id: mv.image_id.clone(),
            intrinsics: mv.intrinsics,
            gt_pose,
        });
    }

    let mut matches = BTreeMap::new();
    for mm in &manifest.matches {
        let (a, b) = (mm.view_a, mm.view_b);
        if a >= views.len() || b >= views.len() || a == b {
            return Err(DataError::InvariantViolation(format!(
                "manifest lists matches between invalid views ({a}, {b})"
            )));
        }
        let path = match_path(dir, a, b);
        let raw = blob::read_shaped(&path, &[mm.count, 2])?;
        let pairs = raw
            .chunks_exact(2)
            .map(|c| Ok((index_from_f32(c[0], &path)?, index_from_f32(c[1], &path)?)))
            .collect::<Result<Vec<_>, DataError>>()?;
        let scores = if mm.has_scores {
            let s = blob::read_shaped(&score_path(dir, a, b), &[mm.count])?;
            Some(s.into_iter().map(f64::from).collect())
        } else {
            None
        };
        if matches.insert((a, b), MatchSet { pairs, scores }).is_some() {
            return Err(DataError::InvariantViolation(format!(
                "manifest lists match set ({a}, {b}) twice"
            )));
        }
    }

    let bundle = SceneBundle {
        views,
        retrieval: manifest.retrieval,
        predictions: PredictionSet {
            point_maps,
            confidence_maps,
            local_poses,
        },
        features,
        matches,
    };
    bundle.validate()?;
    Ok(bundle)
}
