use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};

use super::tracks::Track;
use crate::dataio::{descriptor_distance, FeatureSet};
use crate::geometry::{project, Intrinsics, RigidPose};

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence2D3D {
    pub query_pixel: Vector2<f64>,
    pub query_keypoint: usize,
    pub point: Vector3<f64>,
    pub descriptor_distance: f64,
    pub track: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedMatchParams {
    /// Pixels.
    pub radius: f64,
    pub max_descriptor_distance: f64,
}

impl Default for GuidedMatchParams {
    fn default() -> Self {
        Self {
            radius: 20.0,
            max_descriptor_distance: 0.9,
        }
    }
}

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Vector2<f64>], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Vector2<f64>, cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    fn neighbours(&self, p: &Vector2<f64>) -> impl Iterator<Item = usize> + '_ {
        let (cx, cy) = Self::key(p, self.cell);
        (-1..=1)
            .flat_map(move |dx| (-1..=1).map(move |dy| (cx + dx, cy + dy)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
    }
}

/// Projects each usable track into the query with the initial pose and
/// takes the nearest descriptor among query keypoints within the radius.
/// Equal distances go to the lower keypoint index.
pub fn guided_match(
    tracks: &[Track],
    init_pose: &RigidPose,
    query: &FeatureSet,
    k_q: &Intrinsics,
    params: &GuidedMatchParams,
) -> Vec<Correspondence2D3D> {
    let cell = if params.radius > 0.0 { params.radius } else { 1.0 };
    let grid = Grid::new(&query.keypoints, cell);
    let r2 = params.radius * params.radius;
    let mut out = Vec::new();
    for (t, track) in tracks.iter().enumerate() {
        if !track.is_usable() {
            continue;
        }
        let Ok(u) = project(init_pose, k_q, &track.point) else {
            continue;
        };
        if !k_q.contains(&u) {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for i in grid.neighbours(&u) {
            if (query.keypoints[i] - u).norm_squared() > r2 {
                continue;
            }
            let d = descriptor_distance(&track.descriptor, query.descriptor(i));
            let better = match best {
                None => true,
                Some((bd, bi)) => d < bd || (d == bd && i < bi),
            };
            if better {
                best = Some((d, i));
            }
        }
        if let Some((d, i)) = best {
            if d <= params.max_descriptor_distance {
                out.push(Correspondence2D3D {
                    query_pixel: query.keypoints[i],
                    query_keypoint: i,
                    point: track.point,
                    descriptor_distance: d,
                    track: t,
                });
            }
        }
    }
    out
}
