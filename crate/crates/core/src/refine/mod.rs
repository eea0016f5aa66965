//! Pose refinement: tracks anchored on the top-ranked reference, structure-only
//! bundle adjustment against ground-truth reference poses, guided matching in
//! the query image and a RANSAC + Levenberg–Marquardt PnP.

mod ba;
mod matching;
mod pnp;
mod robust;
mod tracks;

use thiserror::Error;

pub use ba::{
    point_cost, projection_jacobian_wrt_point, refine_point, structure_only_ba, BaConfig, BaReport, ViewCamera,
};
pub use matching::{guided_match, Correspondence2D3D, GuidedMatchParams};
pub use pnp::{
    count_inliers, p3p, pnp_refine, refine_pose_lm, select_final, PnpParams, PnpResult,
};
pub use robust::SoftL1;
pub use tracks::{build_tracks, init_track_point, initialize_tracks, Observation, Track};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("predicted depth at anchor keypoint {0} is not usable")]
    InvalidDepth(usize),
    #[error("PnP needs at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("every minimal sample was degenerate")]
    SolverDegenerate,
    #[error("best PnP hypothesis has only {0} inliers")]
    NoConsensus(usize),
}
