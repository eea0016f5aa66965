use std::collections::BTreeMap;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use super::robust::SoftL1;
use super::tracks::Track;
use crate::geometry::{project, Intrinsics, RigidPose, MIN_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewCamera {
    pub pose: RigidPose,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaConfig {
    /// Soft-L1 transition, pixels.
    pub robust_scale: f64,
    pub max_iterations: usize,
    /// On the infinity norm of the robust gradient.
    pub gradient_tolerance: f64,
    /// Relative step size.
    pub parameter_tolerance: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            robust_scale: 1.0,
            max_iterations: 50,
            gradient_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `∂π/∂X` for a world point, or `None` behind the camera.
pub fn projection_jacobian_wrt_point(
    camera: &ViewCamera,
    x_world: &Vector3<f64>,
) -> Option<Matrix2x3<f64>> {
    let p = camera.pose.world_to_camera(x_world);
    if !(p[2] > MIN_DEPTH) {
        return None;
    }
    let k = &camera.intrinsics;
    let iz = 1.0 / p[2];
    let d_pi = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p[0] * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p[1] * iz * iz,
    );
    Some(d_pi * camera.pose.rotation_wc())
}

/// Robust reprojection cost of one point; infinite if any observing camera
/// sees it from behind.
pub fn point_cost(
    x_world: &Vector3<f64>,
    observations: &[(ViewCamera, Vector2<f64>)],
    loss: &SoftL1,
) -> f64 {
    let mut cost = 0.0;
    for (cam, u) in observations {
        match project(&cam.pose, &cam.intrinsics, x_world) {
            Ok(px) => cost += loss.rho((px - u).norm_squared()),
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

fn normal_equations(
    x: &Vector3<f64>,
    observations: &[(ViewCamera, Vector2<f64>)],
    loss: &SoftL1,
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let mut h = Matrix3::zeros();
    let mut g = Vector3::zeros();
    for (cam, u) in observations {
        let j = projection_jacobian_wrt_point(cam, x)?;
        let r = cam.intrinsics.apply(&cam.pose.world_to_camera(x)) - u;
        let w = loss.weight(r.norm_squared());
        h += w * j.transpose() * j;
        g += w * j.transpose() * r;
    }
    Some((h, g))
}

/// Damped Gauss-Newton on one point with IRLS weights; uphill steps are
/// rejected so the cost never increases.
pub fn refine_point(
    x0: &Vector3<f64>,
    observations: &[(ViewCamera, Vector2<f64>)],
    config: &BaConfig,
) -> (Vector3<f64>, BaReport) {
    let loss = SoftL1::new(config.robust_scale);
    let mut x = *x0;
    let mut cost = point_cost(&x, observations, &loss);
    let initial_cost = cost;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    if cost.is_finite() {
        while iterations < config.max_iterations {
            iterations += 1;
            let Some((h, g)) = normal_equations(&x, observations, &loss) else {
                break;
            };
            if g.amax() <= config.gradient_tolerance {
                converged = true;
                break;
            }
            let mut accepted = false;
            while lambda < 1e16 {
                let mut damped = h;
                for d in 0..3 {
                    damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
                    lambda *= 10.0;
                    continue;
                };
                let candidate = x + step;
                let new_cost = point_cost(&candidate, observations, &loss);
                if new_cost < cost {
                    let small =
                        step.norm() <= config.parameter_tolerance * (x.norm() + config.parameter_tolerance);
                    x = candidate;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if small {
                        converged = true;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // No downhill step at any damping: numerically at a minimum.
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }
    }

    (
        x,
        BaReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
        },
    )
}

/// Refines every track's point against fixed reference poses. Tracks are
/// solved independently; observations of views without a camera are
/// ignored.
pub fn structure_only_ba(
    tracks: &mut [Track],
    cameras: &BTreeMap<usize, ViewCamera>,
    config: &BaConfig,
) {
    for track in tracks.iter_mut() {
        let observations: Vec<_> = track
            .observations
            .iter()
            .filter_map(|o| cameras.get(&o.view).map(|c| (*c, o.pixel)))
            .collect();
        let (x, report) = refine_point(&track.point, &observations, config);
        track.point = x;
        track.ba = Some(report);
    }
}
