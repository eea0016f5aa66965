use nalgebra::{Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matching::Correspondence2D3D;
use super::RefineError;
use crate::geometry::{exp_so3, project, skew, Intrinsics, RigidPose, MIN_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpParams {
    pub iterations: usize,
    /// Reprojection inlier threshold, pixels.
    pub inlier_threshold: f64,
    pub seed: u64,
    pub lm_iterations: usize,
}

impl Default for PnpParams {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 5.0,
            seed: 0,
            lm_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: RigidPose,
    pub inlier_mask: Vec<bool>,
    /// Whether the solver's pose was kept over the initial one.
    pub refined: bool,
}

impl PnpResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|b| **b).count()
    }
}

/// Inlier count and mask at a reprojection threshold in pixels. Points
/// behind the camera are outliers.
pub fn count_inliers(
    pose: &RigidPose,
    k: &Intrinsics,
    correspondences: &[Correspondence2D3D],
    threshold: f64,
) -> (usize, Vec<bool>) {
    let t2 = threshold * threshold;
    let mask: Vec<bool> = correspondences
        .iter()
        .map(|c| {
            project(pose, k, &c.point)
                .map(|u| (u - c.query_pixel).norm_squared() <= t2)
                .unwrap_or(false)
        })
        .collect();
    (mask.iter().filter(|b| **b).count(), mask)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

fn poly_derivative(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(i, v)| i as f64 * v).collect()
}

/// Real roots of a polynomial of degree at most 4, coefficients in
/// ascending order.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.iter().map(|v| v / scale).collect();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-12 {
        c.pop();
    }
    let deg = c.len() - 1;
    let candidates: Vec<f64> = match deg {
        0 => Vec::new(),
        1 => vec![-c[0] / c[1]],
        _ => {
            let lead = c[deg];
            let mut m = nalgebra::DMatrix::<f64>::zeros(deg, deg);
            for i in 1..deg {
                m[(i, i - 1)] = 1.0;
            }
            for i in 0..deg {
                m[(i, deg - 1)] = -c[i] / lead;
            }
            m.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    let dc = poly_derivative(&c);
    candidates
        .into_iter()
        .map(|mut x| {
            for _ in 0..5 {
                let d = poly_eval(&dc, x);
                if d == 0.0 {
                    break;
                }
                let nx = x - poly_eval(&c, x) / d;
                if !nx.is_finite() {
                    break;
                }
                x = nx;
            }
            x
        })
        .collect()
}

/// Rotation and translation mapping `from` onto `to` in the least-squares
/// sense.
fn kabsch(from: &[Vector3<f64>; 3], to: &[Vector3<f64>; 3]) -> (Matrix3<f64>, Vector3<f64>) {
    let cf = (from[0] + from[1] + from[2]) / 3.0;
    let ct = (to[0] + to[1] + to[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (to[i] - ct) * (from[i] - cf).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    (r, ct - r * cf)
}

/// Minimal absolute pose from three unit bearings and their world points.
/// Returns up to four camera poses; empty when the points are collinear.
pub fn p3p(bearings: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Vec<RigidPose> {
    let span = (points[1] - points[0]).cross(&(points[2] - points[0])).norm();
    let size = (points[1] - points[0]).norm_squared().max((points[2] - points[0]).norm_squared());
    if !(span > 1e-10 * size) || size == 0.0 {
        return Vec::new();
    }
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);

    let d = (b2 - a2) / c2;
    let e = b2 / c2;
    let n = [1.0 - d, 2.0 * d * cos_g, -(1.0 + d)];
    let den = [2.0 * cos_b, -2.0 * cos_a];
    let q = [1.0 - e, 2.0 * e * cos_g, -e];
    let quartic = poly_add(
        &poly_add(&poly_mul(&n, &n), &poly_mul(&[-2.0 * cos_b], &poly_mul(&n, &den))),
        &poly_mul(&q, &poly_mul(&den, &den)),
    );

    let mut out = Vec::new();
    for u in real_roots(&quartic) {
        if !(u > 0.0) {
            continue;
        }
        let dv = poly_eval(&den, u);
        if dv.abs() < 1e-14 {
            continue;
        }
        let v = poly_eval(&n, u) / dv;
        let g = 1.0 + u * u - 2.0 * u * cos_g;
        if !(v > 0.0) || !(g > 0.0) {
            continue;
        }
        let s1 = (c2 / g).sqrt();
        let cam = [bearings[0] * s1, bearings[1] * (u * s1), bearings[2] * (v * s1)];
        let (r, t) = kabsch(points, &cam);
        if r.iter().all(|x| x.is_finite()) && t.iter().all(|x| x.is_finite()) {
            out.push(RigidPose::from_world_to_camera(r, t));
        }
    }
    out
}

fn reprojection_cost(pose: &RigidPose, k: &Intrinsics, set: &[&Correspondence2D3D]) -> f64 {
    let mut cost = 0.0;
    for c in set {
        match project(pose, k, &c.point) {
            Ok(u) => cost += (u - c.query_pixel).norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

fn apply_update(pose: &RigidPose, delta: &Vector6<f64>) -> RigidPose {
    let dr = exp_so3(&Vector3::new(delta[0], delta[1], delta[2]));
    let r = dr * pose.rotation_wc();
    let t = dr * pose.translation_wc() + Vector3::new(delta[3], delta[4], delta[5]);
    RigidPose::from_world_to_camera(r, t)
}

/// Levenberg–Marquardt on squared reprojection error, with a left
/// perturbation of the world-to-camera transform.
pub fn refine_pose_lm(
    pose: &RigidPose,
    k: &Intrinsics,
    set: &[&Correspondence2D3D],
    max_iterations: usize,
) -> RigidPose {
    let mut pose = *pose;
    let mut cost = reprojection_cost(&pose, k, set);
    if !cost.is_finite() {
        return pose;
    }
    let mut lambda = 1e-3;
    for _ in 0..max_iterations {
        let r_wc = pose.rotation_wc();
        let t_wc = pose.translation_wc();
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for c in set {
            let p = r_wc * c.point + t_wc;
            if !(p[2] > MIN_DEPTH) {
                return pose;
            }
            let iz = 1.0 / p[2];
            let d_pi = Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * p[0] * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * p[1] * iz * iz,
            );
            let mut dp = SMatrix::<f64, 3, 6>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&p)));
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = d_pi * dp;
            let r: Vector2<f64> = k.apply(&p) - c.query_pixel;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        if g.amax() <= 1e-12 * (1.0 + cost) || cost == 0.0 {
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = apply_update(&pose, &step);
            let new_cost = reprojection_cost(&candidate, k, set);
            if new_cost < cost {
                pose = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = step.amax() > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    pose
}

/// RANSAC over minimal three-point solutions, seeded with the initial pose
/// as a free hypothesis, followed by LM on the winning inliers. The mask
/// is recomputed from the final pose.
pub fn pnp_refine(
    correspondences: &[Correspondence2D3D],
    init_pose: &RigidPose,
    k: &Intrinsics,
    params: &PnpParams,
) -> Result<PnpResult, RefineError> {
    let n = correspondences.len();
    if n < 4 {
        return Err(RefineError::TooFewCorrespondences(n));
    }
    let bearings: Vec<Vector3<f64>> = correspondences
        .iter()
        .map(|c| k.unproject(&c.query_pixel).normalize())
        .collect();

    let (mut best_count, _) = count_inliers(init_pose, k, correspondences, params.inlier_threshold);
    let mut best_pose = *init_pose;
    let mut any_valid_sample = false;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let t2 = params.inlier_threshold * params.inlier_threshold;

    for _ in 0..params.iterations {
        if best_count == n {
            any_valid_sample = true;
            break;
        }
        let idx = index::sample(&mut rng, n, 4);
        let (i0, i1, i2, i3) = (idx.index(0), idx.index(1), idx.index(2), idx.index(3));
        let b = [bearings[i0], bearings[i1], bearings[i2]];
        let p = [
            correspondences[i0].point,
            correspondences[i1].point,
            correspondences[i2].point,
        ];
        let span = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        if !(span > 1e-10 * (p[1] - p[0]).norm_squared().max((p[2] - p[0]).norm_squared())) {
            continue;
        }
        any_valid_sample = true;
        for pose in p3p(&b, &p) {
            let check = &correspondences[i3];
            let ok = project(&pose, k, &check.point)
                .map(|u| (u - check.query_pixel).norm_squared() <= t2)
                .unwrap_or(false);
            if !ok {
                continue;
            }
            let (count, _) = count_inliers(&pose, k, correspondences, params.inlier_threshold);
            if count > best_count {
                best_count = count;
                best_pose = pose;
            }
        }
    }
    if !any_valid_sample {
        return Err(RefineError::SolverDegenerate);
    }
    if best_count < 4 {
        return Err(RefineError::NoConsensus(best_count));
    }

    let (_, mask) = count_inliers(&best_pose, k, correspondences, params.inlier_threshold);
    let inliers: Vec<&Correspondence2D3D> = correspondences
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| c)
        .collect();
    let pose = refine_pose_lm(&best_pose, k, &inliers, params.lm_iterations);
    let (_, inlier_mask) = count_inliers(&pose, k, correspondences, params.inlier_threshold);
    Ok(PnpResult {
        pose,
        inlier_mask,
        refined: true,
    })
}

/// Keeps whichever of the solver pose and the initial pose has more
/// inliers; ties keep the solver pose.
pub fn select_final(
    refined: Result<PnpResult, RefineError>,
    init_pose: &RigidPose,
    k: &Intrinsics,
    correspondences: &[Correspondence2D3D],
    threshold: f64,
) -> PnpResult {
    let (init_count, init_mask) = count_inliers(init_pose, k, correspondences, threshold);
    let fallback = PnpResult {
        pose: *init_pose,
        inlier_mask: init_mask,
        refined: false,
    };
    let Ok(result) = refined else {
        return fallback;
    };
    if correspondences.is_empty() {
        return fallback;
    }
    let (count, mask) = count_inliers(&result.pose, k, correspondences, threshold);
    if count >= init_count {
        PnpResult {
            pose: result.pose,
            inlier_mask: mask,
            refined: true,
        }
    } else {
        fallback
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle;
    use rand::{Rng, SeedableRng};

    fn k() -> Intrinsics {
        Intrinsics::new(320.0, 320.0, 160.0, 120.0, 320, 240)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        let c = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-6.0..-3.0),
        );
        let target = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
        RigidPose::look_at(c, target, Vector3::new(rng.random_range(-0.5..0.5), 1.0, 0.0))
    }

    fn visible_points(rng: &mut ChaCha8Rng, pose: &RigidPose, n: usize) -> Vec<Correspondence2D3D> {
        let mut out = Vec::new();
        while out.len() < n {
            let x = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
            );
            if let Ok(u) = project(pose, &k(), &x) {
                if k().contains(&u) {
                    out.push(Correspondence2D3D {
                        query_pixel: u,
                        query_keypoint: out.len(),
                        point: x,
                        descriptor_distance: 0.0,
                        track: out.len(),
                    });
                }
            }
        }
        out
    }

    fn offset_pose(pose: &RigidPose, rng: &mut ChaCha8Rng, trans: f64, rot: f64) -> RigidPose {
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let dt = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidPose::new(exp_so3(&(w.normalize() * rot)) * pose.rotation, pose.center + dt.normalize() * trans)
    }

    #[test]
    fn p3p_contains_true_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        let mut bad = 0;
        for _ in 0..500 {
            let pose = random_pose(&mut rng);
            let c = visible_points(&mut rng, &pose, 3);
            let b = [0, 1, 2].map(|i| k().unproject(&c[i].query_pixel).normalize());
            let p = [0, 1, 2].map(|i| c[i].point);
            let sols = p3p(&b, &p);
            let best = sols
                .iter()
                .map(|s| (s.center - pose.center).norm())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
            if best > 1e-6 {
                bad += 1;
            }
        }
        // Near-double roots lose precision; RANSAC's LM stage recovers it.
        assert!(worst < 1e-4, "worst {worst}");
        assert!(bad <= 5, "{bad} imprecise of 500");
    }

    #[test]
    fn p3p_rejects_collinear_points() {
        let b = [Vector3::z(), Vector3::z(), Vector3::z()];
        let p = [Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0];
        assert!(p3p(&b, &p).is_empty());
    }

    #[test]
    fn six_noiseless_points_recover_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..50 {
            let pose = random_pose(&mut rng);
            let c = visible_points(&mut rng, &pose, 6);
            let init = offset_pose(&pose, &mut rng, 0.5, 0.1);
            let params = PnpParams { seed, ..PnpParams::default() };
            let r = pnp_refine(&c, &init, &k(), &params).unwrap();
            assert!((r.pose.center - pose.center).norm() < 1e-5);
            assert!(rotation_angle(&r.pose.rotation, &pose.rotation) < 1e-4);
            assert_eq!(r.inlier_count(), 6);
        }
    }

    #[test]
    fn outliers_are_separated_exactly() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pose = random_pose(&mut rng);
            let mut c = visible_points(&mut rng, &pose, 50);
            let mut clean = vec![true; c.len()];
            for i in 0..20 {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                c[i].query_pixel += Vector2::new(a.cos(), a.sin()) * 50.0;
                clean[i] = false;
            }
            let init = offset_pose(&pose, &mut rng, 0.3, 0.05);
            let params = PnpParams { seed, ..PnpParams::default() };
            let r = pnp_refine(&c, &init, &k(), &params).unwrap();
            assert_eq!(r.inlier_mask, clean, "seed {seed}");
        }
    }

    #[test]
    fn reproducible_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        let mut c = visible_points(&mut rng, &pose, 30);
        for x in c.iter_mut().take(10) {
            x.query_pixel += Vector2::new(rng.random_range(-40.0..40.0), 30.0);
        }
        let init = offset_pose(&pose, &mut rng, 0.3, 0.05);
        let params = PnpParams { seed: 77, ..PnpParams::default() };
        let a = pnp_refine(&c, &init, &k(), &params).unwrap();
        let b = pnp_refine(&c, &init, &k(), &params).unwrap();
        assert_eq!(a.pose.to_row_major().map(f64::to_bits), b.pose.to_row_major().map(f64::to_bits));
        assert_eq!(a.inlier_mask, b.inlier_mask);
    }

    #[test]
    fn three_correspondences_are_too_few() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng);
        let c = visible_points(&mut rng, &pose, 3);
        assert_eq!(
            pnp_refine(&c, &pose, &k(), &PnpParams::default()),
            Err(RefineError::TooFewCorrespondences(3))
        );
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pose = RigidPose::look_at(Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::y());
        let c: Vec<_> = (0..6)
            .map(|i| {
                let x = Vector3::new(i as f64 * 0.2 - 0.5, 0.0, 0.0);
                Correspondence2D3D {
                    query_pixel: project(&pose, &k(), &x).unwrap() + Vector2::new(40.0, 0.0),
                    query_keypoint: i,
                    point: x,
                    descriptor_distance: 0.0,
                    track: i,
                }
            })
            .collect();
        assert_eq!(
            pnp_refine(&c, &pose, &k(), &PnpParams::default()),
            Err(RefineError::SolverDegenerate)
        );
    }

    fn split_set(pose: &RigidPose, init: &RigidPose, n_pose: usize, n_init: usize) -> Vec<Correspondence2D3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut c = visible_points(&mut rng, pose, n_pose);
        let mut d = visible_points(&mut rng, init, n_init);
        c.append(&mut d);
        c
    }

    #[test]
    fn select_keeps_the_larger_inlier_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_pose(&mut rng);
        let b = offset_pose(&a, &mut rng, 0.5, 0.2);
        let result = |p: RigidPose| {
            Ok(PnpResult {
                pose: p,
                inlier_mask: vec![],
                refined: true,
            })
        };

        let c = split_set(&a, &b, 50, 30);
        let r = select_final(result(a), &b, &k(), &c, 5.0);
        assert!(r.refined);
        assert_eq!(r.pose, a);
        assert!(r.inlier_count() >= 50);

        let c = split_set(&a, &b, 10, 40);
        let r = select_final(result(a), &b, &k(), &c, 5.0);
        assert!(!r.refined);
        assert_eq!(r.pose, b);

        let r = select_final(result(a), &a, &k(), &c, 5.0);
        assert!(r.refined);
    }

    #[test]
    fn select_falls_back_on_error_or_empty_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_pose(&mut rng);
        let b = offset_pose(&a, &mut rng, 0.5, 0.2);
        let r = select_final(Err(RefineError::TooFewCorrespondences(2)), &b, &k(), &[], 5.0);
        assert!(!r.refined);
        assert_eq!(r.pose.to_row_major().map(f64::to_bits), b.to_row_major().map(f64::to_bits));
        let ok = Ok(PnpResult {
            pose: a,
            inlier_mask: vec![],
            refined: true,
        });
        let r = select_final(ok, &b, &k(), &[], 5.0);
        assert!(!r.refined);
        assert_eq!(r.pose, b);
    }

    #[test]
    fn lm_converges_from_nearby_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = random_pose(&mut rng);
        let c = visible_points(&mut rng, &pose, 20);
        let set: Vec<_> = c.iter().collect();
        let init = offset_pose(&pose, &mut rng, 0.05, 0.01);
        let out = refine_pose_lm(&init, &k(), &set, 100);
        assert!((out.center - pose.center).norm() < 1e-8);
    }
}
