//! Minimal-solver pose estimation: P3P, a four-point wrapper, and
//! hypothesis-pool sampling.
//!
//! The three-point solver follows the classical distance-ratio reduction:
//! with camera-to-point distances written as ratios against the third
//! point, the two law-of-cosines constraints become a pair of quadratics
//! whose resultant is a quartic polynomial. The quartic coefficients are
//! built by direct polynomial arithmetic (no hand-transcribed expansion),
//! roots come from companion-matrix eigenvalues, and each candidate pose is
//! polished with a single Gauss-Newton step on the pixel residuals to
//! remove eigenvalue round-off.

use crate::data::SceneCoordinateGrid;
use crate::exec;
use crate::geometry::{
    axis_angle, projection_jacobians, reprojection_error_clamped, CameraIntrinsics, PixelPoint,
    Pose, SceneCoordinate,
};
use nalgebra::{DMatrix, Matrix3, Vector3, Vector6};
use thiserror::Error;

/// Bearing- or scene-triangle area below which P3P input is degenerate.
pub const DEGENERACY_AREA: f64 = 1e-8;
/// Quartic roots with imaginary magnitude above this are discarded.
pub const ROOT_IMAG_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum PnpError {
    #[error("degenerate input: bearing or scene triangle is near-collinear")]
    Degenerate,
    #[error("hypothesis sampling exhausted its budget of {attempts} tuple draws")]
    SamplingExhausted { attempts: usize },
}

/// A 2D-3D match between an image position and a scene coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: PixelPoint,
    pub scene: SceneCoordinate,
}

/// A pool of pose hypotheses with their provenance and, once populated,
/// scores and selection probabilities (all vectors share the same length).
#[derive(Debug, Clone, Default)]
pub struct HypothesisPool {
    pub poses: Vec<Pose>,
    /// Grid cells whose correspondences defined each hypothesis.
    pub defining_cells: Vec<[usize; 4]>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl HypothesisPool {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Configuration for [`sample_hypotheses`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Number of hypotheses in the pool.
    pub hypothesis_count: usize,
    /// Acceptance threshold (pixels) on the four defining reprojection errors.
    pub inlier_threshold: f64,
    /// Total tuple-draw budget per image, split evenly across hypotheses.
    pub max_attempts: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { hypothesis_count: 256, inlier_threshold: 10.0, max_attempts: 1_000_000 }
    }
}

// ======================== P3P ========================

fn bearing(pixel: &PixelPoint, camera: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(
        (pixel.x - camera.principal_x) / camera.focal,
        (pixel.y - camera.principal_y) / camera.focal,
        1.0,
    )
    .normalize()
}

// Dense polynomials in one variable, ascending coefficients. Degrees stay
// tiny (at most 4), so fixed vectors are plenty.
fn pmul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn psub(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, &x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, &y) in b.iter().enumerate() {
        out[i] -= y;
    }
    out
}

fn peval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Real roots of a dense polynomial via companion-matrix eigenvalues.
/// Near-real complex eigenvalues (|Im| <= [`ROOT_IMAG_TOL`]) are projected
/// onto the real axis; the caller's polish step absorbs the round-off.
fn real_roots(poly: &[f64]) -> Vec<f64> {
    let scale = poly.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let c: Vec<f64> = poly.iter().map(|v| v / scale).collect();
    let mut deg = c.len() - 1;
    while deg > 0 && c[deg].abs() < 1e-12 {
        deg -= 1;
    }
    match deg {
        0 => Vec::new(),
        1 => vec![-c[0] / c[1]],
        d => {
            let mut m = DMatrix::<f64>::zeros(d, d);
            for i in 1..d {
                m[(i, i - 1)] = 1.0;
            }
            for i in 0..d {
                m[(i, d - 1)] = -c[i] / c[d];
            }
            m.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= ROOT_IMAG_TOL)
                .map(|z| z.re)
                .collect()
        }
    }
}

/// Rigid alignment `scene = R * cam + t` from three exact point pairs.
fn align_three(cam_pts: &[Vector3<f64>; 3], scene_pts: &[SceneCoordinate; 3]) -> Pose {
    let cc = (cam_pts[0] + cam_pts[1] + cam_pts[2]) / 3.0;
    let sc = (scene_pts[0].coords + scene_pts[1].coords + scene_pts[2].coords) / 3.0;
    let mut h = Matrix3::zeros();
    for k in 0..3 {
        h += (cam_pts[k] - cc) * (scene_pts[k].coords - sc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    d[(2, 2)] = (vt.transpose() * u.transpose()).determinant().signum();
    let rot = vt.transpose() * d * u.transpose();
    Pose::new(axis_angle(&rot), sc - rot * cc)
}

/// One Gauss-Newton step on the six pixel residuals of the three points.
fn polish_step(pose: &Pose, corr: &[Correspondence; 3], camera: &CameraIntrinsics) -> Pose {
    let mut jac = nalgebra::SMatrix::<f64, 6, 6>::zeros();
    let mut res = Vector6::zeros();
    for (k, c) in corr.iter().enumerate() {
        let Ok(pj) = projection_jacobians(&c.scene, pose, camera) else {
            return *pose;
        };
        res[2 * k] = pj.pixel.x - c.pixel.x;
        res[2 * k + 1] = pj.pixel.y - c.pixel.y;
        jac.fixed_view_mut::<2, 6>(2 * k, 0).copy_from(&pj.d_pose);
    }
    match jac.lu().solve(&res) {
        Some(delta) => Pose::from_vector(&(pose.as_vector() - delta)).canonicalized(),
        None => *pose,
    }
}

/// All three points must sit in front of the camera, at or beyond the
/// projection model's minimum working depth.
fn depths_valid(pose: &Pose, corr: &[Correspondence; 3]) -> bool {
    corr.iter().all(|c| pose.inverse_transform(&c.scene).z >= crate::geometry::MIN_DEPTH)
}

/// Solve the perspective-three-point problem. Returns 0-4 candidate
/// camera-to-scene poses; an empty set is a valid outcome for infeasible
/// input. Solutions placing any point behind the camera (or closer than
/// the projection model's working range) are discarded.
pub fn solve_p3p(
    corr: &[Correspondence; 3],
    camera: &CameraIntrinsics,
) -> Result<Vec<Pose>, PnpError> {
    let f = [
        bearing(&corr[0].pixel, camera),
        bearing(&corr[1].pixel, camera),
        bearing(&corr[2].pixel, camera),
    ];
    let bearing_area = 0.5 * (f[1] - f[0]).cross(&(f[2] - f[0])).norm();
    if bearing_area < DEGENERACY_AREA {
        return Err(PnpError::Degenerate);
    }
    let w = [corr[0].scene, corr[1].scene, corr[2].scene];
    let scene_area = 0.5 * (w[1] - w[0]).cross(&(w[2] - w[0])).norm();
    if scene_area < DEGENERACY_AREA {
        return Err(PnpError::Degenerate);
    }

    // Distances |AB|, |AC|, |BC| and ray-angle cosines; unknown are the
    // camera-to-point distances l1, l2, l3 along the bearings. With
    // x = l1/l3, y = l2/l3 the law-of-cosines system becomes
    //   y^2 + 1 - p*y = a' * (x^2 + y^2 - r*x*y)
    //   x^2 + 1 - q*x = b' * (x^2 + y^2 - r*x*y)
    // where a' = |BC|^2/|AB|^2, b' = |AC|^2/|AB|^2.
    let c2 = (w[0] - w[1]).norm_squared();
    let b2 = (w[0] - w[2]).norm_squared();
    let a2 = (w[1] - w[2]).norm_squared();
    if c2 < 1e-16 {
        return Err(PnpError::Degenerate);
    }
    let ap = a2 / c2;
    let bp = b2 / c2;
    let p = 2.0 * f[1].dot(&f[2]);
    let q = 2.0 * f[0].dot(&f[2]);
    let r = 2.0 * f[0].dot(&f[1]);

    // Coefficients of the two quadratics in y (polynomials in x).
    let qa = [vec![1.0, 0.0, -ap], vec![-p, ap * r], vec![1.0 - ap]]; // [A0, A1, A2]
    let qb = [vec![-1.0, q, bp - 1.0], vec![0.0, -bp * r], vec![bp]]; // [B0, B1, B2]

    // Resultant (Sylvester) of the two quadratics, eliminating y.
    let t1 = psub(&pmul(&qa[2], &qb[0]), &pmul(&qb[2], &qa[0]));
    let t2 = psub(&pmul(&qa[2], &qb[1]), &pmul(&qb[2], &qa[1]));
    let t3 = psub(&pmul(&qa[1], &qb[0]), &pmul(&qb[1], &qa[0]));
    let quartic = psub(&pmul(&t1, &t1), &pmul(&t2, &t3));

    let ab = c2.sqrt();
    let mut poses: Vec<Pose> = Vec::new();
    for x in real_roots(&quartic) {
        if !(x > 0.0) {
            continue;
        }
        let y = recover_y(&qa, &qb, &t1, &t2, x);
        let Some(y) = y else { continue };
        if !(y > 0.0) {
            continue;
        }
        let v = x * x + y * y - r * x * y;
        if !(v > 0.0) {
            continue;
        }
        let l3 = ab / v.sqrt();
        let cam_pts = [f[0] * (x * l3), f[1] * (y * l3), f[2] * l3];
        let pose = polish_step(&align_three(&cam_pts, &w), corr, camera);
        if !depths_valid(&pose, corr) {
            continue;
        }
        // Repeated quartic roots can produce near-identical candidates.
        let duplicate = poses.iter().any(|existing| {
            (existing.translation - pose.translation).norm() < 1e-7
                && (existing.rotation - pose.rotation).norm() < 1e-7
        });
        if !duplicate {
            poses.push(pose);
        }
    }
    Ok(poses)
}

/// Common root in y of the two quadratics at a given x: eliminate the y^2
/// term; fall back to the quadratic formula when the linear term vanishes.
fn recover_y(qa: &[Vec<f64>; 3], qb: &[Vec<f64>; 3], t1: &[f64], t2: &[f64], x: f64) -> Option<f64> {
    let denom = peval(t2, x);
    if denom.abs() > 1e-10 {
        return Some(-peval(t1, x) / denom);
    }
    // Solve quadratic A and keep the root that best satisfies B.
    let a2 = peval(&qa[2], x);
    let a1 = peval(&qa[1], x);
    let a0 = peval(&qa[0], x);
    let candidates: Vec<f64> = if a2.abs() > 1e-12 {
        let disc = a1 * a1 - 4.0 * a2 * a0;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        vec![(-a1 + s) / (2.0 * a2), (-a1 - s) / (2.0 * a2)]
    } else if a1.abs() > 1e-12 {
        vec![-a0 / a1]
    } else {
        return None;
    };
    candidates
        .into_iter()
        .filter(|y| y.is_finite())
        .min_by(|u, v| {
            let bu = (peval(&qb[2], x) * u * u + peval(&qb[1], x) * u + peval(&qb[0], x)).abs();
            let bv = (peval(&qb[2], x) * v * v + peval(&qb[1], x) * v + peval(&qb[0], x)).abs();
            bu.total_cmp(&bv)
        })
}

/// Solve pose from four correspondences: P3P on the first three, with the
/// fourth selecting among the roots by its reprojection error. Returns
/// `None` when no valid root exists.
pub fn solve_pnp4(corr: &[Correspondence; 4], camera: &CameraIntrinsics) -> Option<Pose> {
    let tri = [corr[0], corr[1], corr[2]];
    let poses = solve_p3p(&tri, camera).ok()?;
    poses.into_iter().min_by(|a, b| {
        let ea = reprojection_error_clamped(&corr[3].scene, &corr[3].pixel, a, camera);
        let eb = reprojection_error_clamped(&corr[3].scene, &corr[3].pixel, b, camera);
        ea.total_cmp(&eb)
    })
}

// ======================== hypothesis sampling ========================

/// Build the pose hypothesis defined by four grid cells, or `None` when the
/// minimal solve fails or any defining reprojection error exceeds the
/// inlier threshold.
pub fn hypothesis_from_cells(
    grid: &SceneCoordinateGrid,
    cells: &[usize; 4],
    camera: &CameraIntrinsics,
    inlier_threshold: f64,
) -> Option<Pose> {
    let corr = cells.map(|c| Correspondence { pixel: grid.anchors[c], scene: grid.coordinates[c] });
    let pose = solve_pnp4(&corr, camera)?;
    for c in &corr {
        if reprojection_error_clamped(&c.scene, &c.pixel, &pose, camera) > inlier_threshold {
            return None;
        }
    }
    Some(pose.canonicalized())
}

/// Sample a pool of pose hypotheses from random 4-tuples of grid cells.
///
/// Each hypothesis draws from its own RNG stream derived from
/// `(seed, hypothesis index)`, so the pool is identical under any thread
/// count or schedule. The total attempt budget is divided evenly across
/// hypotheses; if any stream exhausts its share the whole call fails with
/// [`PnpError::SamplingExhausted`].
pub fn sample_hypotheses(
    grid: &SceneCoordinateGrid,
    camera: &CameraIntrinsics,
    config: &SamplingConfig,
    seed: u64,
) -> Result<HypothesisPool, PnpError> {
    let cells = grid.len();
    assert!(cells >= 4, "need at least 4 grid cells to sample hypotheses");
    let n = config.hypothesis_count;
    let per_budget = config.max_attempts.div_ceil(n).max(1);
    let outcomes: Vec<Option<(Pose, [usize; 4])>> = exec::map_indexed(n, |i| {
        let mut rng = exec::derive_rng(seed, i as u64);
        for _ in 0..per_budget {
            let picked = rand::seq::index::sample(&mut rng, cells, 4);
            let tuple = [picked.index(0), picked.index(1), picked.index(2), picked.index(3)];
            if let Some(pose) = hypothesis_from_cells(grid, &tuple, camera, config.inlier_threshold)
            {
                return Some((pose, tuple));
            }
        }
        None
    });
    let mut pool = HypothesisPool::default();
    for outcome in outcomes {
        match outcome {
            Some((pose, tuple)) => {
                pool.poses.push(pose);
                pool.defining_cells.push(tuple);
            }
            None => return Err(PnpError::SamplingExhausted { attempts: per_budget * n }),
        }
    }
    Ok(pool)
}

// ======================== tests ========================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{standard_anchors, SceneCoordinateGrid};
    use crate::geometry::{backproject, project, reprojection_error};
    use rand::Rng;

    fn test_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 320.0, 240.0)
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        Pose::new(
            axis * rng.gen_range(0.01..2.8),
            Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ),
        )
    }

    /// Construct correspondences by projecting scene points through a known
    /// pose, so the pose is a guaranteed exact P3P solution.
    fn exact_correspondences<const N: usize>(
        pose: &Pose,
        cam: &CameraIntrinsics,
        rng: &mut impl Rng,
    ) -> [Correspondence; N] {
        std::array::from_fn(|_| {
            let pixel =
                PixelPoint::new(rng.gen_range(40.0..600.0), rng.gen_range(40.0..440.0));
            let depth = rng.gen_range(0.8..10.0);
            let scene = pose.transform(&backproject(&pixel, depth, cam).unwrap());
            Correspondence { pixel, scene }
        })
    }

    fn rotation_error(a: &Pose, b: &Pose) -> f64 {
        crate::geometry::angular_distance(a, b)
    }

    #[test]
    fn p3p_recovers_constructed_poses() {
        let cam = test_camera();
        let mut rng = crate::exec::derive_rng(31, 0);
        let mut recovered = 0;
        for _ in 0..500 {
            let pose = random_pose(&mut rng);
            let corr: [Correspondence; 3] = exact_correspondences(&pose, &cam, &mut rng);
            let Ok(solutions) = solve_p3p(&corr, &cam) else { continue };
            let best = solutions
                .iter()
                .map(|s| rotation_error(s, &pose) + (s.translation - pose.translation).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(
                best < 1e-6,
                "no solution near the generating pose (best distance {best})"
            );
            recovered += 1;
        }
        assert!(recovered > 480, "solver failed on too many instances: {recovered}");
    }

    #[test]
    fn p3p_solutions_reproject_exactly() {
        let cam = test_camera();
        let mut rng = crate::exec::derive_rng(32, 0);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let corr: [Correspondence; 3] = exact_correspondences(&pose, &cam, &mut rng);
            for sol in solve_p3p(&corr, &cam).unwrap_or_default() {
                for c in &corr {
                    let err = reprojection_error(&c.scene, &c.pixel, &sol, &cam).unwrap();
                    assert!(err < 1e-6, "candidate reprojects with error {err}");
                }
            }
        }
    }

    #[test]
    fn p3p_rejects_collinear_scene_points() {
        let cam = test_camera();
        let base = SceneCoordinate::new(0.0, 0.0, 4.0);
        let dir = Vector3::new(0.2, 0.1, 0.0);
        let corr: [Correspondence; 3] = std::array::from_fn(|i| {
            let scene = base + dir * i as f64;
            let pixel = project(&scene, &Pose::identity(), &cam).unwrap();
            Correspondence { pixel, scene }
        });
        assert_eq!(solve_p3p(&corr, &cam), Err(PnpError::Degenerate));
    }

    #[test]
    fn p3p_rejects_coincident_pixels() {
        let cam = test_camera();
        let pixel = PixelPoint::new(300.0, 200.0);
        let corr = [
            Correspondence { pixel, scene: SceneCoordinate::new(0.0, 0.0, 3.0) },
            Correspondence { pixel, scene: SceneCoordinate::new(1.0, 0.0, 4.0) },
            Correspondence { pixel, scene: SceneCoordinate::new(0.0, 1.0, 5.0) },
        ];
        assert_eq!(solve_p3p(&corr, &cam), Err(PnpError::Degenerate));
    }

    #[test]
    fn pnp4_picks_the_generating_pose() {
        let cam = test_camera();
        let mut rng = crate::exec::derive_rng(33, 0);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let corr: [Correspondence; 4] = exact_correspondences(&pose, &cam, &mut rng);
            let Some(got) = solve_pnp4(&corr, &cam) else {
                continue;
            };
            assert!(rotation_error(&got, &pose) < 1e-6);
            assert!((got.translation - pose.translation).norm() < 1e-6);
        }
    }

    fn exact_grid(pose: &Pose, cam: &CameraIntrinsics, cells_x: usize, cells_y: usize) -> SceneCoordinateGrid {
        let anchors = standard_anchors(cells_x, cells_y, crate::data::GRID_STRIDE);
        let mut rng = crate::exec::derive_rng(99, 7);
        let coordinates = anchors
            .iter()
            .map(|a| {
                let depth = rng.gen_range(1.0..6.0);
                pose.transform(&backproject(a, depth, cam).unwrap())
            })
            .collect();
        SceneCoordinateGrid { width: cells_x, height: cells_y, coordinates, anchors }
    }

    #[test]
    fn sampling_fills_the_pool_on_consistent_grids() {
        let cam = CameraIntrinsics::new(140.0, 80.0, 60.0);
        let mut rng = crate::exec::derive_rng(34, 0);
        let pose = random_pose(&mut rng);
        let grid = exact_grid(&pose, &cam, 20, 15);
        let cfg = SamplingConfig { hypothesis_count: 64, ..Default::default() };
        let pool = sample_hypotheses(&grid, &cam, &cfg, 123).unwrap();
        assert_eq!(pool.len(), 64);
        assert_eq!(pool.defining_cells.len(), 64);
        // Every hypothesis satisfies its defining constraints.
        for (pose_h, cells) in pool.poses.iter().zip(&pool.defining_cells) {
            for &c in cells {
                let err = reprojection_error_clamped(
                    &grid.coordinates[c],
                    &grid.anchors[c],
                    pose_h,
                    &cam,
                );
                assert!(err <= cfg.inlier_threshold);
            }
            assert!(pose_h.rotation.norm() <= std::f64::consts::PI + 1e-9);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_seed_sensitive() {
        let cam = CameraIntrinsics::new(140.0, 80.0, 60.0);
        let mut rng = crate::exec::derive_rng(35, 0);
        let pose = random_pose(&mut rng);
        let grid = exact_grid(&pose, &cam, 20, 15);
        let cfg = SamplingConfig { hypothesis_count: 32, ..Default::default() };
        let a = sample_hypotheses(&grid, &cam, &cfg, 7).unwrap();
        let b = sample_hypotheses(&grid, &cam, &cfg, 7).unwrap();
        assert_eq!(a.defining_cells, b.defining_cells);
        for (pa, pb) in a.poses.iter().zip(&b.poses) {
            assert_eq!(pa.rotation, pb.rotation);
            assert_eq!(pa.translation, pb.translation);
        }
        let c = sample_hypotheses(&grid, &cam, &cfg, 8).unwrap();
        assert_ne!(a.defining_cells, c.defining_cells);
    }

    #[test]
    fn sampling_exhausts_on_degenerate_grids() {
        // All coordinates on one line: every minimal solve is degenerate,
        // so the budget runs out without filling the pool.
        let cam = CameraIntrinsics::new(140.0, 80.0, 60.0);
        let anchors = standard_anchors(10, 8, crate::data::GRID_STRIDE);
        let coordinates = (0..80)
            .map(|k| SceneCoordinate::new(0.01 * k as f64, 0.02 * k as f64, 3.0))
            .collect();
        let grid = SceneCoordinateGrid { width: 10, height: 8, coordinates, anchors };
        let cfg = SamplingConfig {
            hypothesis_count: 16,
            max_attempts: 10_000,
            ..Default::default()
        };
        let err = sample_hypotheses(&grid, &cam, &cfg, 5);
        assert!(matches!(err, Err(PnpError::SamplingExhausted { .. })));
    }
}
