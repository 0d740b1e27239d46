//! Camera model, pose parameterization, and reprojection derivatives.
//!
//! Poses store the camera-to-scene transform: a point `x` in the camera
//! frame maps to `R x + t` in the scene frame, so `translation` is the
//! camera centre expressed in scene coordinates and projection applies the
//! inverse transform first. Rotations use the scaled-axis (axis-angle)
//! parameterization; a full pose is a 6-vector `[rotation, translation]`
//! and all Jacobians here are taken with respect to those six parameters.
//!
//! Reprojection residuals are scalar Euclidean pixel distances. Two
//! conventions keep every downstream stage total and differentiable:
//! points closer than [`MIN_DEPTH`] to the image plane yield the large
//! constant [`CLAMPED_ERROR`] with zero gradient, and residuals below
//! [`NORM_KINK`] are treated as non-differentiable (zero gradient).

use nalgebra::{
    Matrix2x3, Matrix3, Point2, Point3, Rotation3, SMatrix, UnitQuaternion, Vector2, Vector3,
    Vector6,
};
use thiserror::Error;

/// A 3D point expressed in the scene frame.
pub type SceneCoordinate = Point3<f64>;
/// A 2D image position in pixels.
pub type PixelPoint = Point2<f64>;
/// Jacobian of a projected pixel with respect to the six pose parameters.
pub type Matrix2x6 = SMatrix<f64, 2, 6>;
/// Symmetric 6x6 normal-equation matrix.
pub type Matrix6 = SMatrix<f64, 6, 6>;

/// Minimum camera-frame depth (metres) at which projection is defined.
pub const MIN_DEPTH: f64 = 0.1;
/// Reprojection error (pixels) assigned to points at or below the depth
/// floor. Finite so that scoring and refinement objectives stay total;
/// such points always carry zero gradient.
pub const CLAMPED_ERROR: f64 = 1e6;
/// Residual magnitude below which the norm gradient is treated as zero.
pub const NORM_KINK: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("camera-frame depth {depth} is below the minimum of {MIN_DEPTH}")]
    DepthTooSmall { depth: f64 },
    #[error("residual is below the differentiability threshold")]
    NonDifferentiable,
    #[error("depth {depth} is not positive")]
    InvalidDepth { depth: f64 },
}

/// Pinhole intrinsics with square pixels and no distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal_x: f64,
    pub principal_y: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, principal_x: f64, principal_y: f64) -> Self {
        assert!(
            focal.is_finite() && focal > 0.0,
            "focal length must be positive and finite"
        );
        Self { focal, principal_x, principal_y }
    }
}

/// Camera-to-scene transform: `scene = R(rotation) * cam + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Scaled rotation axis; the norm is the rotation angle in radians.
    pub rotation: Vector3<f64>,
    /// Camera centre in scene coordinates (metres).
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Vector3::zeros(), translation: Vector3::zeros() }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    /// Map a camera-frame point into the scene frame.
    pub fn transform(&self, cam_point: &Vector3<f64>) -> SceneCoordinate {
        SceneCoordinate::from(self.rotation_matrix() * cam_point + self.translation)
    }

    /// Map a scene point into the camera frame.
    pub fn inverse_transform(&self, scene_point: &SceneCoordinate) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (scene_point.coords - self.translation)
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: v.fixed_rows::<3>(0).into_owned(),
            translation: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    /// Wrap the rotation so its angle lies in `[0, pi]`.
    pub fn canonicalized(&self) -> Self {
        use std::f64::consts::PI;
        let angle = self.rotation.norm();
        if angle <= PI {
            return *self;
        }
        let axis = self.rotation / angle;
        let wrapped = angle % (2.0 * PI);
        let (new_angle, dir) = if wrapped > PI {
            (2.0 * PI - wrapped, -axis)
        } else {
            (wrapped, axis)
        };
        Self { rotation: dir * new_angle, translation: self.translation }
    }
}

/// Rodrigues map from a scaled-axis vector to a rotation matrix.
pub fn rotation_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*axis_angle).into_inner()
}

/// Scaled-axis vector of an orthonormal rotation matrix.
pub fn axis_angle(matrix: &Matrix3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*matrix)).scaled_axis()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Derivative of `rotation_matrix` with respect to each axis-angle component,
/// using the closed form
/// `dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) / |v|^2 * R`,
/// with the limit `[e_i]x` at the identity.
pub fn rotation_matrix_derivatives(axis_angle: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let r = rotation_matrix(axis_angle);
    let n2 = axis_angle.norm_squared();
    std::array::from_fn(|i| {
        let e = Vector3::ith(i, 1.0);
        if n2 < 1e-14 {
            skew(&e)
        } else {
            let cross = axis_angle.cross(&((Matrix3::identity() - r) * e));
            (axis_angle[i] * skew(axis_angle) + skew(&cross)) * r / n2
        }
    })
}

/// Project a scene point through a pose into pixel coordinates.
pub fn project(
    point: &SceneCoordinate,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Result<PixelPoint, GeometryError> {
    let p = pose.inverse_transform(point);
    if p.z < MIN_DEPTH {
        return Err(GeometryError::DepthTooSmall { depth: p.z });
    }
    Ok(PixelPoint::new(
        camera.focal * p.x / p.z + camera.principal_x,
        camera.focal * p.y / p.z + camera.principal_y,
    ))
}

/// Lift a pixel at a given camera-frame depth back to a camera-frame point.
pub fn backproject(
    pixel: &PixelPoint,
    depth: f64,
    camera: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::InvalidDepth { depth });
    }
    Ok(Vector3::new(
        (pixel.x - camera.principal_x) * depth / camera.focal,
        (pixel.y - camera.principal_y) * depth / camera.focal,
        depth,
    ))
}

/// Euclidean pixel distance between the projection of `point` and `observed`.
pub fn reprojection_error(
    point: &SceneCoordinate,
    observed: &PixelPoint,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    let projected = project(point, pose, camera)?;
    Ok((projected - observed).norm())
}

/// Total version of [`reprojection_error`]: points below the depth floor
/// yield [`CLAMPED_ERROR`] instead of an error.
pub fn reprojection_error_clamped(
    point: &SceneCoordinate,
    observed: &PixelPoint,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> f64 {
    reprojection_error(point, observed, pose, camera).unwrap_or(CLAMPED_ERROR)
}

/// A pose and camera bundled with the cached inverse rotation, for
/// projecting many points under one pose. Scoring and inlier counting
/// evaluate on the order of a million projections per frame; rebuilding
/// the rotation matrix from the axis-angle vector each time dominates
/// that cost. The arithmetic matches [`project`] operation for
/// operation, so results are bit-identical to the pointwise path.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    rotation_t: Matrix3<f64>,
    translation: Vector3<f64>,
    camera: CameraIntrinsics,
}

impl Projector {
    pub fn new(pose: &Pose, camera: &CameraIntrinsics) -> Self {
        Self {
            rotation_t: rotation_matrix(&pose.rotation).transpose(),
            translation: pose.translation,
            camera: *camera,
        }
    }

    pub fn project(&self, point: &SceneCoordinate) -> Result<PixelPoint, GeometryError> {
        let p = self.rotation_t * (point.coords - self.translation);
        if p.z < MIN_DEPTH {
            return Err(GeometryError::DepthTooSmall { depth: p.z });
        }
        Ok(PixelPoint::new(
            self.camera.focal * p.x / p.z + self.camera.principal_x,
            self.camera.focal * p.y / p.z + self.camera.principal_y,
        ))
    }

    /// Total residual; failed projections yield [`CLAMPED_ERROR`].
    pub fn error_clamped(&self, point: &SceneCoordinate, observed: &PixelPoint) -> f64 {
        match self.project(point) {
            Ok(projected) => (projected - observed).norm(),
            Err(_) => CLAMPED_ERROR,
        }
    }
}

/// Pixel projection together with its Jacobians.
pub struct ProjectionJacobians {
    pub pixel: PixelPoint,
    /// d pixel / d scene point (2x3).
    pub d_scene: Matrix2x3<f64>,
    /// d pixel / d pose parameters (2x6), rotation columns first.
    pub d_pose: Matrix2x6,
}

pub fn projection_jacobians(
    point: &SceneCoordinate,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Result<ProjectionJacobians, GeometryError> {
    let rot = pose.rotation_matrix();
    let rel = point.coords - pose.translation;
    let p = rot.transpose() * rel;
    if p.z < MIN_DEPTH {
        return Err(GeometryError::DepthTooSmall { depth: p.z });
    }
    let f = camera.focal;
    let iz = 1.0 / p.z;
    let pixel = PixelPoint::new(f * p.x * iz + camera.principal_x, f * p.y * iz + camera.principal_y);
    let j_proj = Matrix2x3::new(f * iz, 0.0, -f * p.x * iz * iz, 0.0, f * iz, -f * p.y * iz * iz);
    let d_scene = j_proj * rot.transpose();
    let mut d_pose = Matrix2x6::zeros();
    let derivs = rotation_matrix_derivatives(&pose.rotation);
    for (i, dr) in derivs.iter().enumerate() {
        let col = j_proj * (dr.transpose() * rel);
        d_pose.set_column(i, &col);
    }
    let d_trans = j_proj * (-rot.transpose());
    for i in 0..3 {
        d_pose.set_column(3 + i, &d_trans.column(i).into_owned());
    }
    Ok(ProjectionJacobians { pixel, d_scene, d_pose })
}

/// Scalar reprojection residual together with its Jacobian rows.
pub struct ResidualJacobians {
    pub error: f64,
    /// d error / d scene point.
    pub d_scene: Vector3<f64>,
    /// d error / d pose parameters.
    pub d_pose: Vector6<f64>,
}

pub fn reprojection_jacobians(
    point: &SceneCoordinate,
    observed: &PixelPoint,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Result<ResidualJacobians, GeometryError> {
    let j = projection_jacobians(point, pose, camera)?;
    let diff: Vector2<f64> = j.pixel - observed;
    let error = diff.norm();
    if error < NORM_KINK {
        return Err(GeometryError::NonDifferentiable);
    }
    let unit = diff / error;
    Ok(ResidualJacobians {
        error,
        d_scene: (unit.transpose() * j.d_scene).transpose(),
        d_pose: (unit.transpose() * j.d_pose).transpose(),
    })
}

/// d reprojection error / d scene point.
pub fn reprojection_jacobian_scene(
    point: &SceneCoordinate,
    observed: &PixelPoint,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    reprojection_jacobians(point, observed, pose, camera).map(|j| j.d_scene)
}

/// d reprojection error / d pose parameters.
pub fn reprojection_jacobian_pose(
    point: &SceneCoordinate,
    observed: &PixelPoint,
    pose: &Pose,
    camera: &CameraIntrinsics,
) -> Result<Vector6<f64>, GeometryError> {
    reprojection_jacobians(point, observed, pose, camera).map(|j| j.d_pose)
}

/// Angular distance between the rotations of two poses, in radians.
pub fn angular_distance(a: &Pose, b: &Pose) -> f64 {
    let c = ((a.rotation_matrix().transpose() * b.rotation_matrix()).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Pose error used throughout training and evaluation:
/// `max(rotation error in degrees, translation error in centimetres)`.
pub fn pose_loss(estimate: &Pose, ground_truth: &Pose) -> f64 {
    let rot_deg = angular_distance(estimate, ground_truth).to_degrees();
    let trans_cm = (estimate.translation - ground_truth.translation).norm() * 100.0;
    rot_deg.max(trans_cm)
}

/// Gradient of [`pose_loss`] with respect to the six parameters of
/// `estimate`. At the `max` tie the translation branch is taken; at the
/// arccos endpoints and the translation kink the gradient is zero.
pub fn pose_loss_gradient(estimate: &Pose, ground_truth: &Pose) -> Vector6<f64> {
    let rb = ground_truth.rotation_matrix();
    let c = (((estimate.rotation_matrix().transpose() * rb).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rot_deg = c.acos().to_degrees();
    let tdiff = estimate.translation - ground_truth.translation;
    let trans_norm = tdiff.norm();
    let trans_cm = trans_norm * 100.0;

    let mut grad = Vector6::zeros();
    if trans_cm >= rot_deg {
        if trans_norm > NORM_KINK {
            let g = tdiff * (100.0 / trans_norm);
            grad.fixed_rows_mut::<3>(3).copy_from(&g);
        }
    } else {
        let s = (1.0 - c * c).sqrt();
        if s > 1e-9 {
            let derivs = rotation_matrix_derivatives(&estimate.rotation);
            let factor = -0.5 * (180.0 / std::f64::consts::PI) / s;
            for (i, dr) in derivs.iter().enumerate() {
                grad[i] = factor * (dr.transpose() * rb).trace();
            }
        }
    }
    grad
}

// ======================== tests ========================

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Independent matrix-logarithm oracle: recover the scaled axis from the
    /// trace and the antisymmetric part, without going through quaternions.
    fn matrix_log_oracle(r: &Matrix3<f64>) -> Vector3<f64> {
        let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        if theta < 1e-12 {
            return Vector3::zeros();
        }
        let axis = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        ) / (2.0 * theta.sin());
        axis * theta
    }

    /// Independent projection oracle written directly from the pinhole model.
    fn project_oracle(y: &SceneCoordinate, pose: &Pose, cam: &CameraIntrinsics) -> PixelPoint {
        let r = Rotation3::from_scaled_axis(pose.rotation);
        let p = r.inverse() * (y.coords - pose.translation);
        PixelPoint::new(
            cam.focal * p.x / p.z + cam.principal_x,
            cam.focal * p.y / p.z + cam.principal_y,
        )
    }

    fn test_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 320.0, 240.0)
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(0.01..2.5);
        Pose::new(
            axis.normalize() * angle,
            Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
        )
    }

    /// A scene point guaranteed to sit well in front of the given pose.
    fn random_visible_point(rng: &mut impl Rng, pose: &Pose, cam: &CameraIntrinsics) -> SceneCoordinate {
        let pixel = PixelPoint::new(rng.gen_range(50.0..590.0), rng.gen_range(50.0..430.0));
        let depth = rng.gen_range(0.5..8.0);
        let cam_point = backproject(&pixel, depth, cam).unwrap();
        pose.transform(&cam_point)
    }

    #[test]
    fn rotation_round_trips_through_matrix_log() {
        let v = Vector3::new(0.1, -0.2, 0.3);
        let r = rotation_matrix(&v);
        let recovered = matrix_log_oracle(&r);
        assert_relative_eq!(recovered, v, epsilon = 1e-9);
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let mut rng = crate::exec::derive_rng(11, 0);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let r = pose.rotation_matrix();
            assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_matrix_small_angle_is_stable() {
        // Near the identity the trace-based log loses precision, so use the
        // antisymmetric part directly: vee(R - R^T) / 2 = sin(theta) * axis,
        // which equals the scaled axis up to O(theta^3).
        for scale in [0.0, 1e-12, 1e-9, 1e-6] {
            let v = Vector3::new(scale, -scale, scale * 0.5);
            let r = rotation_matrix(&v);
            assert!(r.iter().all(|x| x.is_finite()));
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
            let recovered = Vector3::new(
                r[(2, 1)] - r[(1, 2)],
                r[(0, 2)] - r[(2, 0)],
                r[(1, 0)] - r[(0, 1)],
            ) / 2.0;
            assert!((recovered - v).norm() <= 1e-15 + scale * scale);
        }
    }

    #[test]
    fn rotation_derivatives_match_finite_differences() {
        let mut rng = crate::exec::derive_rng(12, 0);
        let eps = 1e-7;
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let derivs = rotation_matrix_derivatives(&pose.rotation);
            for i in 0..3 {
                let mut hi = pose.rotation;
                let mut lo = pose.rotation;
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (rotation_matrix(&hi) - rotation_matrix(&lo)) / (2.0 * eps);
                assert_relative_eq!(derivs[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn rotation_derivatives_at_identity_are_skew_generators() {
        let derivs = rotation_matrix_derivatives(&Vector3::zeros());
        assert_relative_eq!(derivs[0], skew(&Vector3::x()), epsilon = 1e-12);
        assert_relative_eq!(derivs[1], skew(&Vector3::y()), epsilon = 1e-12);
        assert_relative_eq!(derivs[2], skew(&Vector3::z()), epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_oracle_on_reference_input() {
        let y = SceneCoordinate::new(1.0, 1.0, 3.0);
        let pixel = project(&y, &Pose::identity(), &test_camera()).unwrap();
        let expected = project_oracle(&y, &Pose::identity(), &test_camera());
        assert_relative_eq!(pixel.x, expected.x, epsilon = 1e-12);
        assert_relative_eq!(pixel.y, expected.y, epsilon = 1e-12);
        assert_relative_eq!(pixel.x, 500.0 / 3.0 + 320.0, epsilon = 1e-9);
        assert_relative_eq!(pixel.y, 500.0 / 3.0 + 240.0, epsilon = 1e-9);
    }

    #[test]
    fn projection_matches_oracle_on_random_inputs() {
        let mut rng = crate::exec::derive_rng(13, 0);
        let cam = test_camera();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let y = random_visible_point(&mut rng, &pose, &cam);
            let got = project(&y, &pose, &cam).unwrap();
            let expected = project_oracle(&y, &pose, &cam);
            assert_relative_eq!(got.x, expected.x, epsilon = 1e-9);
            assert_relative_eq!(got.y, expected.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn projection_rejects_points_below_depth_floor() {
        let cam = test_camera();
        let err = project(&SceneCoordinate::new(0.0, 0.0, 0.05), &Pose::identity(), &cam);
        assert!(matches!(err, Err(GeometryError::DepthTooSmall { .. })));
        let err = project(&SceneCoordinate::new(0.0, 0.0, -1.0), &Pose::identity(), &cam);
        assert!(matches!(err, Err(GeometryError::DepthTooSmall { .. })));
        assert_eq!(
            reprojection_error_clamped(
                &SceneCoordinate::new(0.0, 0.0, 0.05),
                &PixelPoint::new(320.0, 240.0),
                &Pose::identity(),
                &cam,
            ),
            CLAMPED_ERROR
        );
    }

    #[test]
    fn backprojection_round_trips() {
        let cam = test_camera();
        let p = backproject(&PixelPoint::new(320.0, 240.0), 2.0, &cam).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);

        let mut rng = crate::exec::derive_rng(14, 0);
        for _ in 0..100 {
            let pixel = PixelPoint::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let depth = rng.gen_range(0.2..20.0);
            let y = SceneCoordinate::from(backproject(&pixel, depth, &cam).unwrap());
            let back = project(&y, &Pose::identity(), &cam).unwrap();
            assert_relative_eq!(back.x, pixel.x, epsilon = 1e-9);
            assert_relative_eq!(back.y, pixel.y, epsilon = 1e-9);
        }
        assert!(matches!(
            backproject(&PixelPoint::new(0.0, 0.0), 0.0, &cam),
            Err(GeometryError::InvalidDepth { .. })
        ));
    }

    #[test]
    fn projector_is_bit_identical_to_pointwise_projection() {
        let mut rng = crate::exec::derive_rng(29, 0);
        let cam = test_camera();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let proj = Projector::new(&pose, &cam);
            let y = random_visible_point(&mut rng, &pose, &cam);
            let a = project(&y, &pose, &cam).unwrap();
            let b = proj.project(&y).unwrap();
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            let observed = PixelPoint::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let ra = reprojection_error_clamped(&y, &observed, &pose, &cam);
            let rb = proj.error_clamped(&y, &observed);
            assert_eq!(ra.to_bits(), rb.to_bits());
            // A point behind the camera clamps through both paths.
            let behind = pose.transform(&Vector3::new(0.0, 0.0, -1.0));
            assert_eq!(proj.error_clamped(&behind, &observed), CLAMPED_ERROR);
            assert!(proj.project(&behind).is_err());
        }
    }

    #[test]
    fn reprojection_error_of_exact_projection_is_zero() {
        let mut rng = crate::exec::derive_rng(15, 0);
        let cam = test_camera();
        let pose = random_pose(&mut rng);
        let y = random_visible_point(&mut rng, &pose, &cam);
        let pixel = project(&y, &pose, &cam).unwrap();
        assert!(reprojection_error(&y, &pixel, &pose, &cam).unwrap() < 1e-12);
        let shifted = PixelPoint::new(pixel.x + 2.0, pixel.y);
        assert_relative_eq!(
            reprojection_error(&y, &shifted, &pose, &cam).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn scene_jacobian_matches_central_differences() {
        let mut rng = crate::exec::derive_rng(16, 0);
        let cam = test_camera();
        let eps = 1e-6;
        for _ in 0..150 {
            let pose = random_pose(&mut rng);
            let y = random_visible_point(&mut rng, &pose, &cam);
            let observed = PixelPoint::new(
                rng.gen_range(0.0..640.0),
                rng.gen_range(0.0..480.0),
            );
            let Ok(jac) = reprojection_jacobian_scene(&y, &observed, &pose, &cam) else {
                continue;
            };
            for i in 0..3 {
                let mut hi = y;
                let mut lo = y;
                hi.coords[i] += eps;
                lo.coords[i] -= eps;
                let fd = (reprojection_error(&hi, &observed, &pose, &cam).unwrap()
                    - reprojection_error(&lo, &observed, &pose, &cam).unwrap())
                    / (2.0 * eps);
                let denom = fd.abs().max(1e-3);
                assert!(
                    ((jac[i] - fd) / denom).abs() < 1e-6,
                    "component {i}: analytic {} vs fd {}",
                    jac[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn pose_jacobian_matches_central_differences() {
        let mut rng = crate::exec::derive_rng(17, 0);
        let cam = test_camera();
        let eps = 1e-6;
        for _ in 0..150 {
            let pose = random_pose(&mut rng);
            let y = random_visible_point(&mut rng, &pose, &cam);
            let observed = PixelPoint::new(
                rng.gen_range(0.0..640.0),
                rng.gen_range(0.0..480.0),
            );
            let Ok(jac) = reprojection_jacobian_pose(&y, &observed, &pose, &cam) else {
                continue;
            };
            let v0 = pose.as_vector();
            for i in 0..6 {
                let mut hi = v0;
                let mut lo = v0;
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (reprojection_error(&y, &observed, &Pose::from_vector(&hi), &cam).unwrap()
                    - reprojection_error(&y, &observed, &Pose::from_vector(&lo), &cam).unwrap())
                    / (2.0 * eps);
                let denom = fd.abs().max(1e-3);
                assert!(
                    ((jac[i] - fd) / denom).abs() < 1e-5,
                    "component {i}: analytic {} vs fd {}",
                    jac[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn jacobians_report_the_norm_kink() {
        let cam = test_camera();
        let y = SceneCoordinate::new(0.0, 0.0, 3.0);
        let pixel = project(&y, &Pose::identity(), &cam).unwrap();
        assert_eq!(
            reprojection_jacobian_scene(&y, &pixel, &Pose::identity(), &cam),
            Err(GeometryError::NonDifferentiable)
        );
    }

    #[test]
    fn pose_loss_takes_the_larger_component() {
        // 3 degrees of rotation against 5 cm of translation.
        let angle = 3.0_f64.to_radians();
        let est = Pose::new(Vector3::new(0.0, 0.0, angle), Vector3::new(0.05, 0.0, 0.0));
        let gt = Pose::identity();
        assert_relative_eq!(pose_loss(&est, &gt), 5.0, epsilon = 1e-9);
        // 6 degrees against 2 cm: rotation dominates.
        let est = Pose::new(Vector3::new(0.0, 0.0, 2.0 * angle), Vector3::new(0.02, 0.0, 0.0));
        assert_relative_eq!(pose_loss(&est, &gt), 6.0, epsilon = 1e-9);
        assert_eq!(pose_loss(&gt, &gt), 0.0);
    }

    #[test]
    fn pose_loss_gradient_matches_central_differences() {
        let mut rng = crate::exec::derive_rng(18, 0);
        let eps = 1e-7;
        let mut checked = 0;
        for _ in 0..200 {
            let est = random_pose(&mut rng);
            let gt = random_pose(&mut rng);
            let rot_deg = angular_distance(&est, &gt).to_degrees();
            let trans_cm = (est.translation - gt.translation).norm() * 100.0;
            // Skip near-ties of the max, where the loss is not differentiable.
            if (rot_deg - trans_cm).abs() < 0.05 {
                continue;
            }
            let grad = pose_loss_gradient(&est, &gt);
            let v0 = est.as_vector();
            for i in 0..6 {
                let mut hi = v0;
                let mut lo = v0;
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (pose_loss(&Pose::from_vector(&hi), &gt)
                    - pose_loss(&Pose::from_vector(&lo), &gt))
                    / (2.0 * eps);
                let denom = fd.abs().max(1e-2);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-4,
                    "component {i}: analytic {} vs fd {}",
                    grad[i],
                    fd
                );
            }
            checked += 1;
        }
        assert!(checked > 100, "too few differentiable samples: {checked}");
    }

    #[test]
    fn canonicalization_preserves_the_rotation() {
        let mut rng = crate::exec::derive_rng(19, 0);
        for _ in 0..100 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0_f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.gen_range(0.0..12.0);
            let pose = Pose::new(axis * angle, Vector3::zeros());
            let canon = pose.canonicalized();
            assert!(canon.rotation.norm() <= std::f64::consts::PI + 1e-12);
            assert_relative_eq!(canon.rotation_matrix(), pose.rotation_matrix(), epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_vector_round_trip() {
        let pose = Pose::new(Vector3::new(0.3, -0.1, 0.2), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(Pose::from_vector(&pose.as_vector()), pose);
    }

    #[test]
    fn transform_and_inverse_are_consistent() {
        let mut rng = crate::exec::derive_rng(20, 0);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let p = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let scene = pose.transform(&p);
            let back = pose.inverse_transform(&scene);
            assert_relative_eq!(back, p, epsilon = 1e-10);
        }
    }
}
