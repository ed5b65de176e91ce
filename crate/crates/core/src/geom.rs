//! Rigid-body primitives shared by every other module.
//!
//! Times are always seconds relative to mid-exposure (`eta = 0`).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type UnitQuat = UnitQuaternion<f64>;

/// Below this rotation angle the quaternion exponential uses a Taylor branch.
const SMALL_ANGLE: f64 = 1e-8;

/// Rotates `v` by `q` (`q ⊗ v ⊗ q⁻¹`).
#[inline]
pub fn rotate_point(q: &UnitQuat, v: &Vec3) -> Vec3 {
    q.transform_vector(v)
}

/// Quaternion exponential of the pure quaternion `(0, half_axis_angle)`.
///
/// `exp((0, a)) = (cos|a|, sin|a| · a/|a|)`; the small-angle branch keeps the
/// `sin|a|/|a|` factor finite at rest.
pub fn quat_exp(half_axis_angle: &Vec3) -> UnitQuat {
    let theta = half_axis_angle.norm();
    let (w, k) = if theta < SMALL_ANGLE {
        (1.0 - 0.5 * theta * theta, 1.0 - theta * theta / 6.0)
    } else {
        (theta.cos(), theta.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(
        w,
        k * half_axis_angle.x,
        k * half_axis_angle.y,
        k * half_axis_angle.z,
    ))
}

/// Skew-symmetric cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(a: &Vec3) -> Mat3 {
    Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: UnitQuat,
    pub translation: Vec3,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Local (body) coordinates to world coordinates.
    #[inline]
    pub fn transform_point(&self, local: &Vec3) -> Vec3 {
        rotate_point(&self.rotation, local) + self.translation
    }

    /// World coordinates to local (body) coordinates.
    #[inline]
    pub fn inverse_transform_point(&self, world: &Vec3) -> Vec3 {
        self.rotation.inverse_transform_vector(&(world - self.translation))
    }
}

/// Constant-velocity motion around the mid-exposure pose.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionState {
    pub pose_mid: RigidPose,
    /// World-frame linear velocity (m/s).
    pub linear_velocity: Vec3,
    /// World-frame angular velocity (rad/s).
    pub angular_velocity: Vec3,
}

impl MotionState {
    pub fn stationary(pose_mid: RigidPose) -> Self {
        Self {
            pose_mid,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
        }
    }

    pub fn is_stationary(&self) -> bool {
        self.linear_velocity == Vec3::zeros() && self.angular_velocity == Vec3::zeros()
    }
}

/// Pose at `eta` seconds from mid-exposure:
/// `q(eta) = exp(w·eta/2) ⊗ q_mid`, `t(eta) = t_mid + eta·v`.
pub fn pose_at_time(m: &MotionState, eta: f64) -> RigidPose {
    if eta == 0.0 {
        return m.pose_mid;
    }
    let dq = quat_exp(&(m.angular_velocity * (0.5 * eta)));
    RigidPose {
        rotation: dq * m.pose_mid.rotation,
        translation: m.pose_mid.translation + m.linear_velocity * eta,
    }
}

/// World position of a point on a rigid actor at `eta`: `x_mid + (v_a + w_a × r)·eta`.
#[inline]
pub fn point_at_time(x_mid: &Vec3, v_a: &Vec3, w_a: &Vec3, r: &Vec3, eta: f64) -> Vec3 {
    x_mid + (v_a + w_a.cross(r)) * eta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_unit_quat(rng: &mut ChaCha8Rng) -> UnitQuat {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        UnitQuaternion::new_normalize(q)
    }

    /// Rodrigues' formula, independent of the quaternion path.
    fn rotation_matrix_exp(axis_angle: &Vec3) -> Mat3 {
        let theta = axis_angle.norm();
        if theta == 0.0 {
            return Mat3::identity();
        }
        let k = skew(&(axis_angle / theta));
        Mat3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
    }

    #[test]
    fn rotate_identity_and_quarter_turn() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(rotate_point(&UnitQuat::identity(), &v), v);
        let q = UnitQuat::from_axis_angle(&Vec3::z_axis(), PI / 2.0);
        let r = rotate_point(&q, &Vec3::x());
        assert_relative_eq!(r, Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = random_unit_quat(&mut rng);
            assert!((q.norm() - 1.0).abs() < 1e-9);
            let v = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            assert!((rotate_point(&q, &v).norm() - v.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_at_zero_is_exact() {
        let m = MotionState {
            pose_mid: RigidPose::new(
                UnitQuat::from_euler_angles(0.1, 0.2, 0.3),
                Vec3::new(1.0, -2.0, 0.5),
            ),
            linear_velocity: Vec3::new(3.0, 1.0, 0.0),
            angular_velocity: Vec3::new(0.0, 0.2, 1.0),
        };
        assert_eq!(pose_at_time(&m, 0.0), m.pose_mid);
    }

    #[test]
    fn spin_half_second_is_quarter_turn() {
        let m = MotionState {
            pose_mid: RigidPose::identity(),
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::new(0.0, 0.0, PI),
        };
        let p = pose_at_time(&m, 0.5);
        let expected = rotation_matrix_exp(&Vec3::new(0.0, 0.0, PI / 2.0));
        assert_relative_eq!(
            p.rotation.to_rotation_matrix().into_inner(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn linear_motion_translation() {
        let m = MotionState {
            pose_mid: RigidPose::identity(),
            linear_velocity: Vec3::new(1.0, 0.0, 0.0),
            angular_velocity: Vec3::zeros(),
        };
        assert_relative_eq!(
            pose_at_time(&m, 0.1).translation,
            Vec3::new(0.1, 0.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn translation_is_linear_in_eta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = MotionState {
                pose_mid: RigidPose::new(random_unit_quat(&mut rng), Vec3::new(0.5, 0.25, -1.0)),
                linear_velocity: Vec3::new(0.5, -2.0, 4.0),
                angular_velocity: Vec3::new(0.1, 0.0, 0.3),
            };
            // Dyadic offsets keep every product exactly representable.
            let a = rng.random_range(-64..64) as f64 / 128.0;
            let b = rng.random_range(-64..64) as f64 / 128.0;
            let lhs = pose_at_time(&m, a + b).translation;
            let rhs = pose_at_time(&m, a).translation + m.linear_velocity * b;
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn quat_exp_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let w = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let eta = rng.random_range(-1.0..1.0);
            let scaled = w * eta;
            if scaled.norm() >= PI {
                continue;
            }
            let q = quat_exp(&(scaled * 0.5));
            assert_relative_eq!(
                q.to_rotation_matrix().into_inner(),
                rotation_matrix_exp(&scaled),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn quat_exp_small_angle_branch_is_continuous() {
        let a = Vec3::new(3e-9, -2e-9, 1e-9);
        let q = quat_exp(&a);
        assert!((q.norm() - 1.0).abs() < 1e-15);
        assert_relative_eq!(q.imag(), a, epsilon = 1e-20);
        assert_eq!(quat_exp(&Vec3::zeros()), UnitQuat::identity());
    }

    #[test]
    fn actor_point_motion() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        let z = Vec3::zeros();
        assert_eq!(point_at_time(&x, &Vec3::x(), &Vec3::z(), &Vec3::x(), 0.0), x);
        assert_eq!(point_at_time(&x, &z, &z, &Vec3::x(), 5.0), x);
        let p = point_at_time(&x, &z, &Vec3::z(), &Vec3::x(), 1.0);
        assert_relative_eq!(p, x + Vec3::y(), epsilon = 1e-15);
    }
}
