//! Geometric mappings between fisheye images, the equirectangular panorama and
//! perspective viewports.
//!
//! Frame convention (rig, camera, view and world alike): `x` forward / optical
//! axis, `y` right, `z` down. Yaw is positive turning right, pitch positive
//! nose up, roll positive right side down. Image `x` grows along `+y`, image
//! `y` grows along `+z`, so nothing is mirrored.
//!
//! Pixel coordinates put pixel centers on integers: pixel `(0, 0)` spans
//! `[-0.5, 0.5)²`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Rot3 = Rotation3<f64>;

/// Allowed deviation of a direction's norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("invalid fisheye intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// `Rz(yaw) · Ry(pitch) · Rx(roll)`: maps vectors from the posed body frame
/// into its parent frame.
pub fn rotation_from_ypr(yaw: f64, pitch: f64, roll: f64) -> Rot3 {
    Rot3::from_euler_angles(roll, pitch, yaw)
}

/// Inverse of [`rotation_from_ypr`], with angles normalized.
pub fn ypr_from_rotation(r: &Rot3) -> (f64, f64, f64) {
    let (roll, pitch, yaw) = r.euler_angles();
    (normalize_angle(yaw), pitch, normalize_angle(roll))
}

/// Equidistant fisheye camera model (`r = f·θ`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisheyeIntrinsics {
    pub width_px: u32,
    pub height_px: u32,
    pub f_px_per_rad: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    /// Full cone angle of the lens.
    pub fov_rad: f64,
}

impl FisheyeIntrinsics {
    pub fn new(
        width_px: u32,
        height_px: u32,
        f_px_per_rad: f64,
        cx_px: f64,
        cy_px: f64,
        fov_rad: f64,
    ) -> Result<Self, ProjectionError> {
        let intr = Self {
            width_px,
            height_px,
            f_px_per_rad,
            cx_px,
            cy_px,
            fov_rad,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Smallest square image holding the image circle, principal point centered.
    pub fn centered(f_px_per_rad: f64, fov_rad: f64) -> Self {
        let radius = f_px_per_rad * fov_rad / 2.0;
        let size = 2 * radius.ceil() as u32 + 2;
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            width_px: size,
            height_px: size,
            f_px_per_rad,
            cx_px: c,
            cy_px: c,
            fov_rad,
        }
    }

    pub fn circle_radius(&self) -> f64 {
        self.f_px_per_rad * self.fov_rad / 2.0
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        let bad = |m: &str| Err(ProjectionError::InvalidIntrinsics(m.to_string()));
        if !(self.f_px_per_rad.is_finite() && self.f_px_per_rad > 0.0) {
            return bad("focal length must be positive");
        }
        if !(self.fov_rad > 0.0 && self.fov_rad <= PI) {
            return bad("fov must lie in (0, pi]");
        }
        if self.width_px == 0 || self.height_px == 0 {
            return bad("image must be non-empty");
        }
        let r = self.circle_radius();
        // Pixel extents are [-0.5, w - 0.5].
        let fits = self.cx_px - r >= -0.5
            && self.cy_px - r >= -0.5
            && self.cx_px + r <= self.width_px as f64 - 0.5
            && self.cy_px + r <= self.height_px as f64 - 0.5;
        if !fits {
            return bad("image circle exceeds image bounds");
        }
        Ok(())
    }
}

fn check_unit(d: &Vec3) -> Result<(), ProjectionError> {
    let n = d.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
        return Err(ProjectionError::NonUnitDirection(n));
    }
    Ok(())
}

/// Projects a unit direction in the camera frame to pixel coordinates.
///
/// `Ok(None)` is the out-of-field marker: the ray is more than half the FOV
/// away from the optical axis.
pub fn fisheye_project(
    direction: &Vec3,
    intr: &FisheyeIntrinsics,
) -> Result<Option<[f64; 2]>, ProjectionError> {
    check_unit(direction)?;
    Ok(project_unchecked(direction, intr))
}

#[inline]
pub(crate) fn project_unchecked(d: &Vec3, intr: &FisheyeIntrinsics) -> Option<[f64; 2]> {
    let rho = (d.y * d.y + d.z * d.z).sqrt();
    let theta = rho.atan2(d.x);
    if theta > intr.fov_rad / 2.0 {
        return None;
    }
    if rho == 0.0 {
        return Some([intr.cx_px, intr.cy_px]);
    }
    let r = intr.f_px_per_rad * theta;
    Some([intr.cx_px + r * d.y / rho, intr.cy_px + r * d.z / rho])
}

/// Angle between a camera-frame direction and the optical axis.
#[inline]
pub fn off_axis_angle(d: &Vec3) -> f64 {
    (d.y * d.y + d.z * d.z).sqrt().atan2(d.x)
}

/// Back-projects a pixel to a unit direction in the camera frame, or `None`
/// outside the image circle.
pub fn fisheye_unproject(pixel: [f64; 2], intr: &FisheyeIntrinsics) -> Option<Vec3> {
    let dx = pixel[0] - intr.cx_px;
    let dy = pixel[1] - intr.cy_px;
    let r = dx.hypot(dy);
    if r > intr.circle_radius() {
        return None;
    }
    if r == 0.0 {
        return Some(Vec3::x());
    }
    let theta = r / intr.f_px_per_rad;
    let (s, c) = theta.sin_cos();
    Some(Vec3::new(c, s * dx / r, s * dy / r))
}

/// Normalized panorama coordinates: `u ∈ [0, 1)` spans yaw `[-π, π)`, `v ∈
/// [0, 1]` spans pitch `+π/2` (top) to `-π/2` (bottom).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquirectCoords {
    pub u: f64,
    pub v: f64,
}

/// `t.rem_euclid(1.0)` without the libm call; equal for every finite `t`.
#[inline]
fn wrap_unit(t: f64) -> f64 {
    t - crate::image::floor_i64(t) as f64
}

impl EquirectCoords {
    pub fn from_yaw_pitch(yaw: f64, pitch: f64) -> Self {
        let mut u = wrap_unit((yaw + PI) / TAU);
        if u >= 1.0 {
            u = 0.0;
        }
        Self {
            u,
            v: (FRAC_PI_2 - pitch) / PI,
        }
    }

    pub fn yaw(&self) -> f64 {
        self.u * TAU - PI
    }

    pub fn pitch(&self) -> f64 {
        FRAC_PI_2 - self.v * PI
    }

    /// Pixel coordinates in a `width × height` panorama.
    pub fn to_pixel(&self, width: u32, height: u32) -> [f64; 2] {
        [
            self.u * width as f64 - 0.5,
            self.v * height as f64 - 0.5,
        ]
    }

    pub fn from_pixel(x: f64, y: f64, width: u32, height: u32) -> Self {
        Self {
            u: wrap_unit((x + 0.5) / width as f64),
            v: (y + 0.5) / height as f64,
        }
    }
}

pub fn yaw_pitch_to_direction(yaw: f64, pitch: f64) -> Vec3 {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    Vec3::new(cp * cy, cp * sy, -sp)
}

/// `(yaw, pitch)` of a direction; yaw is 0 at the poles.
#[inline]
pub fn direction_to_yaw_pitch(d: &Vec3) -> (f64, f64) {
    let horiz = d.x.hypot(d.y);
    let pitch = (-d.z).atan2(horiz);
    let yaw = if horiz <= 1e-12 * d.norm() { -PI } else { d.y.atan2(d.x) };
    (yaw, pitch)
}

pub fn equirect_to_direction(uv: EquirectCoords) -> Vec3 {
    yaw_pitch_to_direction(uv.yaw(), uv.pitch())
}

/// Inverse of [`equirect_to_direction`]. At the poles `u` is 0.
pub fn direction_to_equirect(d: &Vec3) -> EquirectCoords {
    let (yaw, pitch) = direction_to_yaw_pitch(d);
    EquirectCoords::from_yaw_pitch(yaw, pitch)
}

/// Orientation of one camera in the rig.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraPose {
    pub yaw_rad: f64,
    pub pitch_rad: f64,
    pub roll_rad: f64,
}

impl CameraPose {
    pub fn new(yaw_rad: f64, pitch_rad: f64, roll_rad: f64) -> Self {
        Self {
            yaw_rad: normalize_angle(yaw_rad),
            pitch_rad,
            roll_rad: normalize_angle(roll_rad),
        }
    }

    /// Camera frame → rig frame.
    pub fn rotation(&self) -> Rot3 {
        rotation_from_ypr(self.yaw_rad, self.pitch_rad, self.roll_rad)
    }

    pub fn from_rotation(r: &Rot3) -> Self {
        let (y, p, ro) = ypr_from_rotation(r);
        Self::new(y, p, ro)
    }
}

/// Operator view orientation in the rig frame. Pitch is clamped to `[-π/2, π/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewPose {
    pub yaw_rad: f64,
    pub pitch_rad: f64,
    pub roll_rad: f64,
}

impl ViewPose {
    pub fn new(yaw_rad: f64, pitch_rad: f64, roll_rad: f64) -> Self {
        Self {
            yaw_rad: normalize_angle(yaw_rad),
            pitch_rad: pitch_rad.clamp(-FRAC_PI_2, FRAC_PI_2),
            roll_rad: normalize_angle(roll_rad),
        }
    }

    pub fn rotation(&self) -> Rot3 {
        rotation_from_ypr(self.yaw_rad, self.pitch_rad, self.roll_rad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr200() -> FisheyeIntrinsics {
        FisheyeIntrinsics::centered(200.0, 2.0 * PI / 3.0)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let intr = intr200();
        let p = fisheye_project(&Vec3::x(), &intr).unwrap().unwrap();
        assert_eq!(p, [intr.cx_px, intr.cy_px]);
        let d = fisheye_unproject([intr.cx_px, intr.cy_px], &intr).unwrap();
        assert_eq!(d, Vec3::x());
    }

    #[test]
    fn equidistant_radius() {
        let intr = intr200();
        let theta = PI / 3.0;
        let d = Vec3::new(theta.cos(), theta.sin(), 0.0);
        let p = fisheye_project(&d, &intr).unwrap().unwrap();
        assert!((p[0] - intr.cx_px - 200.0 * PI / 3.0).abs() < 1e-9);
        assert!((p[0] - intr.cx_px - 209.4395).abs() < 1e-4);
        assert!((p[1] - intr.cy_px).abs() < 1e-12);
    }

    #[test]
    fn beyond_half_fov_is_out_of_field() {
        let intr = intr200();
        let t = 70f64.to_radians();
        let d = Vec3::new(t.cos(), 0.0, t.sin());
        assert_eq!(fisheye_project(&d, &intr).unwrap(), None);
    }

    #[test]
    fn non_unit_direction_rejected() {
        let err = fisheye_project(&Vec3::new(2.0, 0.0, 0.0), &intr200()).unwrap_err();
        assert!(matches!(err, ProjectionError::NonUnitDirection(_)));
    }

    #[test]
    fn corner_pixel_is_out_of_field() {
        assert!(fisheye_unproject([0.0, 0.0], &intr200()).is_none());
    }

    #[test]
    fn unproject_round_trip_random_pixels() {
        let intr = intr200();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r_max = intr.circle_radius();
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let r = r_max * rng.random::<f64>().sqrt();
            let a = rng.random::<f64>() * TAU;
            let p = [intr.cx_px + r * a.cos(), intr.cy_px + r * a.sin()];
            let d = fisheye_unproject(p, &intr).unwrap();
            let q = fisheye_project(&d, &intr).unwrap().unwrap();
            max_err = max_err.max((q[0] - p[0]).hypot(q[1] - p[1]));
        }
        assert!(max_err < 1e-6, "max round-trip error {max_err}");
    }

    #[test]
    fn intrinsics_validation() {
        assert!(FisheyeIntrinsics::new(100, 100, 0.0, 50.0, 50.0, 1.0).is_err());
        assert!(FisheyeIntrinsics::new(100, 100, 100.0, 49.5, 49.5, 2.0).is_err());
        assert!(FisheyeIntrinsics::new(100, 100, 40.0, 49.5, 49.5, 2.0).is_ok());
        assert!(FisheyeIntrinsics::new(100, 100, 10.0, 49.5, 49.5, 4.0).is_err());
    }

    #[test]
    fn panorama_center_and_pole() {
        let d = equirect_to_direction(EquirectCoords { u: 0.5, v: 0.5 });
        assert!((d - Vec3::x()).norm() < 1e-15);
        for u in [0.0, 0.25, 0.7] {
            let z = equirect_to_direction(EquirectCoords { u, v: 0.0 });
            assert!((z - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
            assert_eq!(direction_to_equirect(&z).u, 0.0);
        }
    }

    #[test]
    fn equirect_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let uv = EquirectCoords {
                u: rng.random::<f64>(),
                v: 1e-5 + (1.0 - 2e-5) * rng.random::<f64>(),
            };
            let d = equirect_to_direction(uv);
            let d2 = equirect_to_direction(direction_to_equirect(&d));
            worst = worst.max(d.cross(&d2).norm().atan2(d.dot(&d2)));
        }
        assert!(worst < 1e-9, "angular error {worst}");
    }

    #[test]
    fn yaw_right_moves_u_right() {
        let right = yaw_pitch_to_direction(0.3, 0.0);
        assert!(right.y > 0.0);
        assert!(direction_to_equirect(&right).u > 0.5);
        let up = yaw_pitch_to_direction(0.0, 0.3);
        assert!(up.z < 0.0);
        let r = rotation_from_ypr(0.0, 0.3, 0.0);
        assert!(((r * Vec3::x()) - up).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn wrap_unit_equals_rem_euclid(t in -1e6f64..1e6, tiny in -1e-300f64..1e-300) {
            for x in [t, tiny, t.floor(), -t.floor()] {
                prop_assert_eq!(wrap_unit(x), x.rem_euclid(1.0));
            }
        }

        #[test]
        fn equirect_preserves_angles(
            y1 in -3.1f64..3.1, p1 in -1.5f64..1.5,
            y2 in -3.1f64..3.1, p2 in -1.5f64..1.5,
        ) {
            let a = yaw_pitch_to_direction(y1, p1);
            let b = yaw_pitch_to_direction(y2, p2);
            let a2 = equirect_to_direction(direction_to_equirect(&a));
            let b2 = equirect_to_direction(direction_to_equirect(&b));
            let ang = |x: &Vec3, y: &Vec3| x.cross(y).norm().atan2(x.dot(y));
            prop_assert!((ang(&a, &b) - ang(&a2, &b2)).abs() < 1e-9);
        }

        #[test]
        fn ypr_round_trip(y in -3.1f64..3.1, p in -1.5f64..1.5, r in -3.1f64..3.1) {
            let (y2, p2, r2) = ypr_from_rotation(&rotation_from_ypr(y, p, r));
            prop_assert!((y - y2).abs() < 1e-9 && (p - p2).abs() < 1e-9 && (r - r2).abs() < 1e-9);
        }
    }
}
