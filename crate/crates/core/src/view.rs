//! Perspective viewport reprojection from an equirectangular panorama.
//!
//! This is the operator-side "head turn": it reads only the local panorama,
//! so changing the view never touches the network.

use thiserror::Error;

use crate::geometry::{direction_to_yaw_pitch, rotation_from_ypr, EquirectCoords, Rot3, Vec3, ViewPose};
use crate::image::{round_channel, sample_bilinear, Edge, RgbImage};
use crate::par::{for_each_row, map_indices, Exec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewError {
    #[error("viewport must be at least 1x1 (got {0}x{1})")]
    EmptyViewport(u32, u32),
    #[error("viewport fov must lie in (0, pi), got {0}")]
    InvalidFov(f64),
    #[error("panorama is empty")]
    EmptyPanorama,
}

/// Maps viewport pixels to panorama coordinates for one pose.
///
/// Yaw is applied as an additive offset on the panorama's yaw axis after the
/// pitch/roll rotation, so a pure yaw change shifts every source `u` by
/// exactly `Δyaw / 2π`.
#[derive(Debug, Clone)]
pub struct ViewMapper {
    tilt: Rot3,
    yaw: f64,
    focal: f64,
    width: u32,
    height: u32,
}

impl ViewMapper {
    pub fn new(pose: &ViewPose, fov_rad: f64, width: u32, height: u32) -> Result<Self, ViewError> {
        if width == 0 || height == 0 {
            return Err(ViewError::EmptyViewport(width, height));
        }
        if !(fov_rad > 0.0 && fov_rad < std::f64::consts::PI) {
            return Err(ViewError::InvalidFov(fov_rad));
        }
        Ok(Self {
            tilt: rotation_from_ypr(0.0, pose.pitch_rad, pose.roll_rad),
            yaw: pose.yaw_rad,
            focal: (width as f64 / 2.0) / (fov_rad / 2.0).tan(),
            width,
            height,
        })
    }

    /// Unit ray through output pixel `(px, py)` in the view frame.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Vec3 {
        let y = (px as f64 + 0.5 - self.width as f64 / 2.0) / self.focal;
        let z = (py as f64 + 0.5 - self.height as f64 / 2.0) / self.focal;
        Vec3::new(1.0, y, z).normalize()
    }

    pub fn source_coords(&self, px: u32, py: u32) -> EquirectCoords {
        let d = self.tilt * self.pixel_ray(px, py);
        let (yaw, pitch) = direction_to_yaw_pitch(&d);
        EquirectCoords::from_yaw_pitch(yaw + self.yaw, pitch)
    }
}

/// Panorama coordinates sampled for output pixel `(px, py)`.
pub fn view_source_coords(
    pose: &ViewPose,
    fov_rad: f64,
    width: u32,
    height: u32,
    px: u32,
    py: u32,
) -> Result<EquirectCoords, ViewError> {
    Ok(ViewMapper::new(pose, fov_rad, width, height)?.source_coords(px, py))
}

pub fn render_view(
    pano: &RgbImage,
    pose: &ViewPose,
    fov_rad: f64,
    width: u32,
    height: u32,
) -> Result<RgbImage, ViewError> {
    render_view_with(Exec::default(), pano, pose, fov_rad, width, height)
}

pub fn render_view_with(
    exec: Exec,
    pano: &RgbImage,
    pose: &ViewPose,
    fov_rad: f64,
    width: u32,
    height: u32,
) -> Result<RgbImage, ViewError> {
    if pano.is_empty() {
        return Err(ViewError::EmptyPanorama);
    }
    let mapper = ViewMapper::new(pose, fov_rad, width, height)?;
    let mut out = RgbImage::new(width, height);
    let row_len = out.row_len();
    let (pw, ph) = (pano.width(), pano.height());
    for_each_row(exec, out.data_mut(), row_len, |py, row| {
        for px in 0..width {
            let [x, y] = mapper.source_coords(px, py as u32).to_pixel(pw, ph);
            let s = sample_bilinear(pano, x, y, Edge::WrapX);
            let i = px as usize * 3;
            row[i] = round_channel(s[0]);
            row[i + 1] = round_channel(s[1]);
            row[i + 2] = round_channel(s[2]);
        }
    });
    Ok(out)
}

/// Per-pixel panorama `(yaw, pitch)` for one pitch, roll, fov and viewport
/// size. Any yaw reuses it, since yaw only adds to the first component; the
/// result is identical to [`render_view_with`].
#[derive(Debug, Clone)]
pub struct ViewTable {
    pitch_rad: f64,
    roll_rad: f64,
    fov_rad: f64,
    width: u32,
    height: u32,
    /// Per pixel: yaw before the view's yaw is added, and panorama `v`.
    angles: Vec<[f64; 2]>,
}

impl ViewTable {
    pub fn new(exec: Exec, pose: &ViewPose, fov_rad: f64, width: u32, height: u32) -> Result<Self, ViewError> {
        let mapper = ViewMapper::new(&ViewPose::new(0.0, pose.pitch_rad, pose.roll_rad), fov_rad, width, height)?;
        let w = width as usize;
        let angles = map_indices(exec, w * height as usize, |i| {
            let d = mapper.tilt * mapper.pixel_ray((i % w) as u32, (i / w) as u32);
            let (yaw, pitch) = direction_to_yaw_pitch(&d);
            [yaw, EquirectCoords::from_yaw_pitch(0.0, pitch).v]
        });
        Ok(Self {
            pitch_rad: pose.pitch_rad,
            roll_rad: pose.roll_rad,
            fov_rad,
            width,
            height,
            angles,
        })
    }

    /// True when the table serves `pose` at this fov and size.
    pub fn fits(&self, pose: &ViewPose, fov_rad: f64, width: u32, height: u32) -> bool {
        self.pitch_rad.to_bits() == pose.pitch_rad.to_bits()
            && self.roll_rad.to_bits() == pose.roll_rad.to_bits()
            && self.fov_rad.to_bits() == fov_rad.to_bits()
            && (self.width, self.height) == (width, height)
    }

    pub fn render(&self, exec: Exec, pano: &RgbImage, yaw_rad: f64) -> Result<RgbImage, ViewError> {
        if pano.is_empty() {
            return Err(ViewError::EmptyPanorama);
        }
        let mut out = RgbImage::new(self.width, self.height);
        let row_len = out.row_len();
        let (pw, ph) = (pano.width(), pano.height());
        let w = self.width as usize;
        for_each_row(exec, out.data_mut(), row_len, |py, row| {
            for (px, a) in self.angles[py * w..(py + 1) * w].iter().enumerate() {
                let uv = EquirectCoords {
                    u: EquirectCoords::from_yaw_pitch(a[0] + yaw_rad, 0.0).u,
                    v: a[1],
                };
                let [x, y] = uv.to_pixel(pw, ph);
                let s = sample_bilinear(pano, x, y, Edge::WrapX);
                let i = px * 3;
                row[i] = round_channel(s[0]);
                row[i + 1] = round_channel(s[1]);
                row[i + 2] = round_channel(s[2]);
            }
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn gradient_pano(w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x, y, [(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn zero_sized_viewport_rejected() {
        let pano = gradient_pano(64, 32);
        assert_eq!(
            render_view(&pano, &ViewPose::default(), 1.0, 0, 10).unwrap_err(),
            ViewError::EmptyViewport(0, 10)
        );
        assert!(render_view(&pano, &ViewPose::default(), PI, 10, 10).is_err());
    }

    #[test]
    fn identity_pose_samples_center() {
        let pano = gradient_pano(360, 180);
        // Tiny fov: every output pixel samples within a pixel of the center.
        let c = view_source_coords(&ViewPose::default(), 1e-3, 3, 3, 1, 1).unwrap();
        assert!((c.u - 0.5).abs() < 1e-12 && (c.v - 0.5).abs() < 1e-12);
        let out = render_view(&pano, &ViewPose::default(), 1e-3, 3, 3).unwrap();
        let [x, y] = c.to_pixel(360, 180);
        assert_eq!(out.pixel(1, 1), crate::image::sample_bilinear_u8(&pano, x, y, Edge::WrapX));
    }

    #[test]
    fn yaw_shift_is_u_shift() {
        let base = ViewPose::new(0.0, 0.2, 0.1);
        for delta in [0.3, -1.2, 2.9] {
            let turned = ViewPose { yaw_rad: delta, ..base };
            let a = view_source_coords(&base, 1.2, 40, 30, 7, 21).unwrap();
            let b = view_source_coords(&turned, 1.2, 40, 30, 7, 21).unwrap();
            let du = (b.u - a.u - delta / TAU).rem_euclid(1.0);
            assert!(du.min(1.0 - du) < 1e-12);
            assert_eq!(a.v, b.v);
        }
    }

    #[test]
    fn roll_pi_rotates_output_180() {
        let pano = gradient_pano(256, 128);
        // Roll acts first on the view ray, (1, y, z) -> (1, -y, -z), so the
        // symmetry holds for any pitch.
        let a0 = render_view(&pano, &ViewPose::new(0.4, 0.1, 0.0), 1.0, 31, 20).unwrap();
        let b0 = render_view(&pano, &ViewPose::new(0.4, 0.1, PI), 1.0, 31, 20).unwrap();
        for y in 0..20 {
            for x in 0..31 {
                let p = a0.pixel(x, y);
                let q = b0.pixel(30 - x, 19 - y);
                for c in 0..3 {
                    assert!((p[c] as i32 - q[c] as i32).abs() <= 1, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn sequential_matches_parallel() {
        let pano = gradient_pano(128, 64);
        let pose = ViewPose::new(1.0, -0.3, 0.2);
        assert_eq!(
            render_view_with(Exec::Sequential, &pano, &pose, 1.3, 50, 40).unwrap(),
            render_view_with(Exec::default(), &pano, &pose, 1.3, 50, 40).unwrap()
        );
    }

    #[test]
    fn table_render_matches_direct_render() {
        let pano = gradient_pano(256, 128);
        let fov = 1.2;
        for (pitch, roll) in [(0.0, 0.0), (0.4, -0.1), (-1.2, 0.3)] {
            let table = ViewTable::new(Exec::Sequential, &ViewPose::new(0.0, pitch, roll), fov, 48, 30).unwrap();
            for yaw in [0.0, 1.0, -2.5, 7.0] {
                let pose = ViewPose::new(yaw, pitch, roll);
                assert!(table.fits(&pose, fov, 48, 30));
                let direct = render_view_with(Exec::Sequential, &pano, &pose, fov, 48, 30).unwrap();
                assert_eq!(table.render(Exec::default(), &pano, pose.yaw_rad).unwrap(), direct);
            }
        }
        let table = ViewTable::new(Exec::Sequential, &ViewPose::default(), fov, 48, 30).unwrap();
        assert!(!table.fits(&ViewPose::new(0.0, 0.1, 0.0), fov, 48, 30));
        assert!(!table.fits(&ViewPose::default(), fov, 48, 31));
    }
}
