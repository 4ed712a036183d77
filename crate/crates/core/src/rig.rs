//! Six-camera ring calibration and its JSON file format.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraPose, FisheyeIntrinsics, ProjectionError, Rot3};

pub const RIG_CAMERAS: usize = 6;
/// Per-camera field of view of the ring.
pub const DEFAULT_FOV_RAD: f64 = 2.0 * PI / 3.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("rig needs exactly {RIG_CAMERAS} cameras, got {0}")]
    CameraCount(usize),
    #[error("camera {index}: {source}")]
    Intrinsics { index: usize, source: ProjectionError },
    #[error("calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigCamera {
    pub intrinsics: FisheyeIntrinsics,
    pub pose: CameraPose,
}

impl RigCamera {
    /// Camera frame → rig frame.
    pub fn rotation(&self) -> Rot3 {
        self.pose.rotation()
    }
}

/// Small per-camera rotation corrections `(yaw, pitch, roll)` in radians,
/// acting on the rig→camera mapping: the corrected rig→camera rotation is
/// `R(δ) · R_cal⁻¹`. A camera whose true yaw exceeds its calibrated yaw by
/// `ε` gets a yaw correction of `-ε`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeamAdjustment {
    pub corrections: [[f64; 3]; RIG_CAMERAS],
}

impl SeamAdjustment {
    pub const SANITY_BOUND_RAD: f64 = 0.1;

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn within_bounds(&self) -> bool {
        self.corrections
            .iter()
            .flatten()
            .all(|c| c.abs() < Self::SANITY_BOUND_RAD)
    }

    pub fn max_abs(&self) -> f64 {
        self.corrections.iter().flatten().fold(0.0, |m, c| m.max(c.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigCalibration {
    pub cameras: Vec<RigCamera>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    yaw_deg: f64,
    pitch_deg: f64,
    roll_deg: f64,
    f_px_per_rad: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    fov_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct CalibrationRecord {
    cameras: Vec<CameraRecord>,
}

impl RigCalibration {
    pub fn new(cameras: Vec<RigCamera>) -> Result<Self, CalibrationError> {
        let c = Self { cameras };
        c.validate()?;
        Ok(c)
    }

    /// Evenly spaced ring: camera `k` at yaw `k·60°`, level, identical
    /// centered intrinsics.
    pub fn default_ring(f_px_per_rad: f64) -> Self {
        let intr = FisheyeIntrinsics::centered(f_px_per_rad, DEFAULT_FOV_RAD);
        Self {
            cameras: (0..RIG_CAMERAS)
                .map(|k| RigCamera {
                    intrinsics: intr,
                    pose: CameraPose::new(k as f64 * PI / 3.0, 0.0, 0.0),
                })
                .collect(),
        }
    }

    /// Focal length giving the ring roughly the angular resolution of a
    /// `pano_width`-wide equirectangular panorama.
    pub fn for_panorama_width(pano_width: u32) -> Self {
        Self::default_ring(pano_width as f64 / (2.0 * PI))
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.cameras.len() != RIG_CAMERAS {
            return Err(CalibrationError::CameraCount(self.cameras.len()));
        }
        for (index, cam) in self.cameras.iter().enumerate() {
            cam.intrinsics
                .validate()
                .map_err(|source| CalibrationError::Intrinsics { index, source })?;
        }
        Ok(())
    }

    pub fn with_adjustment(&self, adj: &SeamAdjustment) -> Self {
        let cameras = self
            .cameras
            .iter()
            .zip(adj.corrections.iter())
            .map(|(cam, d)| {
                let fix = crate::geometry::rotation_from_ypr(d[0], d[1], d[2]);
                let corrected = cam.rotation() * fix.inverse();
                RigCamera {
                    intrinsics: cam.intrinsics,
                    pose: CameraPose::from_rotation(&corrected),
                }
            })
            .collect();
        Self { cameras }
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let rec: CalibrationRecord = serde_json::from_str(text)?;
        let cameras = rec
            .cameras
            .into_iter()
            .map(|c| RigCamera {
                intrinsics: FisheyeIntrinsics {
                    width_px: c.width,
                    height_px: c.height,
                    f_px_per_rad: c.f_px_per_rad,
                    cx_px: c.cx,
                    cy_px: c.cy,
                    fov_rad: c.fov_deg.to_radians(),
                },
                pose: CameraPose::new(
                    c.yaw_deg.to_radians(),
                    c.pitch_deg.to_radians(),
                    c.roll_deg.to_radians(),
                ),
            })
            .collect();
        Self::new(cameras)
    }

    pub fn to_json(&self) -> String {
        let rec = CalibrationRecord {
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraRecord {
                    yaw_deg: c.pose.yaw_rad.to_degrees(),
                    pitch_deg: c.pose.pitch_rad.to_degrees(),
                    roll_deg: c.pose.roll_rad.to_degrees(),
                    f_px_per_rad: c.intrinsics.f_px_per_rad,
                    cx: c.intrinsics.cx_px,
                    cy: c.intrinsics.cy_px,
                    width: c.intrinsics.width_px,
                    height: c.intrinsics.height_px,
                    fov_deg: c.intrinsics.fov_rad.to_degrees(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&rec).expect("calibration serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
