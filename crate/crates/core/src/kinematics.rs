//! Differential-drive chassis modeled as a unicycle, integrated exactly over
//! each step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::normalize_angle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("command has non-finite values (v={0}, w={1})")]
    NonFiniteCommand(f64, f64),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

/// A motion command as delivered to the chassis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub linear_mps: f64,
    pub angular_radps: f64,
    pub estop: bool,
    /// Passthrough bytes for attached equipment (e.g. an arm); logged only.
    pub opaque: Vec<u8>,
}

impl ControlCommand {
    pub fn drive(linear_mps: f64, angular_radps: f64) -> Self {
        Self {
            linear_mps,
            angular_radps,
            ..Default::default()
        }
    }

    pub fn estop() -> Self {
        Self {
            estop: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicLimits {
    pub max_linear_mps: f64,
    pub max_angular_radps: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        Self {
            max_linear_mps: 3.0,
            max_angular_radps: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceState {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub linear_mps: f64,
    pub angular_radps: f64,
    pub sim_time_ns: u64,
}

impl DeviceState {
    /// Latches a command as the current velocity, clamped to `limits`.
    /// E-stop zeroes both speeds.
    pub fn apply_command(&mut self, cmd: &ControlCommand, limits: &KinematicLimits) -> Result<(), KinematicsError> {
        if !(cmd.linear_mps.is_finite() && cmd.angular_radps.is_finite()) {
            return Err(KinematicsError::NonFiniteCommand(cmd.linear_mps, cmd.angular_radps));
        }
        if cmd.estop {
            self.linear_mps = 0.0;
            self.angular_radps = 0.0;
        } else {
            self.linear_mps = cmd.linear_mps.clamp(-limits.max_linear_mps, limits.max_linear_mps);
            self.angular_radps = cmd.angular_radps.clamp(-limits.max_angular_radps, limits.max_angular_radps);
        }
        Ok(())
    }

    /// Advances pose by `dt_s` under the current velocities.
    pub fn advance(&mut self, dt_s: f64) -> Result<(), KinematicsError> {
        if !(dt_s > 0.0 && dt_s.is_finite()) {
            return Err(KinematicsError::InvalidStep(dt_s));
        }
        let (v, w, th) = (self.linear_mps, self.angular_radps, self.heading_rad);
        if w.abs() < 1e-9 {
            self.x_m += v * dt_s * th.cos();
            self.y_m += v * dt_s * th.sin();
        } else {
            let th1 = th + w * dt_s;
            self.x_m += v / w * (th1.sin() - th.sin());
            self.y_m -= v / w * (th1.cos() - th.cos());
        }
        self.heading_rad = normalize_angle(th + w * dt_s);
        self.sim_time_ns += (dt_s * 1e9).round() as u64;
        Ok(())
    }
}

/// Applies `cmd` then integrates for `dt_s`. A rejected command leaves the
/// state untouched.
pub fn step_kinematics(
    state: &DeviceState,
    cmd: &ControlCommand,
    dt_s: f64,
    limits: &KinematicLimits,
) -> Result<DeviceState, KinematicsError> {
    let mut next = *state;
    next.apply_command(cmd, limits)?;
    next.advance(dt_s)?;
    Ok(next)
}
