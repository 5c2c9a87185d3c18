//! Frame chain from the local ENU frame down to the sky-pointing camera.
//!
//! The chain is: ENU —(yaw offset ψ)→ local world —(body pose)→ body/IMU
//! —(extrinsic)→ sky camera. The yaw convention is that ψ rotates the
//! world frame into ENU about the up axis, so `R_w→n = Rot_up(ψ)` and
//! `R_n→w = Rot_up(ψ)ᵀ`; the convention is pinned by the round-trip
//! tests below rather than by prose.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geodesy::EnuCoord;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("direction vector has zero norm")]
    ZeroVector,
}

/// Per-epoch pose of the body (IMU) frame in the local world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyPose {
    pub r_body_to_world: Matrix3<f64>,
    pub t_body_in_world: Vector3<f64>,
}

impl BodyPose {
    pub fn identity() -> Self {
        Self {
            r_body_to_world: Matrix3::identity(),
            t_body_in_world: Vector3::zeros(),
        }
    }
}

/// Full ENU → sky-camera transform chain for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameChain {
    /// Yaw offset ψ between the local world frame and ENU, radians.
    pub yaw_offset: f64,
    /// Anchor position expressed in the local world frame, meters.
    /// Zero when the anchor is chosen as the world origin.
    pub anchor_world: Vector3<f64>,
    /// Extrinsic rotation taking sky-camera vectors into the body frame.
    pub r_sky_to_body: Matrix3<f64>,
    /// Body pose for the current epoch.
    pub body_pose: BodyPose,
    /// Antenna→camera lever arm in the sky-camera frame, meters.
    /// Reserved; defaults to zero (the two are mounted centimeters apart).
    pub antenna_lever_arm: Vector3<f64>,
}

impl FrameChain {
    pub fn new(yaw_offset: f64, r_sky_to_body: Matrix3<f64>, body_pose: BodyPose) -> Self {
        Self {
            yaw_offset,
            anchor_world: Vector3::zeros(),
            r_sky_to_body,
            body_pose,
            antenna_lever_arm: Vector3::zeros(),
        }
    }

    /// Identity chain: ψ = 0, camera aligned with body, body at world origin.
    pub fn identity() -> Self {
        Self::new(0.0, Matrix3::identity(), BodyPose::identity())
    }

    /// Rotation taking world vectors into ENU, `R_w→n = Rot_up(ψ)`.
    pub fn rot_world_to_enu(&self) -> Matrix3<f64> {
        rot_up(self.yaw_offset)
    }

    /// Rotation taking ENU vectors into the world frame, `R_n→w = Rot_up(ψ)ᵀ`.
    pub fn rot_enu_to_world(&self) -> Matrix3<f64> {
        rot_up(self.yaw_offset).transpose()
    }

    /// Same chain with the body pose swapped out (per-epoch update).
    pub fn with_body_pose(&self, pose: BodyPose) -> Self {
        Self {
            body_pose: pose,
            ..self.clone()
        }
    }
}

/// Yaw rotation about the up axis.
pub fn rot_up(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Satellite direction as azimuth (from north, clockwise) and elevation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzEl {
    /// Azimuth, radians in [0, 2π).
    pub azimuth: f64,
    /// Elevation above the horizon, radians in [−π/2, π/2].
    pub elevation: f64,
}

impl AzEl {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    pub fn from_degrees(az_deg: f64, el_deg: f64) -> Self {
        Self::new(az_deg.to_radians(), el_deg.to_radians())
    }

    /// Unit ENU direction pointing at this azimuth/elevation.
    pub fn to_enu_direction(self) -> Vector3<f64> {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vector3::new(ce * sa, ce * ca, se)
    }
}

/// ENU point into the local world frame: `p_w = R_n→w · p_n + p_anc_w`.
pub fn enu_to_world(chain: &FrameChain, p: EnuCoord) -> Vector3<f64> {
    chain.rot_enu_to_world() * p.to_vector() + chain.anchor_world
}

/// Inverse of [`enu_to_world`].
pub fn world_to_enu(chain: &FrameChain, p_world: Vector3<f64>) -> EnuCoord {
    EnuCoord::from_vector(chain.rot_world_to_enu() * (p_world - chain.anchor_world))
}

/// World point into the sky-camera frame.
///
/// `p_cam = (R_i→w · R_sky→i)ᵀ · (p_world − t_body) − lever_arm`; the lever
/// arm is zero by default so the antenna and camera coincide.
pub fn satellite_to_sky_camera(chain: &FrameChain, p_sat_world: Vector3<f64>) -> Vector3<f64> {
    let r_sky_to_world = chain.body_pose.r_body_to_world * chain.r_sky_to_body;
    r_sky_to_world.transpose() * (p_sat_world - chain.body_pose.t_body_in_world)
        - chain.antenna_lever_arm
}

/// Azimuth/elevation of an ENU direction.
pub fn elevation_azimuth(p_enu: EnuCoord) -> Result<AzEl, FrameError> {
    let v = p_enu.to_vector();
    let norm = v.norm();
    if norm == 0.0 {
        return Err(FrameError::ZeroVector);
    }
    let elevation = (v.z / norm).clamp(-1.0, 1.0).asin();
    let mut azimuth = v.x.atan2(v.y);
    if azimuth < 0.0 {
        azimuth += 2.0 * std::f64::consts::PI;
    }
    if azimuth >= 2.0 * std::f64::consts::PI {
        azimuth = 0.0;
    }
    Ok(AzEl::new(azimuth, elevation))
}
