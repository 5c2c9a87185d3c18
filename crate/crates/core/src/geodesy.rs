//! WGS-84 geodetic / ECEF / ENU coordinate machinery.
//!
//! Everything here is a pure function over immutable values. The anchor
//! point ties the three systems together: it stores its own ECEF and
//! geodetic representations plus the ECEF→ENU rotation so downstream
//! code never rebuilds the rotation from scratch.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// WGS-84 semi-major axis, meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 first eccentricity squared, e² = f(2 − f).
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);
/// WGS-84 semi-minor axis, meters.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);

#[derive(Debug, Error, PartialEq)]
pub enum GeodesyError {
    /// Input point is too close to the Earth center for a geodetic solution.
    #[error("point with norm {0} m is too close to the Earth center")]
    NearSingular(f64),
    /// Latitude iteration failed to reach tolerance (should not happen on
    /// valid inputs; surfaced instead of silently returning garbage).
    #[error("latitude iteration did not converge")]
    NoConvergence,
}

/// Geodetic position on the WGS-84 ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodeticCoord {
    /// Latitude, radians, in [−π/2, π/2].
    pub latitude: f64,
    /// Longitude, radians, in (−π, π].
    pub longitude: f64,
    /// Height above the ellipsoid, meters.
    pub height: f64,
}

impl GeodeticCoord {
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Self {
        Self {
            latitude,
            longitude,
            height,
        }
    }

    /// Construct from degrees; convenience for config files.
    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }
}

/// Earth-centered, Earth-fixed Cartesian position, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefCoord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefCoord {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn norm(self) -> f64 {
        self.to_vector().norm()
    }
}

/// Local East-North-Up position relative to an anchor, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnuCoord {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl EnuCoord {
    pub fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.east, self.north, self.up)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Reference point tying the local ENU frame to ECEF.
///
/// Stores both representations plus the cached ECEF→ENU rotation;
/// `r_e_to_n` always equals `rotation_ecef_to_enu(geodetic)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPoint {
    pub ecef: EcefCoord,
    pub geodetic: GeodeticCoord,
    pub r_e_to_n: Matrix3<f64>,
}

impl AnchorPoint {
    /// Build an anchor from its geodetic coordinate.
    pub fn from_geodetic(g: GeodeticCoord) -> Self {
        Self {
            ecef: geodetic_to_ecef(g),
            geodetic: g,
            r_e_to_n: rotation_ecef_to_enu(g),
        }
    }

    /// Build an anchor from its ECEF coordinate.
    pub fn from_ecef(p: EcefCoord) -> Result<Self, GeodesyError> {
        let g = ecef_to_geodetic(p)?;
        Ok(Self {
            ecef: p,
            geodetic: g,
            r_e_to_n: rotation_ecef_to_enu(g),
        })
    }

    /// ENU→ECEF rotation, the transpose of `r_e_to_n`.
    pub fn r_n_to_e(&self) -> Matrix3<f64> {
        self.r_e_to_n.transpose()
    }
}

/// Closed-form WGS-84 geodetic → ECEF conversion.
pub fn geodetic_to_ecef(g: GeodeticCoord) -> EcefCoord {
    let (sin_lat, cos_lat) = g.latitude.sin_cos();
    let (sin_lon, cos_lon) = g.longitude.sin_cos();
    // Prime-vertical radius of curvature.
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    EcefCoord {
        x: (n + g.height) * cos_lat * cos_lon,
        y: (n + g.height) * cos_lat * sin_lon,
        z: (n * (1.0 - WGS84_E2) + g.height) * sin_lat,
    }
}

/// ECEF → geodetic by fixed-point iteration on latitude.
///
/// Converges to |Δlat| < 1e-12 rad; capped at 20 iterations. Points within
/// 1 m of the Earth center are rejected as `NearSingular`.
pub fn ecef_to_geodetic(p: EcefCoord) -> Result<GeodeticCoord, GeodesyError> {
    let norm = p.norm();
    if norm <= 1.0 {
        return Err(GeodesyError::NearSingular(norm));
    }

    let rho = p.x.hypot(p.y);
    // Polar branch: the longitude is undefined and cos(lat) → 0 makes the
    // height expression below unstable.
    if rho < 1e-6 {
        return Ok(GeodeticCoord {
            latitude: if p.z >= 0.0 {
                std::f64::consts::FRAC_PI_2
            } else {
                -std::f64::consts::FRAC_PI_2
            },
            longitude: 0.0,
            height: p.z.abs() - WGS84_B,
        });
    }

    let mut longitude = p.y.atan2(p.x);
    if longitude <= -std::f64::consts::PI {
        longitude += 2.0 * std::f64::consts::PI;
    }

    // Height via ρ·cosϕ + z·sinϕ − a·w (w = √(1 − e²·sin²ϕ)), which stays
    // well-conditioned at high latitude unlike ρ/cosϕ − N.
    let height_at = |lat: f64| {
        let sin_lat = lat.sin();
        let w = (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        rho * lat.cos() + p.z * sin_lat - WGS84_A * w
    };

    let mut lat = p.z.atan2(rho * (1.0 - WGS84_E2));
    let mut converged = false;
    for _ in 0..20 {
        let sin_lat = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        let height = height_at(lat);
        let next = p.z.atan2(rho * (1.0 - WGS84_E2 * n / (n + height)));
        let delta = (next - lat).abs();
        lat = next;
        if delta < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GeodesyError::NoConvergence);
    }

    Ok(GeodeticCoord {
        latitude: lat,
        longitude,
        height: height_at(lat),
    })
}

/// Rotation taking ECEF vectors into the ENU frame anchored at `g`.
///
/// Rows are the east, north, and up axes expressed in ECEF:
///
/// ```text
/// ⎡ −sinλ        cosλ       0    ⎤
/// ⎢ −sinϕ·cosλ  −sinϕ·sinλ  cosϕ ⎥
/// ⎣  cosϕ·cosλ   cosϕ·sinλ  sinϕ ⎦
/// ```
pub fn rotation_ecef_to_enu(g: GeodeticCoord) -> Matrix3<f64> {
    let (sin_lat, cos_lat) = g.latitude.sin_cos();
    let (sin_lon, cos_lon) = g.longitude.sin_cos();
    Matrix3::new(
        -sin_lon,
        cos_lon,
        0.0,
        -sin_lat * cos_lon,
        -sin_lat * sin_lon,
        cos_lat,
        cos_lat * cos_lon,
        cos_lat * sin_lon,
        sin_lat,
    )
}

/// Express an ECEF point in the anchor's ENU frame: R_e→n · (p − p_anchor).
pub fn ecef_to_enu_point(anchor: &AnchorPoint, p: EcefCoord) -> EnuCoord {
    let rel = p.to_vector() - anchor.ecef.to_vector();
    EnuCoord::from_vector(anchor.r_e_to_n * rel)
}

/// Inverse of [`ecef_to_enu_point`].
pub fn enu_to_ecef_point(anchor: &AnchorPoint, p: EnuCoord) -> EcefCoord {
    EcefCoord::from_vector(anchor.ecef.to_vector() + anchor.r_n_to_e() * p.to_vector())
}
