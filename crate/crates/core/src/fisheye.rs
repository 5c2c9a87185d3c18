//! Kannala-Brandt equidistant-polynomial fisheye model.
//!
//! Forward projection follows the usual chain: normalize to the pinhole
//! plane, θ = atan(r), distort θ with the odd polynomial, scale back and
//! apply the pinhole matrix (skew enters the u equation only). The
//! inverse recovers θ from θ_d by Newton iteration with a bisection
//! fallback, so mildly non-monotone coefficient sets still invert inside
//! the working FOV.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FisheyeError {
    #[error("point with z = {0} is behind the camera")]
    BehindCamera(f64),
    #[error("pixel is {dist:.1} px from the principal point, outside the valid circle of {radius:.1} px")]
    OutsideValidCircle { dist: f64, radius: f64 },
    #[error("theta inversion did not converge")]
    NoConvergence,
}

/// Kannala-Brandt intrinsics plus the usable image circle.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Skew; multiplies y' in the u equation only.
    pub alpha: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Radius of the usable fisheye circle around (cx, cy), pixels.
    pub valid_radius: f64,
}

impl FisheyeIntrinsics {
    /// Distortion-free equidistant model, handy for tests and synthetic rigs.
    pub fn equidistant(f: f64, cx: f64, cy: f64, width: u32, height: u32, valid_radius: f64) -> Self {
        Self {
            fx: f,
            fy: f,
            cx,
            cy,
            alpha: 0.0,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            k4: 0.0,
            image_width: width,
            image_height: height,
            valid_radius,
        }
    }

    /// θ_d = θ(1 + k1·θ² + k2·θ⁴ + k3·θ⁶ + k4·θ⁸).
    pub fn distort(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        theta * (1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4))))
    }

    fn distort_derivative(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        1.0 + t2 * (3.0 * self.k1 + t2 * (5.0 * self.k2 + t2 * (7.0 * self.k3 + t2 * 9.0 * self.k4)))
    }
}

/// Real-valued pixel position; may lie outside the raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance_to(&self, other: &PixelCoord) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Project a camera-frame point to pixel coordinates.
pub fn project(intr: &FisheyeIntrinsics, p_cam: Vector3<f64>) -> Result<PixelCoord, FisheyeError> {
    if p_cam.z <= 0.0 {
        return Err(FisheyeError::BehindCamera(p_cam.z));
    }
    let a = p_cam.x / p_cam.z;
    let b = p_cam.y / p_cam.z;
    let r = (a * a + b * b).sqrt();
    let theta = r.atan();
    // θ_d/r has a removable singularity at r = 0 with limit 1.
    let scale = if r < 1e-12 {
        1.0
    } else {
        intr.distort(theta) / r
    };
    let x_d = scale * a;
    let y_d = scale * b;
    Ok(PixelCoord {
        u: intr.fx * (x_d + intr.alpha * y_d) + intr.cx,
        v: intr.fy * y_d + intr.cy,
    })
}

/// Invert a pixel to a unit camera-frame ray with z > 0.
///
/// The pixel must lie within `valid_radius` of the principal point.
/// Round-trips with [`project`] to better than 1e-6 px for monotone
/// distortion polynomials.
pub fn unproject(intr: &FisheyeIntrinsics, px: PixelCoord) -> Result<Vector3<f64>, FisheyeError> {
    let dist = (px.u - intr.cx).hypot(px.v - intr.cy);
    if dist > intr.valid_radius {
        return Err(FisheyeError::OutsideValidCircle {
            dist,
            radius: intr.valid_radius,
        });
    }

    let y_d = (px.v - intr.cy) / intr.fy;
    let x_d = (px.u - intr.cx) / intr.fx - intr.alpha * y_d;
    let theta_d = (x_d * x_d + y_d * y_d).sqrt();
    if theta_d < 1e-12 {
        return Ok(Vector3::new(0.0, 0.0, 1.0));
    }

    let theta = invert_distortion(intr, theta_d)?;
    let r = theta.tan();
    let a = x_d * (r / theta_d);
    let b = y_d * (r / theta_d);
    Ok(Vector3::new(a, b, 1.0).normalize())
}

// Newton from θ = θ_d with a bracketing bisection fallback; the root is
// constrained to [0, π/2) so the recovered ray keeps z > 0.
fn invert_distortion(intr: &FisheyeIntrinsics, theta_d: f64) -> Result<f64, FisheyeError> {
    const MAX_ITER: usize = 50;
    const TOL: f64 = 1e-12;
    let hi_limit = std::f64::consts::FRAC_PI_2 - 1e-9;

    let mut lo = 0.0f64;
    let mut hi = hi_limit;
    if intr.distort(hi) < theta_d {
        // Root would require θ ≥ π/2 (ray at or below the camera horizon).
        return Err(FisheyeError::NoConvergence);
    }

    let mut theta = theta_d.clamp(lo, hi);
    for _ in 0..MAX_ITER {
        let g = intr.distort(theta) - theta_d;
        if g.abs() < TOL {
            return Ok(theta);
        }
        if g > 0.0 {
            hi = hi.min(theta);
        } else {
            lo = lo.max(theta);
        }
        let dg = intr.distort_derivative(theta);
        let newton = theta - g / dg;
        theta = if dg.abs() > 1e-12 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if (intr.distort(theta) - theta_d).abs() < 1e-9 {
        Ok(theta)
    } else {
        Err(FisheyeError::NoConvergence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn test_intrinsics() -> FisheyeIntrinsics {
        FisheyeIntrinsics {
            fx: 280.0,
            fy: 270.0,
            cx: 640.0,
            cy: 512.0,
            alpha: 0.05,
            k1: -0.01,
            k2: 0.002,
            k3: 0.0,
            k4: 0.0,
            image_width: 1280,
            image_height: 1024,
            valid_radius: 400.0,
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let intr = test_intrinsics();
        let px = project(&intr, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(px.u, intr.cx, epsilon = 1e-12);
        assert_abs_diff_eq!(px.v, intr.cy, epsilon = 1e-12);
    }

    #[test]
    fn zero_distortion_reduces_to_equidistant() {
        let intr = FisheyeIntrinsics::equidistant(300.0, 320.0, 240.0, 640, 480, 300.0);
        let px = project(&intr, Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(px.u, 320.0 + 300.0 * FRAC_PI_4, epsilon = 1e-9);
        assert_abs_diff_eq!(px.v, 240.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_reference_evaluation() {
        // Frozen from a step-by-step evaluation of the projection chain in a
        // throwaway script (fx=280, fy=270, cx=640, cy=512, α=0.05,
        // k=(−0.01, 0.002, 0, 0), point (0.3, −0.2, 1.0)).
        let px = project(&test_intrinsics(), Vector3::new(0.3, -0.2, 1.0)).unwrap();
        assert_abs_diff_eq!(px.u, 717.841_545_907_282_6, epsilon = 1e-9);
        assert_abs_diff_eq!(px.v, 460.233_454_692_201_24, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let intr = test_intrinsics();
        assert!(matches!(
            project(&intr, Vector3::new(0.1, 0.1, 0.0)),
            Err(FisheyeError::BehindCamera(_))
        ));
        assert!(matches!(
            project(&intr, Vector3::new(0.1, 0.1, -5.0)),
            Err(FisheyeError::BehindCamera(_))
        ));
    }

    #[test]
    fn principal_point_unprojects_to_axis() {
        let intr = test_intrinsics();
        let ray = unproject(&intr, PixelCoord::new(intr.cx, intr.cy)).unwrap();
        assert!((ray - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn outside_valid_circle_is_rejected() {
        let intr = test_intrinsics();
        let px = PixelCoord::new(intr.cx + intr.valid_radius + 1.0, intr.cy);
        assert!(matches!(
            unproject(&intr, px),
            Err(FisheyeError::OutsideValidCircle { .. })
        ));
    }

    #[test]
    fn round_trip_1000_in_circle_pixels() {
        let intr = test_intrinsics();
        let mut worst = 0.0f64;
        let mut count = 0;
        for i in 0..1000u64 {
            // Deterministic low-discrepancy sweep of the valid circle.
            let frac = (i.wrapping_mul(2654435761) % 100_003) as f64 / 100_003.0;
            let radius = intr.valid_radius * ((i as f64 + 0.5) / 1000.0).sqrt();
            let angle = frac * 2.0 * std::f64::consts::PI;
            let px = PixelCoord::new(
                intr.cx + radius * angle.cos(),
                intr.cy + radius * angle.sin(),
            );
            let ray = unproject(&intr, px).unwrap();
            assert!(ray.z > 0.0);
            assert_abs_diff_eq!(ray.norm(), 1.0, epsilon = 1e-12);
            let back = project(&intr, ray).unwrap();
            worst = worst.max(back.distance_to(&px));
            count += 1;
        }
        assert_eq!(count, 1000);
        assert!(worst < 1e-6, "worst round-trip error {worst} px");
    }

    #[test]
    fn continuous_across_optical_axis() {
        let intr = test_intrinsics();
        let eps = 1e-9;
        let left = project(&intr, Vector3::new(-eps, 0.0, 1.0)).unwrap();
        let right = project(&intr, Vector3::new(eps, 0.0, 1.0)).unwrap();
        let center = project(&intr, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(left.distance_to(&center) < 1e-6);
        assert!(right.distance_to(&center) < 1e-6);
        // Finite-difference slope: symmetric about the axis.
        assert_abs_diff_eq!(
            center.u - left.u,
            right.u - center.u,
            epsilon = 1e-9
        );
    }

    proptest! {
        #[test]
        fn project_unproject_identity(radius_frac in 0.0f64..0.999, angle in 0.0f64..6.28) {
            let intr = test_intrinsics();
            let px = PixelCoord::new(
                intr.cx + radius_frac * intr.valid_radius * angle.cos(),
                intr.cy + radius_frac * intr.valid_radius * angle.sin(),
            );
            let ray = unproject(&intr, px).unwrap();
            let back = project(&intr, ray).unwrap();
            prop_assert!(back.distance_to(&px) < 1e-6);
        }
    }
}
