//! NLOS mitigation pipeline: back-project each satellite into the sky
//! image, look the pixel up in the sky mask, classify LOS/NLOS, and attach
//! elevation-weighted variances to the survivors.
//!
//! All failure modes of the back-projection (behind the camera, outside
//! the fisheye circle, off the raster) collapse to an out-of-view state
//! that is resolved by the elevation fallback, mirroring plain
//! low-elevation masking when no usable image evidence exists.

use nalgebra::Vector3;
use thiserror::Error;

use crate::fisheye::{self, FisheyeIntrinsics, PixelCoord};
use crate::frames::{self, FrameChain};
use crate::geodesy::{self, AnchorPoint, EcefCoord};
use crate::skyseg::SkyMask;

#[derive(Debug, Error, PartialEq)]
pub enum NlosError {
    #[error("elevation {0} rad is not positive")]
    NonPositiveElevation(f64),
    #[error("epoch contains mixed timestamps: {0} vs {1}")]
    MixedEpochs(f64, f64),
}

/// GNSS constellation identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Constellation {
    /// GPS
    G,
    /// GLONASS
    R,
    /// Galileo
    E,
    /// BeiDou
    C,
}

impl Constellation {
    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'G' => Some(Self::G),
            'R' => Some(Self::R),
            'E' => Some(Self::E),
            'C' => Some(Self::C),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Self::G => 'G',
            Self::R => 'R',
            Self::E => 'E',
            Self::C => 'C',
        }
    }

    pub const ALL: [Constellation; 4] = [Self::G, Self::R, Self::E, Self::C];
}

/// One satellite tracked at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteObservation {
    /// GPS-scale epoch time, seconds.
    pub epoch_time: f64,
    /// Constellation letter + PRN, e.g. "G05".
    pub sat_id: String,
    pub constellation: Constellation,
    pub pos_ecef: EcefCoord,
    /// Satellite velocity in ECEF, m/s.
    pub vel_ecef: Vector3<f64>,
    /// Measured pseudorange, meters.
    pub pseudorange: f64,
    /// Range rate, m/s; positive when the range is increasing.
    pub doppler_range_rate: f64,
    /// Broadcast satellite space accuracy index.
    pub n_si: f64,
    /// Pseudorange noise index from the receiver.
    pub n_p: f64,
    /// Doppler noise index from the receiver.
    pub n_d: f64,
}

/// Where a satellite landed after back-projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackProjection {
    InView {
        pixel: PixelCoord,
        /// Satellite position in the sky-camera frame, meters.
        camera: Vector3<f64>,
    },
    OutOfView,
}

/// LOS/NLOS decision for one satellite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Los,
    Nlos,
    OutOfView,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::Los => "LOS",
            Verdict::Nlos => "NLOS",
            Verdict::OutOfView => "OUT_OF_VIEW",
        }
    }
}

/// Classification record kept alongside each observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub verdict: Verdict,
    /// Present when the satellite projected onto the image.
    pub pixel: Option<PixelCoord>,
    /// Elevation above the anchor horizon, radians.
    pub elevation: f64,
}

/// Observation kept after filtering, with its weighting variances.
#[derive(Debug, Clone, PartialEq)]
pub struct KeptObservation {
    pub observation: SatelliteObservation,
    pub pseudorange_variance: f64,
    pub doppler_variance: f64,
}

/// One epoch after LOS/NLOS filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredEpoch {
    pub epoch_time: f64,
    pub kept: Vec<KeptObservation>,
    pub rejected: Vec<(SatelliteObservation, Classification)>,
}

/// Filtering knobs; defaults follow the pipeline conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Elevation fallback cutoff, radians (default 15°).
    pub elevation_cutoff: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            elevation_cutoff: 15.0f64.to_radians(),
        }
    }
}

/// Back-project a satellite through ENU → world → sky camera → pixel.
///
/// Any point behind the camera or outside the valid fisheye circle maps
/// to `OutOfView`; no error escapes.
pub fn back_project(
    chain: &FrameChain,
    anchor: &AnchorPoint,
    intr: &FisheyeIntrinsics,
    sat: &SatelliteObservation,
) -> BackProjection {
    let p_enu = geodesy::ecef_to_enu_point(anchor, sat.pos_ecef);
    let p_world = frames::enu_to_world(chain, p_enu);
    let p_cam = frames::satellite_to_sky_camera(chain, p_world);
    match fisheye::project(intr, p_cam) {
        Ok(pixel) => {
            let dist = (pixel.u - intr.cx).hypot(pixel.v - intr.cy);
            if dist > intr.valid_radius {
                BackProjection::OutOfView
            } else {
                BackProjection::InView {
                    pixel,
                    camera: p_cam,
                }
            }
        }
        Err(_) => BackProjection::OutOfView,
    }
}

/// Satellite elevation/azimuth seen from the anchor.
pub fn satellite_azel(anchor: &AnchorPoint, sat: &SatelliteObservation) -> frames::AzEl {
    let p_enu = geodesy::ecef_to_enu_point(anchor, sat.pos_ecef);
    // Satellites are megameters away from the anchor; the zero-vector case
    // cannot occur for valid observations.
    frames::elevation_azimuth(p_enu).expect("satellite coincides with anchor")
}

/// Decide LOS/NLOS from the mask, falling back to the elevation cutoff
/// when the satellite is out of view or the mask is degenerate
/// (`mask = None`).
pub fn classify(
    pre: &BackProjection,
    mask: Option<&SkyMask>,
    elevation: f64,
    fallback_cutoff: f64,
) -> Classification {
    let fallback = |pixel: Option<PixelCoord>| Classification {
        verdict: if elevation >= fallback_cutoff {
            Verdict::Los
        } else {
            Verdict::Nlos
        },
        pixel,
        elevation,
    };

    match (pre, mask) {
        (BackProjection::InView { pixel, .. }, Some(mask)) => {
            let x = pixel.u.round();
            let y = pixel.v.round();
            if x < 0.0 || y < 0.0 || x >= mask.width as f64 || y >= mask.height as f64 {
                // Valid circle sticking out past the raster edge.
                return fallback(Some(*pixel));
            }
            Classification {
                verdict: if mask.get(x as u32, y as u32) {
                    Verdict::Los
                } else {
                    Verdict::Nlos
                },
                pixel: Some(*pixel),
                elevation,
            }
        }
        (BackProjection::InView { pixel, .. }, None) => fallback(Some(*pixel)),
        (BackProjection::OutOfView, _) => fallback(None),
    }
}

/// Pseudorange variance σ² = (n_si · n_p) / sin²θ_el.
pub fn pseudorange_variance(sat: &SatelliteObservation, elevation: f64) -> Result<f64, NlosError> {
    if elevation <= 0.0 {
        return Err(NlosError::NonPositiveElevation(elevation));
    }
    let s = elevation.sin();
    Ok(sat.n_si * sat.n_p / (s * s))
}

/// Doppler variance σ² = (n_si · n_d) / sin²θ_el.
pub fn doppler_variance(sat: &SatelliteObservation, elevation: f64) -> Result<f64, NlosError> {
    if elevation <= 0.0 {
        return Err(NlosError::NonPositiveElevation(elevation));
    }
    let s = elevation.sin();
    Ok(sat.n_si * sat.n_d / (s * s))
}

/// Classify a whole epoch and split it into kept (LOS, with variances)
/// and rejected observations.
///
/// A `None` mask engages the elevation fallback for every satellite.
pub fn filter_epoch(
    observations: &[SatelliteObservation],
    chain: &FrameChain,
    anchor: &AnchorPoint,
    intr: &FisheyeIntrinsics,
    mask: Option<&SkyMask>,
    config: &FilterConfig,
) -> Result<FilteredEpoch, NlosError> {
    let epoch_time = observations.first().map(|o| o.epoch_time).unwrap_or(0.0);
    for obs in observations {
        if obs.epoch_time != epoch_time {
            return Err(NlosError::MixedEpochs(epoch_time, obs.epoch_time));
        }
    }

    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for obs in observations {
        let pre = back_project(chain, anchor, intr, obs);
        let elevation = satellite_azel(anchor, obs).elevation;
        let class = classify(&pre, mask, elevation, config.elevation_cutoff);
        // The variance model is undefined at or below the horizon, so a
        // nominally LOS satellite there cannot be weighted and is dropped.
        if class.verdict == Verdict::Los && elevation > 0.0 {
            kept.push(KeptObservation {
                observation: obs.clone(),
                pseudorange_variance: pseudorange_variance(obs, elevation)?,
                doppler_variance: doppler_variance(obs, elevation)?,
            });
        } else {
            rejected.push((obs.clone(), class));
        }
    }

    Ok(FilteredEpoch {
        epoch_time,
        kept,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::BodyPose;
    use crate::geodesy::GeodeticCoord;
    use crate::skyseg::SkyMask;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;

    fn test_anchor() -> AnchorPoint {
        AnchorPoint::from_geodetic(GeodeticCoord::from_degrees(31.0, 121.4, 10.0))
    }

    // Sky camera looking straight up when the body is level: X_cam = east,
    // Y_cam = north, Z_cam = up (i.e. camera frame equals ENU for ψ = 0,
    // identity body pose).
    fn up_chain() -> FrameChain {
        FrameChain::new(0.0, Matrix3::identity(), BodyPose::identity())
    }

    fn test_intr() -> FisheyeIntrinsics {
        FisheyeIntrinsics::equidistant(150.0, 160.0, 160.0, 320, 320, 150.0)
    }

    fn sat_at(anchor: &AnchorPoint, az_deg: f64, el_deg: f64, range: f64) -> SatelliteObservation {
        let dir = frames::AzEl::from_degrees(az_deg, el_deg).to_enu_direction();
        let enu = crate::geodesy::EnuCoord::from_vector(dir * range);
        SatelliteObservation {
            epoch_time: 100.0,
            sat_id: "G01".into(),
            constellation: Constellation::G,
            pos_ecef: geodesy::enu_to_ecef_point(anchor, enu),
            vel_ecef: Vector3::zeros(),
            pseudorange: range,
            doppler_range_rate: 0.0,
            n_si: 1.0,
            n_p: 1.0,
            n_d: 1.0,
        }
    }

    fn uniform_mask(sky: bool) -> SkyMask {
        SkyMask {
            width: 320,
            height: 320,
            bits: vec![sky; 320 * 320],
        }
    }

    #[test]
    fn zenith_satellite_hits_principal_point() {
        let anchor = test_anchor();
        let sat = sat_at(&anchor, 0.0, 90.0, 2.2e7);
        match back_project(&up_chain(), &anchor, &test_intr(), &sat) {
            BackProjection::InView { pixel, .. } => {
                assert_abs_diff_eq!(pixel.u, 160.0, epsilon = 1e-3);
                assert_abs_diff_eq!(pixel.v, 160.0, epsilon = 1e-3);
            }
            BackProjection::OutOfView => panic!("zenith satellite must be in view"),
        }
    }

    #[test]
    fn below_horizon_satellite_is_out_of_view() {
        let anchor = test_anchor();
        let sat = sat_at(&anchor, 120.0, -10.0, 2.2e7);
        assert_eq!(
            back_project(&up_chain(), &anchor, &test_intr(), &sat),
            BackProjection::OutOfView
        );
    }

    #[test]
    fn classify_against_uniform_masks() {
        let pre = BackProjection::InView {
            pixel: PixelCoord::new(100.0, 100.0),
            camera: Vector3::new(0.0, 0.0, 2e7),
        };
        let all_sky = uniform_mask(true);
        let no_sky = uniform_mask(false);
        let el = 40.0f64.to_radians();
        let cutoff = 15.0f64.to_radians();
        assert_eq!(classify(&pre, Some(&all_sky), el, cutoff).verdict, Verdict::Los);
        assert_eq!(classify(&pre, Some(&no_sky), el, cutoff).verdict, Verdict::Nlos);
    }

    #[test]
    fn out_of_view_uses_elevation_fallback() {
        let cutoff = 15.0f64.to_radians();
        let high = classify(
            &BackProjection::OutOfView,
            Some(&uniform_mask(false)),
            20.0f64.to_radians(),
            cutoff,
        );
        assert_eq!(high.verdict, Verdict::Los);
        assert_eq!(high.pixel, None);

        let low = classify(
            &BackProjection::OutOfView,
            Some(&uniform_mask(true)),
            10.0f64.to_radians(),
            cutoff,
        );
        assert_eq!(low.verdict, Verdict::Nlos);
    }

    #[test]
    fn degenerate_mask_uses_elevation_fallback() {
        let pre = BackProjection::InView {
            pixel: PixelCoord::new(10.0, 10.0),
            camera: Vector3::new(0.0, 0.0, 2e7),
        };
        let c = classify(&pre, None, 30.0f64.to_radians(), 15.0f64.to_radians());
        assert_eq!(c.verdict, Verdict::Los);
        assert!(c.pixel.is_some());
    }

    #[test]
    fn variance_values_from_the_elevation_model() {
        let anchor = test_anchor();
        let mut sat = sat_at(&anchor, 0.0, 90.0, 2.2e7);
        assert_abs_diff_eq!(
            pseudorange_variance(&sat, 90.0f64.to_radians()).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            pseudorange_variance(&sat, 30.0f64.to_radians()).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        sat.n_si = 2.0;
        sat.n_p = 3.0;
        assert_abs_diff_eq!(
            pseudorange_variance(&sat, 90.0f64.to_radians()).unwrap(),
            6.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            doppler_variance(&sat, 30.0f64.to_radians()).unwrap(),
            8.0,
            epsilon = 1e-12
        );
        assert_eq!(
            doppler_variance(&sat, 0.0),
            Err(NlosError::NonPositiveElevation(0.0))
        );
    }

    #[test]
    fn variance_decreases_with_elevation() {
        let anchor = test_anchor();
        let sat = sat_at(&anchor, 0.0, 90.0, 2.2e7);
        let mut last = f64::INFINITY;
        for deg in 1..=90 {
            let v = pseudorange_variance(&sat, (deg as f64).to_radians()).unwrap();
            assert!(v < last, "variance must decrease, {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn filter_epoch_partitions_without_loss() {
        let anchor = test_anchor();
        let chain = up_chain();
        let intr = test_intr();
        // Elevations ≥ 35° keep every projection inside the valid circle
        // and on the raster, so the masks alone decide the verdicts.
        let obs: Vec<_> = (0..8)
            .map(|i| {
                let mut s = sat_at(&anchor, i as f64 * 45.0, 35.0 + 5.0 * i as f64, 2.2e7);
                s.sat_id = format!("G{:02}", i + 1);
                s
            })
            .collect();

        let all = filter_epoch(
            &obs,
            &chain,
            &anchor,
            &intr,
            Some(&uniform_mask(true)),
            &FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(all.kept.len(), 8);
        assert!(all.rejected.is_empty());

        let none = filter_epoch(
            &obs,
            &chain,
            &anchor,
            &intr,
            Some(&uniform_mask(false)),
            &FilterConfig::default(),
        )
        .unwrap();
        assert!(none.kept.is_empty());
        assert_eq!(none.rejected.len(), 8);
        assert_eq!(all.kept.len() + all.rejected.len(), obs.len());
    }

    #[test]
    fn filter_epoch_rejects_mixed_timestamps() {
        let anchor = test_anchor();
        let mut obs = vec![
            sat_at(&anchor, 0.0, 50.0, 2.2e7),
            sat_at(&anchor, 90.0, 50.0, 2.2e7),
        ];
        obs[1].epoch_time = 101.0;
        assert!(matches!(
            filter_epoch(
                &obs,
                &up_chain(),
                &anchor,
                &test_intr(),
                None,
                &FilterConfig::default()
            ),
            Err(NlosError::MixedEpochs(..))
        ));
    }

    #[test]
    fn filter_epoch_is_deterministic() {
        let anchor = test_anchor();
        let obs: Vec<_> = (0..6)
            .map(|i| sat_at(&anchor, i as f64 * 60.0, 20.0 + 10.0 * i as f64, 2.2e7))
            .collect();
        let run = || {
            filter_epoch(
                &obs,
                &up_chain(),
                &anchor,
                &test_intr(),
                Some(&uniform_mask(true)),
                &FilterConfig::default(),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
