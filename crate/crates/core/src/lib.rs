//! GNSS NLOS mitigation through sky-pointing fisheye imagery.
//!
//! The crate back-projects satellites into an up-looking fisheye image,
//! segments sky from non-sky with a global threshold, rejects satellites
//! whose line of sight falls on non-sky pixels, and solves the weighted
//! positioning and alignment problems that consume the surviving
//! measurements:
//!
//! - [`geodesy`] — WGS-84 geodetic/ECEF/ENU conversions and the anchor point.
//! - [`frames`] — ENU ↔ local-world yaw chain and camera extrinsics.
//! - [`fisheye`] — Kannala-Brandt projection and its numerical inverse.
//! - [`skyseg`] — grayscale preprocessing, Otsu and local thresholding, IoU.
//! - [`nlos`] — satellite back-projection, LOS/NLOS classification,
//!   elevation-weighted variances, epoch filtering.
//! - [`gnss`] — single-point positioning, Doppler yaw calibration, and
//!   anchor refinement.
//! - [`synth`] — synthetic-scene oracle with ground-truth masks,
//!   visibility, and forward-modeled measurements.

pub mod fisheye;
pub mod frames;
pub mod geodesy;
pub mod gnss;
pub mod nlos;
pub mod skyseg;
pub mod synth;

pub use fisheye::{FisheyeError, FisheyeIntrinsics, PixelCoord};
pub use frames::{AzEl, BodyPose, FrameChain, FrameError};
pub use geodesy::{AnchorPoint, EcefCoord, EnuCoord, GeodesyError, GeodeticCoord};
pub use gnss::{
    ClockState, Epoch, EpochBatch, RefineConfig, RefinedAnchor, SolveError, SppSolution,
    YawCalibration,
};
pub use nlos::{
    Classification, Constellation, FilterConfig, FilteredEpoch, KeptObservation, NlosError,
    SatelliteObservation, Verdict,
};
pub use skyseg::{GrayImage, Histogram, OtsuResult, SegError, SkyMask};
pub use synth::{GroundTruth, NoiseSpec, OccluderBlock, SceneSatellite, SceneSpec, Visibility};
