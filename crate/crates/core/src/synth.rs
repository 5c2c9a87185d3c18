//! Synthetic-scene oracle: renders fisheye sky images over a polygonal
//! (azimuth-interval × max-elevation) skyline, decides true satellite
//! visibility by a plain interval test, and forward-models pseudorange
//! and Doppler measurements with injectable NLOS delays.
//!
//! The renderer walks pixels and unprojects rays; the satellite
//! projection used for cross-checking ([`render_side_projection`]) is a
//! separate, self-contained implementation of the whole back-projection
//! chain so the pipeline under test is checked against genuinely
//! different code.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::fisheye::{self, FisheyeIntrinsics};
use crate::frames::{self, AzEl, BodyPose, FrameChain};
use crate::geodesy::{self, EcefCoord, EnuCoord, GeodeticCoord};
use crate::gnss::{Epoch, EpochBatch};
use crate::nlos::{Constellation, SatelliteObservation};
use crate::skyseg::{GrayImage, SkyMask};

/// True satellite visibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    Los,
    Nlos,
}

/// Sky occluder: a building block spanning an azimuth interval up to a
/// maximum elevation. The interval may wrap through north
/// (`az_start > az_end`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderBlock {
    pub az_start: f64,
    pub az_end: f64,
    /// Block top, radians above the horizon, in (0, π/2).
    pub max_elevation: f64,
}

impl OccluderBlock {
    pub fn from_degrees(az_start_deg: f64, az_end_deg: f64, max_el_deg: f64) -> Self {
        Self {
            az_start: az_start_deg.to_radians(),
            az_end: az_end_deg.to_radians(),
            max_elevation: max_el_deg.to_radians(),
        }
    }

    pub fn contains(&self, azel: AzEl) -> bool {
        // A block topping out at the zenith is closed there, so a
        // full-dome occluder swallows the optical-axis direction too.
        let covered = if self.max_elevation >= std::f64::consts::FRAC_PI_2 {
            true
        } else {
            azel.elevation < self.max_elevation
        };
        if !covered {
            return false;
        }
        let tau = 2.0 * std::f64::consts::PI;
        if self.az_end - self.az_start >= tau {
            return true;
        }
        let az = azel.azimuth.rem_euclid(tau);
        let start = self.az_start.rem_euclid(tau);
        let end = self.az_end.rem_euclid(tau);
        if start <= end {
            az >= start && az < end
        } else {
            az >= start || az < end
        }
    }
}

/// One satellite in the scene constellation, placed by azimuth/elevation
/// and range from the anchor at epoch zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSatellite {
    pub id: String,
    pub azel: AzEl,
    pub range: f64,
    pub vel_ecef: Vector3<f64>,
    pub n_si: f64,
    pub n_p: f64,
    pub n_d: f64,
}

impl SceneSatellite {
    pub fn constellation(&self) -> Constellation {
        self.id
            .chars()
            .next()
            .and_then(Constellation::from_letter)
            .unwrap_or(Constellation::G)
    }
}

/// Measurement noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Image intensity noise sigma.
    pub pixel_sigma: f64,
    /// Pseudorange noise sigma, meters.
    pub pr_sigma: f64,
    /// Doppler noise sigma, m/s.
    pub dop_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 10.0,
            pr_sigma: 2.0,
            dop_sigma: 0.1,
        }
    }
}

/// Complete synthetic scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub anchor: GeodeticCoord,
    pub occluders: Vec<OccluderBlock>,
    pub constellation: Vec<SceneSatellite>,
    pub chain: FrameChain,
    pub intrinsics: FisheyeIntrinsics,
    pub noise: NoiseSpec,
    /// Extra path length added to NLOS pseudoranges, meters.
    pub nlos_delay: f64,
    pub seed: u64,
    /// Constant body velocity in the world frame, m/s.
    pub body_velocity_world: Vector3<f64>,
    pub epoch_count: usize,
    pub epoch_interval: f64,
    /// Initial receiver clock bias per constellation, meters.
    pub clock_bias: BTreeMap<Constellation, f64>,
    /// Receiver clock drift rate, m/s.
    pub clock_drift: f64,
    /// Mean sky intensity.
    pub sky_level: f64,
    /// Mean building intensity.
    pub building_level: f64,
}

/// Geometric ground truth attached to a rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Noiseless sky mask.
    pub mask: SkyMask,
    /// Per-satellite visibility, index-aligned with the constellation.
    pub visibility: Vec<Visibility>,
    /// Receiver position at epoch zero.
    pub true_position_ecef: EcefCoord,
    pub true_psi: f64,
}

impl SceneSpec {
    /// Small desk-scale scene: 320×320 equidistant fisheye whose valid
    /// circle covers the whole raster, ten satellites, one building
    /// block, ten one-second epochs at 2 m/s.
    pub fn desk_default(seed: u64) -> Self {
        let mut clock_bias = BTreeMap::new();
        clock_bias.insert(Constellation::G, 80.0);
        let sats = [
            ("G01", 20.0, 72.0),
            ("G02", 75.0, 48.0),
            ("G03", 130.0, 33.0),
            ("G04", 170.0, 58.0),
            ("G05", 205.0, 41.0),
            ("G06", 250.0, 27.0),
            ("G07", 295.0, 52.0),
            ("G08", 340.0, 64.0),
            ("G09", 105.0, 22.0),
            ("G10", 60.0, 25.0),
        ];
        let constellation = sats
            .iter()
            .enumerate()
            .map(|(i, &(id, az, el))| SceneSatellite {
                id: id.into(),
                azel: AzEl::from_degrees(az, el),
                range: 2.1e7 + 2e5 * i as f64,
                vel_ecef: Vector3::new(
                    700.0 * (i as f64 * 0.9).cos(),
                    700.0 * (i as f64 * 1.7).sin(),
                    250.0 * (i as f64 * 0.5).sin(),
                ),
                n_si: 1.0,
                n_p: 1.0,
                n_d: 1.0,
            })
            .collect();
        Self {
            anchor: GeodeticCoord::from_degrees(31.03, 121.44, 12.0),
            occluders: vec![OccluderBlock::from_degrees(40.0, 140.0, 38.0)],
            constellation,
            chain: FrameChain::new(25.0f64.to_radians(), nalgebra::Matrix3::identity(), BodyPose::identity()),
            // Valid circle fully inscribed in the raster so every in-circle
            // projection lands on a mask pixel; covers elevations ≥ ~3.3°.
            intrinsics: FisheyeIntrinsics::equidistant(150.0, 230.0, 230.0, 460, 460, 227.0),
            noise: NoiseSpec::default(),
            nlos_delay: 30.0,
            seed,
            body_velocity_world: Vector3::new(1.8, 0.9, 0.0),
            epoch_count: 10,
            epoch_interval: 1.0,
            clock_bias,
            clock_drift: 0.4,
            sky_level: 200.0,
            building_level: 60.0,
        }
    }

    /// Desk scene with a randomized skyline (1–3 blocks) and satellites
    /// scattered above 18° elevation; purely a dataset generator.
    pub fn randomized(seed: u64) -> Self {
        let mut scene = Self::desk_default(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let uni = Uniform::new(0.0f64, 1.0).unwrap();
        let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * uni.sample(&mut rng);

        let n_blocks = 1 + (seed % 3) as usize;
        scene.occluders = (0..n_blocks)
            .map(|_| {
                let start = draw(0.0, 360.0);
                let width = draw(40.0, 120.0);
                let top = draw(20.0, 55.0);
                OccluderBlock::from_degrees(start, start + width, top)
            })
            .collect();
        for (i, sat) in scene.constellation.iter_mut().enumerate() {
            sat.azel = AzEl::from_degrees(draw(0.0, 360.0), draw(18.0, 85.0));
            sat.id = format!("G{:02}", i + 1);
        }
        scene
    }

    /// Randomized scene with exactly `n_nlos` satellites placed inside the
    /// occluder and the rest outside, all at least `margin` radians from
    /// every block boundary (so their projections stay clear of the mask
    /// boundary band).
    pub fn randomized_with_margins(seed: u64, n_sats: usize, n_nlos: usize, margin: f64) -> Self {
        let mut scene = Self::desk_default(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(8);
        let uni = Uniform::new(0.0f64, 1.0).unwrap();
        let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * uni.sample(&mut rng);

        let start = draw(0.0, 360.0).to_radians();
        let width = draw(100.0, 150.0).to_radians();
        let top = draw(38.0, 55.0).to_radians();
        let block = OccluderBlock {
            az_start: start,
            az_end: start + width,
            max_elevation: top,
        };
        scene.occluders = vec![block];

        let min_el = 18.0f64.to_radians();
        let mut sats = Vec::with_capacity(n_sats);
        for i in 0..n_sats {
            let nlos = i < n_nlos;
            let azel = if nlos {
                AzEl::new(
                    (start + margin + draw(0.0, 1.0) * (width - 2.0 * margin))
                        .rem_euclid(2.0 * std::f64::consts::PI),
                    min_el + draw(0.0, 1.0) * (top - margin - min_el),
                )
            } else {
                // Outside the block: either clear of its azimuth span or
                // above its top by the margin.
                loop {
                    let az = draw(0.0, 2.0 * std::f64::consts::PI);
                    let el = min_el + draw(0.0, 1.0) * (80.0f64.to_radians() - min_el);
                    let candidate = AzEl::new(az, el);
                    let expanded = OccluderBlock {
                        az_start: start - margin,
                        az_end: start + width + margin,
                        max_elevation: top + margin,
                    };
                    if !expanded.contains(candidate) {
                        break candidate;
                    }
                }
            };
            sats.push(SceneSatellite {
                id: format!("G{:02}", i + 1),
                azel,
                range: 2.05e7 + 3e5 * i as f64,
                vel_ecef: Vector3::new(
                    600.0 * (i as f64 * 1.1).cos(),
                    600.0 * (i as f64 * 0.6).sin(),
                    200.0 * (i as f64).cos(),
                ),
                n_si: 1.0,
                n_p: 1.0,
                n_d: 1.0,
            });
        }
        scene.constellation = sats;
        scene
    }

    pub fn anchor_point(&self) -> geodesy::AnchorPoint {
        geodesy::AnchorPoint::from_geodetic(self.anchor)
    }

    /// Body world position at a given epoch time (linear trajectory).
    pub fn body_position_world(&self, t: f64) -> Vector3<f64> {
        self.chain.body_pose.t_body_in_world + self.body_velocity_world * t
    }

    /// Frame chain with the body pose advanced to epoch time `t`.
    pub fn chain_at(&self, t: f64) -> FrameChain {
        self.chain.with_body_pose(BodyPose {
            r_body_to_world: self.chain.body_pose.r_body_to_world,
            t_body_in_world: self.body_position_world(t),
        })
    }

    /// Receiver (antenna) ECEF position at epoch time `t`.
    pub fn receiver_ecef(&self, t: f64) -> EcefCoord {
        let anchor = self.anchor_point();
        let chain = self.chain_at(t);
        let p_enu = frames::world_to_enu(&chain, self.body_position_world(t));
        geodesy::enu_to_ecef_point(&anchor, p_enu)
    }

    /// Receiver ECEF velocity (constant across the window).
    pub fn receiver_velocity_ecef(&self) -> Vector3<f64> {
        let anchor = self.anchor_point();
        let v_enu = self.chain.rot_world_to_enu() * self.body_velocity_world;
        anchor.r_n_to_e() * v_enu
    }

    /// Satellite ECEF position at epoch zero.
    pub fn satellite_ecef(&self, sat: &SceneSatellite) -> EcefCoord {
        let anchor = self.anchor_point();
        let enu = EnuCoord::from_vector(sat.azel.to_enu_direction() * sat.range);
        geodesy::enu_to_ecef_point(&anchor, enu)
    }
}

/// True visibility of a direction: NLOS below the horizon or inside any
/// occluder block, LOS otherwise.
pub fn visibility_oracle(scene: &SceneSpec, sat: AzEl) -> Visibility {
    if sat.elevation < 0.0 {
        return Visibility::Nlos;
    }
    if scene.occluders.iter().any(|b| b.contains(sat)) {
        Visibility::Nlos
    } else {
        Visibility::Los
    }
}

/// Render the sky image and its geometric ground truth.
///
/// Every pixel ray is unprojected into the sky and tested against the
/// occluder blocks; sky pixels draw from N(sky_level, σ), others from
/// N(building_level, σ). Pixels outside the valid fisheye circle render
/// dark and count as non-sky. The mask records the noiseless truth.
pub fn render(scene: &SceneSpec) -> (GrayImage, GroundTruth) {
    let intr = &scene.intrinsics;
    let (w, h) = (intr.image_width, intr.image_height);
    let chain = scene.chain_at(0.0);
    let r_cam_to_world = chain.body_pose.r_body_to_world * chain.r_sky_to_body;
    let rot_world_to_enu = chain.rot_world_to_enu();

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(0);
    let noise = Normal::new(0.0, scene.noise.pixel_sigma.max(1e-12)).unwrap();

    let mut pixels = vec![0u8; w as usize * h as usize];
    let mut bits = vec![false; w as usize * h as usize];
    for y in 0..h {
        for x in 0..w {
            let idx = y as usize * w as usize + x as usize;
            let px = fisheye::PixelCoord::new(x as f64, y as f64);
            let sky = match fisheye::unproject(intr, px) {
                Ok(ray) => {
                    let d_world = r_cam_to_world * ray;
                    let d_enu = rot_world_to_enu * d_world;
                    match frames::elevation_azimuth(EnuCoord::from_vector(d_enu)) {
                        Ok(azel) => visibility_oracle(scene, azel) == Visibility::Los,
                        Err(_) => false,
                    }
                }
                Err(_) => false,
            };
            bits[idx] = sky;
            let level = if sky {
                scene.sky_level
            } else {
                scene.building_level
            };
            let sample = if scene.noise.pixel_sigma > 0.0 {
                level + noise.sample(&mut rng)
            } else {
                level
            };
            pixels[idx] = sample.round().clamp(0.0, 255.0) as u8;
        }
    }

    let visibility = scene
        .constellation
        .iter()
        .map(|s| visibility_oracle(scene, s.azel))
        .collect();

    let truth = GroundTruth {
        mask: SkyMask {
            width: w,
            height: h,
            bits,
        },
        visibility,
        true_position_ecef: scene.receiver_ecef(0.0),
        true_psi: scene.chain.yaw_offset,
    };
    let image = GrayImage {
        width: w,
        height: h,
        pixels,
    };
    (image, truth)
}

/// Generate the windowed GNSS measurements implied by the scene.
///
/// Pseudorange: true range + per-constellation clock bias (+ drift·t)
/// + N(0, pr_sigma) + nlos_delay for NLOS satellites. Doppler:
/// κᵀ(v_sat − v_rx) + drift + N(0, dop_sigma). Deterministic per seed.
pub fn forward_model(scene: &SceneSpec, truth: &GroundTruth) -> EpochBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(1);
    let pr_noise = Normal::new(0.0, scene.noise.pr_sigma.max(1e-12)).unwrap();
    let dop_noise = Normal::new(0.0, scene.noise.dop_sigma.max(1e-12)).unwrap();
    let v_rx = scene.receiver_velocity_ecef();

    let mut epochs = Vec::with_capacity(scene.epoch_count);
    for k in 0..scene.epoch_count {
        let t = k as f64 * scene.epoch_interval;
        let receiver = scene.receiver_ecef(t).to_vector();
        let mut observations = Vec::with_capacity(scene.constellation.len());
        for (i, sat) in scene.constellation.iter().enumerate() {
            let pos = scene.satellite_ecef(sat).to_vector() + sat.vel_ecef * t;
            let rel = pos - receiver;
            let range = rel.norm();
            let kappa = rel / range;
            let constellation = sat.constellation();
            let bias = scene.clock_bias.get(&constellation).copied().unwrap_or(0.0)
                + scene.clock_drift * t;
            let mut pseudorange = range + bias;
            if truth.visibility[i] == Visibility::Nlos {
                pseudorange += scene.nlos_delay;
            }
            if scene.noise.pr_sigma > 0.0 {
                pseudorange += pr_noise.sample(&mut rng);
            }
            let mut doppler = kappa.dot(&(sat.vel_ecef - v_rx)) + scene.clock_drift;
            if scene.noise.dop_sigma > 0.0 {
                doppler += dop_noise.sample(&mut rng);
            }
            observations.push(SatelliteObservation {
                epoch_time: t,
                sat_id: sat.id.clone(),
                constellation,
                pos_ecef: EcefCoord::from_vector(pos),
                vel_ecef: sat.vel_ecef,
                pseudorange,
                doppler_range_rate: doppler,
                n_si: sat.n_si,
                n_p: sat.n_p,
                n_d: sat.n_d,
            });
        }
        epochs.push(Epoch {
            time: t,
            observations,
        });
    }
    EpochBatch::new(epochs).expect("scene epochs are ordered and nonempty")
}

/// Self-contained render-side projection of a satellite to a pixel.
///
/// Recomputes the entire chain — WGS-84 anchor, ECEF→ENU rows, yaw,
/// body/extrinsic composition, distortion, pinhole — from first
/// principles without calling the geodesy/frames/fisheye modules.
/// Returns `None` when the satellite cannot land inside the valid circle.
pub fn render_side_projection(scene: &SceneSpec, sat_ecef: EcefCoord) -> Option<(f64, f64)> {
    // Anchor ECEF from the ellipsoid formula.
    let lat = scene.anchor.latitude;
    let lon = scene.anchor.longitude;
    let hgt = scene.anchor.height;
    let e2 = 1.0 / 298.257_223_563 * (2.0 - 1.0 / 298.257_223_563);
    let n = 6_378_137.0 / (1.0 - e2 * lat.sin().powi(2)).sqrt();
    let anchor = [
        (n + hgt) * lat.cos() * lon.cos(),
        (n + hgt) * lat.cos() * lon.sin(),
        (n * (1.0 - e2) + hgt) * lat.sin(),
    ];

    // ECEF → ENU by explicit row dot products.
    let d = [
        sat_ecef.x - anchor[0],
        sat_ecef.y - anchor[1],
        sat_ecef.z - anchor[2],
    ];
    let east = -lon.sin() * d[0] + lon.cos() * d[1];
    let north = -lat.sin() * lon.cos() * d[0] - lat.sin() * lon.sin() * d[1] + lat.cos() * d[2];
    let up = lat.cos() * lon.cos() * d[0] + lat.cos() * lon.sin() * d[1] + lat.sin() * d[2];

    // ENU → world: yaw by −ψ about up, then the anchor's world offset.
    let psi = scene.chain.yaw_offset;
    let wx = psi.cos() * east + psi.sin() * north + scene.chain.anchor_world.x;
    let wy = -psi.sin() * east + psi.cos() * north + scene.chain.anchor_world.y;
    let wz = up + scene.chain.anchor_world.z;

    // World → camera through the composed rotation, inverted by solve
    // rather than transpose.
    let chain = scene.chain_at(0.0);
    let m = chain.body_pose.r_body_to_world * chain.r_sky_to_body;
    let rel = Vector3::new(
        wx - chain.body_pose.t_body_in_world.x,
        wy - chain.body_pose.t_body_in_world.y,
        wz - chain.body_pose.t_body_in_world.z,
    );
    let cam = m.lu().solve(&rel)?;
    if cam.z <= 0.0 {
        return None;
    }

    // Distort and project, powers written out longhand.
    let intr = &scene.intrinsics;
    let a = cam.x / cam.z;
    let b = cam.y / cam.z;
    let r = (a * a + b * b).sqrt();
    let theta = r.atan();
    let theta_d = theta
        + intr.k1 * theta.powi(3)
        + intr.k2 * theta.powi(5)
        + intr.k3 * theta.powi(7)
        + intr.k4 * theta.powi(9);
    let (x_d, y_d) = if r < 1e-12 {
        (a, b)
    } else {
        (theta_d * a / r, theta_d * b / r)
    };
    let u = intr.fx * (x_d + intr.alpha * y_d) + intr.cx;
    let v = intr.fy * y_d + intr.cy;
    if (u - intr.cx).hypot(v - intr.cy) > intr.valid_radius {
        return None;
    }
    Some((u, v))
}
