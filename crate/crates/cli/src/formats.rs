//! File formats wired through the CLI: observation CSV, calibration and
//! anchor key=value files, pose CSV, scene description files, and PNG
//! raster I/O.
//!
//! Parse errors always carry the offending file and line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use skylos::frames::{AzEl, BodyPose};
use skylos::synth::{OccluderBlock, SceneSatellite, SceneSpec};
use skylos::{
    Constellation, EcefCoord, FisheyeIntrinsics, GeodeticCoord, GrayImage, SatelliteObservation,
    SkyMask,
};

use crate::CliError;

/// Observation CSV header, bit-exact.
pub const OBSERVATION_HEADER: &str = "epoch_time,sat_id,constellation,x_ecef,y_ecef,z_ecef,\
vx_ecef,vy_ecef,vz_ecef,pseudorange_m,doppler_mps,n_si,n_p,n_d";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Parse {
        file: path.display().to_string(),
        line,
        message: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64, CliError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad {field}: {s:?}")))
}

/// Read an observation CSV into observations sorted by epoch time.
pub fn read_observations(path: &Path) -> Result<Vec<SatelliteObservation>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| parse_err(path, 0, format!("cannot read: {e}")))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(path, 1, "missing header"));
    };
    if header.trim() != OBSERVATION_HEADER {
        return Err(parse_err(path, 1, "unexpected header"));
    }
    let mut observations = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 14 fields, got {}", fields.len()),
            ));
        }
        let constellation = Constellation::from_letter(
            fields[2]
                .trim()
                .chars()
                .next()
                .ok_or_else(|| parse_err(path, line_no, "empty constellation"))?,
        )
        .ok_or_else(|| parse_err(path, line_no, format!("unknown constellation {:?}", fields[2])))?;
        let f = |i: usize, name: &str| parse_f64(path, line_no, name, fields[i]);
        observations.push(SatelliteObservation {
            epoch_time: f(0, "epoch_time")?,
            sat_id: fields[1].trim().to_string(),
            constellation,
            pos_ecef: EcefCoord::new(f(3, "x_ecef")?, f(4, "y_ecef")?, f(5, "z_ecef")?),
            vel_ecef: Vector3::new(f(6, "vx_ecef")?, f(7, "vy_ecef")?, f(8, "vz_ecef")?),
            pseudorange: f(9, "pseudorange_m")?,
            doppler_range_rate: f(10, "doppler_mps")?,
            n_si: f(11, "n_si")?,
            n_p: f(12, "n_p")?,
            n_d: f(13, "n_d")?,
        });
    }
    observations.sort_by(|a, b| a.epoch_time.total_cmp(&b.epoch_time));
    Ok(observations)
}

pub fn write_observations(
    path: &Path,
    observations: &[SatelliteObservation],
) -> Result<(), CliError> {
    let mut out = String::from(OBSERVATION_HEADER);
    out.push('\n');
    for o in observations {
        writeln!(
            out,
            "{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            o.epoch_time,
            o.sat_id,
            o.constellation.letter(),
            o.pos_ecef.x,
            o.pos_ecef.y,
            o.pos_ecef.z,
            o.vel_ecef.x,
            o.vel_ecef.y,
            o.vel_ecef.z,
            o.pseudorange,
            o.doppler_range_rate,
            o.n_si,
            o.n_p,
            o.n_d
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| CliError::Io(e.to_string()))
}

/// Group time-sorted observations into epochs (exact timestamp equality).
pub fn group_epochs(observations: Vec<SatelliteObservation>) -> Vec<skylos::Epoch> {
    let mut epochs: Vec<skylos::Epoch> = Vec::new();
    for obs in observations {
        match epochs.last_mut() {
            Some(e) if e.time == obs.epoch_time => e.observations.push(obs),
            _ => epochs.push(skylos::Epoch {
                time: obs.epoch_time,
                observations: vec![obs],
            }),
        }
    }
    epochs
}

fn key_values(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_err(path, line_no, format!("expected key=value, got {line:?}")));
        };
        pairs.push((line_no, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_vec_f64(path: &Path, line: usize, value: &str, n: usize) -> Result<Vec<f64>, CliError> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| parse_f64(path, line, "vector element", s))
        .collect::<Result<_, _>>()?;
    if parts.len() != n {
        return Err(parse_err(path, line, format!("expected {n} values, got {}", parts.len())));
    }
    Ok(parts)
}

/// Calibration file: `key=value` lines with fx, fy, cx, cy, alpha, k1..k4,
/// width, height, valid_radius, and r_sky_i (9 row-major values).
pub fn read_calibration(path: &Path) -> Result<(FisheyeIntrinsics, Matrix3<f64>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| parse_err(path, 0, format!("cannot read: {e}")))?;
    let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (line, k, v) in key_values(path, &text)? {
        map.insert(k, (line, v));
    }
    let get = |key: &str| -> Result<(usize, String), CliError> {
        map.get(key)
            .cloned()
            .ok_or_else(|| parse_err(path, 0, format!("missing key {key}")))
    };
    let num = |key: &str| -> Result<f64, CliError> {
        let (line, v) = get(key)?;
        parse_f64(path, line, key, &v)
    };
    let (rline, rvalue) = get("r_sky_i")?;
    let r = parse_vec_f64(path, rline, &rvalue, 9)?;
    let r_sky_i = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
    let intr = FisheyeIntrinsics {
        fx: num("fx")?,
        fy: num("fy")?,
        cx: num("cx")?,
        cy: num("cy")?,
        alpha: num("alpha")?,
        k1: num("k1")?,
        k2: num("k2")?,
        k3: num("k3")?,
        k4: num("k4")?,
        image_width: num("width")? as u32,
        image_height: num("height")? as u32,
        valid_radius: num("valid_radius")?,
    };
    Ok((intr, r_sky_i))
}

pub fn write_calibration(
    path: &Path,
    intr: &FisheyeIntrinsics,
    r_sky_i: &Matrix3<f64>,
) -> Result<(), CliError> {
    let mut out = String::new();
    writeln!(out, "fx={:.9}", intr.fx).unwrap();
    writeln!(out, "fy={:.9}", intr.fy).unwrap();
    writeln!(out, "cx={:.9}", intr.cx).unwrap();
    writeln!(out, "cy={:.9}", intr.cy).unwrap();
    writeln!(out, "alpha={:.9}", intr.alpha).unwrap();
    writeln!(out, "k1={:.9}", intr.k1).unwrap();
    writeln!(out, "k2={:.9}", intr.k2).unwrap();
    writeln!(out, "k3={:.9}", intr.k3).unwrap();
    writeln!(out, "k4={:.9}", intr.k4).unwrap();
    writeln!(out, "width={}", intr.image_width).unwrap();
    writeln!(out, "height={}", intr.image_height).unwrap();
    writeln!(out, "valid_radius={:.9}", intr.valid_radius).unwrap();
    let r = r_sky_i;
    writeln!(
        out,
        "r_sky_i={:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}",
        r[(0, 0)], r[(0, 1)], r[(0, 2)],
        r[(1, 0)], r[(1, 1)], r[(1, 2)],
        r[(2, 0)], r[(2, 1)], r[(2, 2)],
    )
    .unwrap();
    std::fs::write(path, out).map_err(|e| CliError::Io(e.to_string()))
}

/// Anchor file: lat_deg, lon_deg, height_m, psi_deg as `key=value` lines.
pub fn read_anchor(path: &Path) -> Result<(GeodeticCoord, f64), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| parse_err(path, 0, format!("cannot read: {e}")))?;
    let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (line, k, v) in key_values(path, &text)? {
        map.insert(k, (line, v));
    }
    let num = |key: &str| -> Result<f64, CliError> {
        let (line, v) = map
            .get(key)
            .cloned()
            .ok_or_else(|| parse_err(path, 0, format!("missing key {key}")))?;
        parse_f64(path, line, key, &v)
    };
    Ok((
        GeodeticCoord::from_degrees(num("lat_deg")?, num("lon_deg")?, num("height_m")?),
        num("psi_deg")?.to_radians(),
    ))
}

pub fn write_anchor(path: &Path, geodetic: GeodeticCoord, psi: f64) -> Result<(), CliError> {
    let out = format!(
        "lat_deg={:.12}\nlon_deg={:.12}\nheight_m={:.6}\npsi_deg={:.9}\n",
        geodetic.latitude.to_degrees(),
        geodetic.longitude.to_degrees(),
        geodetic.height,
        psi.to_degrees()
    );
    std::fs::write(path, out).map_err(|e| CliError::Io(e.to_string()))
}

/// Pose CSV: epoch_time,px,py,pz,qw,qx,qy,qz (body pose in the world frame).
pub fn read_poses(path: &Path) -> Result<Vec<(f64, BodyPose)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| parse_err(path, 0, format!("cannot read: {e}")))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(path, 1, "missing header"));
    };
    if header.trim() != "epoch_time,px,py,pz,qw,qx,qy,qz" {
        return Err(parse_err(path, 1, "unexpected header"));
    }
    let mut poses = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(parse_err(path, line_no, format!("expected 8 fields, got {}", fields.len())));
        }
        let f = |i: usize, name: &str| parse_f64(path, line_no, name, fields[i]);
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            f(4, "qw")?,
            f(5, "qx")?,
            f(6, "qy")?,
            f(7, "qz")?,
        ));
        poses.push((
            f(0, "epoch_time")?,
            BodyPose {
                r_body_to_world: *q.to_rotation_matrix().matrix(),
                t_body_in_world: Vector3::new(f(1, "px")?, f(2, "py")?, f(3, "pz")?),
            },
        ));
    }
    poses.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[(f64, BodyPose)]) -> Result<(), CliError> {
    let mut out = String::from("epoch_time,px,py,pz,qw,qx,qy,qz\n");
    for (t, pose) in poses {
        let q = UnitQuaternion::from_matrix(&pose.r_body_to_world);
        writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.12},{:.12},{:.12},{:.12}",
            t,
            pose.t_body_in_world.x,
            pose.t_body_in_world.y,
            pose.t_body_in_world.z,
            q.w,
            q.i,
            q.j,
            q.k
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| CliError::Io(e.to_string()))
}

/// Scene description: `key=value` lines over desk defaults, with repeated
/// `occluder=` and `satellite=` entries replacing the default skyline and
/// constellation.
pub fn parse_scene(path: &Path, text: &str) -> Result<SceneSpec, CliError> {
    let pairs = key_values(path, text)?;
    let seed = pairs
        .iter()
        .find(|(_, k, _)| k == "seed")
        .map(|(line, _, v)| parse_f64(path, *line, "seed", v).map(|x| x as u64))
        .transpose()?
        .unwrap_or(42);
    let mut scene = SceneSpec::desk_default(seed);
    let mut occluders = Vec::new();
    let mut satellites = Vec::new();

    for (line, key, value) in &pairs {
        let line = *line;
        let num = || parse_f64(path, line, key, value);
        match key.as_str() {
            "seed" => {}
            "anchor_lat_deg" => scene.anchor.latitude = num()?.to_radians(),
            "anchor_lon_deg" => scene.anchor.longitude = num()?.to_radians(),
            "anchor_height_m" => scene.anchor.height = num()?,
            "psi_deg" => scene.chain.yaw_offset = num()?.to_radians(),
            "fx" => scene.intrinsics.fx = num()?,
            "fy" => scene.intrinsics.fy = num()?,
            "cx" => scene.intrinsics.cx = num()?,
            "cy" => scene.intrinsics.cy = num()?,
            "alpha" => scene.intrinsics.alpha = num()?,
            "k1" => scene.intrinsics.k1 = num()?,
            "k2" => scene.intrinsics.k2 = num()?,
            "k3" => scene.intrinsics.k3 = num()?,
            "k4" => scene.intrinsics.k4 = num()?,
            "width" => scene.intrinsics.image_width = num()? as u32,
            "height" => scene.intrinsics.image_height = num()? as u32,
            "valid_radius" => scene.intrinsics.valid_radius = num()?,
            "r_sky_i" => {
                let r = parse_vec_f64(path, line, value, 9)?;
                scene.chain.r_sky_to_body =
                    Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
            }
            "body_t" => {
                let v = parse_vec_f64(path, line, value, 3)?;
                scene.chain.body_pose.t_body_in_world = Vector3::new(v[0], v[1], v[2]);
            }
            "body_q" => {
                let v = parse_vec_f64(path, line, value, 4)?;
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    v[0], v[1], v[2], v[3],
                ));
                scene.chain.body_pose.r_body_to_world = *q.to_rotation_matrix().matrix();
            }
            "body_vel_world" => {
                let v = parse_vec_f64(path, line, value, 3)?;
                scene.body_velocity_world = Vector3::new(v[0], v[1], v[2]);
            }
            "epoch_count" => scene.epoch_count = num()? as usize,
            "epoch_interval" => scene.epoch_interval = num()?,
            "pixel_sigma" => scene.noise.pixel_sigma = num()?,
            "pr_sigma" => scene.noise.pr_sigma = num()?,
            "dop_sigma" => scene.noise.dop_sigma = num()?,
            "nlos_delay" => scene.nlos_delay = num()?,
            "clock_drift" => scene.clock_drift = num()?,
            "sky_level" => scene.sky_level = num()?,
            "building_level" => scene.building_level = num()?,
            "clock_bias_g" => {
                scene.clock_bias.insert(Constellation::G, num()?);
            }
            "clock_bias_r" => {
                scene.clock_bias.insert(Constellation::R, num()?);
            }
            "clock_bias_e" => {
                scene.clock_bias.insert(Constellation::E, num()?);
            }
            "clock_bias_c" => {
                scene.clock_bias.insert(Constellation::C, num()?);
            }
            "occluder" => {
                let v = parse_vec_f64(path, line, value, 3)?;
                occluders.push(OccluderBlock::from_degrees(v[0], v[1], v[2]));
            }
            "satellite" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 7 && parts.len() != 10 {
                    return Err(parse_err(path, line, "satellite needs 7 or 10 fields"));
                }
                let f = |i: usize, name: &str| parse_f64(path, line, name, parts[i]);
                let (n_si, n_p, n_d) = if parts.len() == 10 {
                    (f(7, "n_si")?, f(8, "n_p")?, f(9, "n_d")?)
                } else {
                    (1.0, 1.0, 1.0)
                };
                satellites.push(SceneSatellite {
                    id: parts[0].trim().to_string(),
                    azel: AzEl::from_degrees(f(1, "az_deg")?, f(2, "el_deg")?),
                    range: f(3, "range_m")?,
                    vel_ecef: Vector3::new(f(4, "vx")?, f(5, "vy")?, f(6, "vz")?),
                    n_si,
                    n_p,
                    n_d,
                });
            }
            other => {
                return Err(parse_err(path, line, format!("unknown key {other:?}")));
            }
        }
    }
    if !occluders.is_empty() {
        scene.occluders = occluders;
    }
    if !satellites.is_empty() {
        scene.constellation = satellites;
    }
    Ok(scene)
}

pub fn read_scene(path: &Path) -> Result<SceneSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| parse_err(path, 0, format!("cannot read: {e}")))?;
    parse_scene(path, &text)
}

// ── Raster I/O ──────────────────────────────────────────────────────────

pub fn read_gray_png(path: &Path) -> Result<GrayImage, CliError> {
    let img = image::open(path).map_err(|e| CliError::Unreadable {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    GrayImage::new(gray.width(), gray.height(), gray.into_raw())
        .map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<(), CliError> {
    let buf = image::GrayImage::from_raw(img.width, img.height, img.pixels.clone())
        .expect("raster dimensions match");
    buf.save(path).map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_mask_png(path: &Path, mask: &SkyMask) -> Result<(), CliError> {
    let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width, mask.height, pixels)
        .expect("raster dimensions match");
    buf.save(path).map_err(|e| CliError::Io(e.to_string()))
}

pub fn read_mask_png(path: &Path) -> Result<SkyMask, CliError> {
    let img = read_gray_png(path)?;
    Ok(SkyMask {
        width: img.width,
        height: img.height,
        bits: img.pixels.iter().map(|&p| p >= 128).collect(),
    })
}

/// Boundary pixels of a mask: sky/non-sky transitions over the
/// 4-neighborhood.
pub fn mask_boundary(mask: &SkyMask) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let here = mask.get(x, y);
            let mut boundary = false;
            if x + 1 < mask.width && mask.get(x + 1, y) != here {
                boundary = true;
            }
            if y + 1 < mask.height && mask.get(x, y + 1) != here {
                boundary = true;
            }
            if x > 0 && mask.get(x - 1, y) != here {
                boundary = true;
            }
            if y > 0 && mask.get(x, y - 1) != here {
                boundary = true;
            }
            if boundary {
                edges.push((x, y));
            }
        }
    }
    edges
}

/// RGB overlay buffer built from a grayscale base.
pub struct Overlay {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Overlay {
    pub fn from_gray(img: &GrayImage) -> Self {
        let mut pixels = Vec::with_capacity(img.pixels.len() * 3);
        for &p in &img.pixels {
            pixels.extend_from_slice(&[p, p, p]);
        }
        Self {
            width: img.width,
            height: img.height,
            pixels,
        }
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y as usize * self.width as usize + x as usize) * 3;
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Filled disc, for satellite markers.
    pub fn disc(&mut self, cx: f64, cy: f64, radius: f64, rgb: [u8; 3]) {
        let r = radius.ceil() as i64;
        let (x0, y0) = (cx.round() as i64, cy.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy) as f64) <= radius * radius {
                    let (x, y) = (x0 + dx, y0 + dy);
                    if x >= 0 && y >= 0 {
                        self.set(x as u32, y as u32, rgb);
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("raster dimensions match");
        buf.save(path).map_err(|e| CliError::Io(e.to_string()))
    }
}

pub const GREEN: [u8; 3] = [0, 200, 0];
pub const RED: [u8; 3] = [220, 30, 30];
pub const YELLOW: [u8; 3] = [235, 200, 30];
