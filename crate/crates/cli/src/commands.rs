//! Subcommand implementations. Every command is a pure function of its
//! inputs, flags, and seed; numeric outputs are formatted with fixed
//! precision so reruns are byte-identical (wall-clock timings excluded).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};

use skylos::frames::BodyPose;
use skylos::gnss::{refine_anchor, spp_solve, yaw_calibrate, RefineConfig};
use skylos::nlos::{filter_epoch, pseudorange_variance, satellite_azel, FilterConfig};
use skylos::skyseg::{apply_threshold, iou, local_threshold, mean_blur, otsu};
use skylos::synth::{forward_model, render, SceneSpec, Visibility};
use skylos::{
    AnchorPoint, EcefCoord, Epoch, EpochBatch, FisheyeIntrinsics, FrameChain, GrayImage,
    KeptObservation, SatelliteObservation, SkyMask,
};

use crate::formats::{self, Overlay, GREEN, RED, YELLOW};
use crate::{CliError, RunConfig, Segmenter};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(e.to_string()))
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

// Segment one grayscale image per the configured method. Returns the mask
// plus the Otsu report fields (None for the local method).
fn segment_image(
    img: &GrayImage,
    config: &RunConfig,
) -> Result<(SkyMask, Option<skylos::OtsuResult>), CliError> {
    let blurred = mean_blur(img, config.blur_kernel).map_err(|e| CliError::Io(e.to_string()))?;
    match config.segmenter {
        Segmenter::Otsu => {
            let result = otsu(&blurred.histogram()).map_err(|e| CliError::Io(e.to_string()))?;
            let mask = if result.degenerate {
                SkyMask {
                    width: blurred.width,
                    height: blurred.height,
                    bits: vec![false; blurred.pixels.len()],
                }
            } else {
                apply_threshold(&blurred, result.threshold)
            };
            Ok((mask, Some(result)))
        }
        Segmenter::Local => {
            let mask = local_threshold(&blurred, config.local_window, config.local_offset)
                .map_err(|e| CliError::Io(e.to_string()))?;
            Ok((mask, None))
        }
    }
}

fn write_boundary_overlay(
    path: &Path,
    base: &GrayImage,
    mask: &SkyMask,
) -> Result<(), CliError> {
    let mut overlay = Overlay::from_gray(base);
    for (x, y) in formats::mask_boundary(mask) {
        overlay.set(x, y, GREEN);
    }
    overlay.save(path)
}

/// `segment`: mask + boundary overlay + one-line report per input image.
///
/// `input` may be a single raster or a directory of them. Returns the
/// degenerate flag; the caller maps it to exit code 3.
pub fn run_segment(input: &Path, out_dir: &Path, config: &RunConfig) -> Result<bool, CliError> {
    ensure_dir(out_dir)?;
    let mut images: Vec<PathBuf> = if input.is_dir() {
        std::fs::read_dir(input)
            .map_err(|e| CliError::Unreadable {
                file: input.display().to_string(),
                message: e.to_string(),
            })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension().map(|x| x == "png").unwrap_or(false)
                    && !p.to_string_lossy().ends_with(".mask.png")
            })
            .collect()
    } else {
        vec![input.to_path_buf()]
    };
    images.sort();
    if images.is_empty() {
        return Err(CliError::Unreadable {
            file: input.display().to_string(),
            message: "no .png images found".into(),
        });
    }

    let mut any_degenerate = false;
    for image_path in &images {
        let img = formats::read_gray_png(image_path)?;
        let (mask, result) = segment_image(&img, config)?;
        let stem = stem_of(image_path);
        formats::write_mask_png(&out_dir.join(format!("{stem}.mask.png")), &mask)?;
        write_boundary_overlay(&out_dir.join(format!("{stem}.overlay.png")), &img, &mask)?;

        let report = match (config.segmenter, result) {
            (Segmenter::Otsu, Some(r)) => {
                if r.degenerate {
                    any_degenerate = true;
                }
                format!(
                    "image={stem} segmenter=otsu threshold={} sigma_b2={:.6} degenerate={}\n",
                    r.threshold, r.between_class_variance, r.degenerate
                )
            }
            _ => format!(
                "image={stem} segmenter=local window={} offset={:.3} degenerate=false\n",
                config.local_window, config.local_offset
            ),
        };
        std::fs::write(out_dir.join(format!("{stem}.report.txt")), &report)
            .map_err(|e| CliError::Io(e.to_string()))?;
        print!("{report}");
    }
    Ok(any_degenerate)
}

struct ClassifyInputs {
    image: GrayImage,
    epoch: Epoch,
    intrinsics: FisheyeIntrinsics,
    chain: FrameChain,
    anchor: AnchorPoint,
}

fn load_classify_inputs(
    image: &Path,
    observations: &Path,
    calibration: &Path,
    anchor: &Path,
    pose: &Path,
    image_time: Option<f64>,
    config: &RunConfig,
) -> Result<Option<ClassifyInputs>, CliError> {
    let img = formats::read_gray_png(image)?;
    let obs = formats::read_observations(observations)?;
    let (intrinsics, r_sky_i) = formats::read_calibration(calibration)?;
    let (anchor_geo, psi) = formats::read_anchor(anchor)?;
    let poses = formats::read_poses(pose)?;
    if poses.is_empty() {
        return Err(CliError::Parse {
            file: pose.display().to_string(),
            line: 0,
            message: "no poses".into(),
        });
    }

    let epochs = formats::group_epochs(obs);
    if epochs.is_empty() {
        return Ok(None);
    }
    let t_image = image_time.unwrap_or(epochs[0].time);
    let epoch = epochs
        .iter()
        .min_by(|a, b| {
            (a.time - t_image)
                .abs()
                .total_cmp(&(b.time - t_image).abs())
        })
        .cloned()
        .expect("nonempty epochs");
    if (epoch.time - t_image).abs() > config.timestamp_tolerance {
        return Err(CliError::Sync(format!(
            "nearest epoch {} is {:.3}s from image time {} (tolerance {:.3}s)",
            epoch.time,
            (epoch.time - t_image).abs(),
            t_image,
            config.timestamp_tolerance
        )));
    }
    let (pose_time, body_pose) = poses
        .iter()
        .min_by(|a, b| (a.0 - epoch.time).abs().total_cmp(&(b.0 - epoch.time).abs()))
        .cloned()
        .expect("nonempty poses");
    if (pose_time - epoch.time).abs() > config.timestamp_tolerance {
        return Err(CliError::Sync(format!(
            "nearest pose {} is {:.3}s from epoch {} (tolerance {:.3}s)",
            pose_time,
            (pose_time - epoch.time).abs(),
            epoch.time,
            config.timestamp_tolerance
        )));
    }

    Ok(Some(ClassifyInputs {
        image: img,
        epoch,
        intrinsics,
        chain: FrameChain::new(psi, r_sky_i, body_pose),
        anchor: AnchorPoint::from_geodetic(anchor_geo),
    }))
}

/// `classify`: per-satellite verdict CSV plus an annotated overlay.
pub fn run_classify(
    image: &Path,
    observations: &Path,
    calibration: &Path,
    anchor: &Path,
    pose: &Path,
    image_time: Option<f64>,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    let header = "sat_id,u,v,elevation_deg,verdict,variance_pr,variance_dop\n";
    let Some(inputs) = load_classify_inputs(
        image,
        observations,
        calibration,
        anchor,
        pose,
        image_time,
        config,
    )?
    else {
        // Empty observation file: header-only CSV, success.
        std::fs::write(out_dir.join("verdicts.csv"), header)
            .map_err(|e| CliError::Io(e.to_string()))?;
        return Ok(());
    };

    let (mask, otsu_result) = segment_image(&inputs.image, config)?;
    let mask_ref = match otsu_result {
        Some(r) if r.degenerate => None,
        _ => Some(&mask),
    };
    let filtered = filter_epoch(
        &inputs.epoch.observations,
        &inputs.chain,
        &inputs.anchor,
        &inputs.intrinsics,
        mask_ref,
        &FilterConfig {
            elevation_cutoff: config.elevation_cutoff,
        },
    )
    .map_err(|e| CliError::Io(e.to_string()))?;

    // One row per observation, sorted by satellite id.
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut overlay = Overlay::from_gray(&inputs.image);
    for (x, y) in formats::mask_boundary(&mask) {
        overlay.set(x, y, GREEN);
    }
    for kept in &filtered.kept {
        let obs = &kept.observation;
        let pre = skylos::nlos::back_project(
            &inputs.chain,
            &inputs.anchor,
            &inputs.intrinsics,
            obs,
        );
        let el = satellite_azel(&inputs.anchor, obs).elevation;
        let (u, v) = match pre {
            skylos::nlos::BackProjection::InView { pixel, .. } => {
                overlay.disc(pixel.u, pixel.v, 4.0, RED);
                (format!("{:.3}", pixel.u), format!("{:.3}", pixel.v))
            }
            skylos::nlos::BackProjection::OutOfView => (String::new(), String::new()),
        };
        rows.push((
            obs.sat_id.clone(),
            format!(
                "{},{},{},{:.6},LOS,{:.6},{:.6}\n",
                obs.sat_id,
                u,
                v,
                el.to_degrees(),
                kept.pseudorange_variance,
                kept.doppler_variance
            ),
        ));
    }
    for (obs, class) in &filtered.rejected {
        let (u, v) = match class.pixel {
            Some(p) => {
                overlay.disc(p.u, p.v, 4.0, YELLOW);
                (format!("{:.3}", p.u), format!("{:.3}", p.v))
            }
            None => (String::new(), String::new()),
        };
        rows.push((
            obs.sat_id.clone(),
            format!(
                "{},{},{},{:.6},{},,\n",
                obs.sat_id,
                u,
                v,
                class.elevation.to_degrees(),
                class.verdict.label()
            ),
        ));
    }
    rows.sort();

    let mut csv = String::from(header);
    for (_, row) in &rows {
        csv.push_str(row);
    }
    std::fs::write(out_dir.join("verdicts.csv"), csv).map_err(|e| CliError::Io(e.to_string()))?;
    overlay.save(&out_dir.join("overlay.png"))?;
    Ok(())
}

/// Satellite filter applied before SPP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SppFilter {
    None,
    Sky,
    Elevation,
}

// Weight observations by the elevation model after a bootstrap solve
// locates the receiver well enough to compute elevations.
fn bootstrap_weighted(
    observations: &[SatelliteObservation],
    cutoff: Option<f64>,
) -> Result<(Vec<KeptObservation>, AnchorPoint), CliError> {
    let unweighted: Vec<KeptObservation> = observations
        .iter()
        .map(|o| KeptObservation {
            observation: o.clone(),
            pseudorange_variance: 1.0,
            doppler_variance: 1.0,
        })
        .collect();
    let coarse = spp_solve(&unweighted, None)?;
    let anchor = AnchorPoint::from_ecef(coarse.position_ecef)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let mut kept = Vec::new();
    for obs in observations {
        let el = satellite_azel(&anchor, obs).elevation;
        if el <= 0.0 {
            continue;
        }
        if let Some(cut) = cutoff {
            if el < cut {
                continue;
            }
        }
        kept.push(KeptObservation {
            observation: obs.clone(),
            pseudorange_variance: pseudorange_variance(obs, el)
                .map_err(|e| CliError::Io(e.to_string()))?,
            doppler_variance: skylos::nlos::doppler_variance(obs, el)
                .map_err(|e| CliError::Io(e.to_string()))?,
        });
    }
    Ok((kept, anchor))
}

/// `spp`: per-epoch weighted single-point positioning with the chosen
/// satellite filter. Sky filtering needs the image/calibration/anchor/pose
/// files; the other modes need only the observation CSV.
#[allow(clippy::too_many_arguments)]
pub fn run_spp(
    observations: &Path,
    filter: SppFilter,
    image: Option<&Path>,
    calibration: Option<&Path>,
    anchor: Option<&Path>,
    pose: Option<&Path>,
    image_time: Option<f64>,
    out: Option<&Path>,
    config: &RunConfig,
) -> Result<(), CliError> {
    let obs = formats::read_observations(observations)?;
    let epochs = formats::group_epochs(obs);
    let mut report = String::new();

    let sky_context = if filter == SppFilter::Sky {
        let (Some(image), Some(calibration), Some(anchor), Some(pose)) =
            (image, calibration, anchor, pose)
        else {
            return Err(CliError::Io(
                "--filter sky needs --image, --calibration, --anchor and --pose".into(),
            ));
        };
        let inputs = load_classify_inputs(
            image,
            observations,
            calibration,
            anchor,
            pose,
            image_time,
            config,
        )?;
        match inputs {
            Some(inputs) => {
                let (mask, otsu_result) = segment_image(&inputs.image, config)?;
                let degenerate = matches!(otsu_result, Some(r) if r.degenerate);
                Some((inputs, mask, degenerate))
            }
            None => None,
        }
    } else {
        None
    };

    for epoch in &epochs {
        let (kept, label) = match filter {
            SppFilter::None => (bootstrap_weighted(&epoch.observations, None)?.0, "none"),
            SppFilter::Elevation => (
                bootstrap_weighted(&epoch.observations, Some(config.elevation_cutoff))?.0,
                "elevation",
            ),
            SppFilter::Sky => {
                let Some((inputs, mask, degenerate)) = &sky_context else {
                    return Err(CliError::Io("sky filter context unavailable".into()));
                };
                if (epoch.time - inputs.epoch.time).abs() > config.timestamp_tolerance {
                    return Err(CliError::Sync(format!(
                        "epoch {} is beyond the image association tolerance",
                        epoch.time
                    )));
                }
                let filtered = filter_epoch(
                    &epoch.observations,
                    &inputs.chain,
                    &inputs.anchor,
                    &inputs.intrinsics,
                    if *degenerate { None } else { Some(mask) },
                    &FilterConfig {
                        elevation_cutoff: config.elevation_cutoff,
                    },
                )
                .map_err(|e| CliError::Io(e.to_string()))?;
                (filtered.kept, "sky")
            }
        };

        let rejected = epoch.observations.len() - kept.len();
        let sol = spp_solve(&kept, None)?;
        let geo = skylos::geodesy::ecef_to_geodetic(sol.position_ecef)
            .map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(
            report,
            "epoch_time={:.6} filter={} kept={} rejected={}",
            epoch.time,
            label,
            kept.len(),
            rejected
        )
        .unwrap();
        writeln!(
            report,
            "ecef_x={:.6} ecef_y={:.6} ecef_z={:.6}",
            sol.position_ecef.x, sol.position_ecef.y, sol.position_ecef.z
        )
        .unwrap();
        writeln!(
            report,
            "lat_deg={:.9} lon_deg={:.9} height_m={:.6}",
            geo.latitude.to_degrees(),
            geo.longitude.to_degrees(),
            geo.height
        )
        .unwrap();
        for (c, bias) in &sol.clock.biases {
            writeln!(report, "clock_{}={:.6}", c.letter(), bias).unwrap();
        }
        writeln!(
            report,
            "post_fit_rms_m={:.6} iterations={}",
            sol.post_fit_rms, sol.iterations
        )
        .unwrap();
    }

    print!("{report}");
    if let Some(out) = out {
        std::fs::write(out, report).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

/// `bench-seg`: mean IoU and wall time of the Otsu and local-threshold
/// methods over a directory of image/mask pairs.
pub fn run_bench_seg(
    dataset: &Path,
    out: Option<&Path>,
    config: &RunConfig,
) -> Result<(), CliError> {
    let mut images: Vec<PathBuf> = std::fs::read_dir(dataset)
        .map_err(|e| CliError::Unreadable {
            file: dataset.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().map(|x| x == "png").unwrap_or(false)
                && !p.to_string_lossy().ends_with(".mask.png")
        })
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(CliError::Unreadable {
            file: dataset.display().to_string(),
            message: "no images in dataset".into(),
        });
    }

    // Pairing must be total in both directions.
    let masks: Vec<PathBuf> = std::fs::read_dir(dataset)
        .map_err(|e| CliError::Io(e.to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.to_string_lossy().ends_with(".mask.png"))
        .collect();
    for mask in &masks {
        let image = PathBuf::from(
            mask.to_string_lossy()
                .replace(".mask.png", ".png"),
        );
        if !image.exists() {
            return Err(CliError::Unreadable {
                file: mask.display().to_string(),
                message: "ground-truth mask without a paired image".into(),
            });
        }
    }

    let mut otsu_iou_sum = 0.0;
    let mut otsu_time_sum = 0.0;
    let mut local_iou_sum = 0.0;
    let mut local_time_sum = 0.0;
    for image_path in &images {
        let mask_path = image_path.with_extension("mask.png");
        if !mask_path.exists() {
            return Err(CliError::Unreadable {
                file: image_path.display().to_string(),
                message: "no paired .mask.png ground truth".into(),
            });
        }
        let img = formats::read_gray_png(image_path)?;
        let truth = formats::read_mask_png(&mask_path)?;

        let t0 = Instant::now();
        let blurred = mean_blur(&img, config.blur_kernel).map_err(|e| CliError::Io(e.to_string()))?;
        let r = otsu(&blurred.histogram()).map_err(|e| CliError::Io(e.to_string()))?;
        let otsu_mask = apply_threshold(&blurred, r.threshold);
        otsu_time_sum += t0.elapsed().as_secs_f64();
        otsu_iou_sum += iou(&otsu_mask, &truth).map_err(|e| CliError::Io(e.to_string()))?;

        let t1 = Instant::now();
        let blurred = mean_blur(&img, config.blur_kernel).map_err(|e| CliError::Io(e.to_string()))?;
        let local_mask = local_threshold(&blurred, config.local_window, config.local_offset)
            .map_err(|e| CliError::Io(e.to_string()))?;
        local_time_sum += t1.elapsed().as_secs_f64();
        local_iou_sum += iou(&local_mask, &truth).map_err(|e| CliError::Io(e.to_string()))?;
    }

    let n = images.len() as f64;
    let mut table = String::new();
    writeln!(table, "Method,Time(s),IOU(%)").unwrap();
    writeln!(
        table,
        "OTSU,{:.4},{:.4}",
        otsu_time_sum / n,
        100.0 * otsu_iou_sum / n
    )
    .unwrap();
    writeln!(
        table,
        "Local,{:.4},{:.4}",
        local_time_sum / n,
        100.0 * local_iou_sum / n
    )
    .unwrap();
    print!("{table}");
    if let Some(out) = out {
        std::fs::write(out, table).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

/// `synth`: render a scene to a dataset directory, or with `count`,
/// generate that many randomized image/mask pairs for benchmarking.
pub fn run_synth(
    scene_path: Option<&Path>,
    out_dir: &Path,
    count: Option<usize>,
    config: &RunConfig,
) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    if let Some(count) = count {
        for i in 0..count {
            let scene = SceneSpec::randomized(config.seed + i as u64);
            let (img, truth) = render(&scene);
            formats::write_gray_png(&out_dir.join(format!("scene_{i:03}.png")), &img)?;
            formats::write_mask_png(&out_dir.join(format!("scene_{i:03}.mask.png")), &truth.mask)?;
        }
        return Ok(());
    }

    let scene = match scene_path {
        Some(p) => formats::read_scene(p)?,
        None => SceneSpec::desk_default(config.seed),
    };
    let (img, truth) = render(&scene);
    let batch = forward_model(&scene, &truth);

    formats::write_gray_png(&out_dir.join("image.png"), &img)?;
    formats::write_mask_png(&out_dir.join("mask.png"), &truth.mask)?;
    let all_obs: Vec<SatelliteObservation> = batch
        .epochs
        .iter()
        .flat_map(|e| e.observations.iter().cloned())
        .collect();
    formats::write_observations(&out_dir.join("observations.csv"), &all_obs)?;
    formats::write_calibration(
        &out_dir.join("calibration.txt"),
        &scene.intrinsics,
        &scene.chain.r_sky_to_body,
    )?;
    formats::write_anchor(
        &out_dir.join("anchor.txt"),
        scene.anchor,
        scene.chain.yaw_offset,
    )?;
    let poses: Vec<(f64, BodyPose)> = batch
        .epochs
        .iter()
        .map(|e| {
            (
                e.time,
                BodyPose {
                    r_body_to_world: scene.chain.body_pose.r_body_to_world,
                    t_body_in_world: scene.body_position_world(e.time),
                },
            )
        })
        .collect();
    formats::write_poses(&out_dir.join("poses.csv"), &poses)?;

    let mut truth_txt = String::new();
    writeln!(truth_txt, "true_psi_deg={:.9}", truth.true_psi.to_degrees()).unwrap();
    let anchor = scene.anchor_point();
    writeln!(
        truth_txt,
        "true_anchor_ecef={:.6},{:.6},{:.6}",
        anchor.ecef.x, anchor.ecef.y, anchor.ecef.z
    )
    .unwrap();
    for (i, sat) in scene.constellation.iter().enumerate() {
        writeln!(
            truth_txt,
            "visibility={},{}",
            sat.id,
            match truth.visibility[i] {
                Visibility::Los => "LOS",
                Visibility::Nlos => "NLOS",
            }
        )
        .unwrap();
    }
    for epoch in &batch.epochs {
        let p = scene.receiver_ecef(epoch.time);
        writeln!(
            truth_txt,
            "receiver={:.6},{:.6},{:.6},{:.6}",
            epoch.time, p.x, p.y, p.z
        )
        .unwrap();
    }
    std::fs::write(out_dir.join("truth.txt"), truth_txt)
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

// ── Pipeline ────────────────────────────────────────────────────────────

struct PipelineTruth {
    true_psi: f64,
    true_anchor_ecef: EcefCoord,
    /// Per-epoch receiver positions, keyed by epoch time.
    receivers: Vec<(f64, EcefCoord)>,
}

struct PipelineInputs {
    image: GrayImage,
    batch: EpochBatch,
    intrinsics: FisheyeIntrinsics,
    r_sky_to_body: Matrix3<f64>,
    poses: Vec<(f64, BodyPose)>,
    truth: PipelineTruth,
}

fn inputs_from_scene(scene: &SceneSpec) -> PipelineInputs {
    let (image, truth) = render(scene);
    let batch = forward_model(scene, &truth);
    let poses: Vec<(f64, BodyPose)> = batch
        .epochs
        .iter()
        .map(|e| {
            (
                e.time,
                BodyPose {
                    r_body_to_world: scene.chain.body_pose.r_body_to_world,
                    t_body_in_world: scene.body_position_world(e.time),
                },
            )
        })
        .collect();
    let receivers = batch
        .epochs
        .iter()
        .map(|e| (e.time, scene.receiver_ecef(e.time)))
        .collect();
    PipelineInputs {
        image,
        intrinsics: scene.intrinsics.clone(),
        r_sky_to_body: scene.chain.r_sky_to_body,
        poses,
        truth: PipelineTruth {
            true_psi: truth.true_psi,
            true_anchor_ecef: scene.anchor_point().ecef,
            receivers,
        },
        batch,
    }
}

fn inputs_from_dataset(dir: &Path) -> Result<PipelineInputs, CliError> {
    let image = formats::read_gray_png(&dir.join("image.png"))?;
    let observations = formats::read_observations(&dir.join("observations.csv"))?;
    let epochs = formats::group_epochs(observations);
    let batch = EpochBatch::new(epochs)?;
    let (intrinsics, r_sky_to_body) = formats::read_calibration(&dir.join("calibration.txt"))?;
    let poses = formats::read_poses(&dir.join("poses.csv"))?;

    let truth_path = dir.join("truth.txt");
    let text = std::fs::read_to_string(&truth_path).map_err(|e| CliError::Unreadable {
        file: truth_path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut true_psi = 0.0;
    let mut true_anchor = EcefCoord::new(0.0, 0.0, 0.0);
    let mut receivers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let vals = |n: usize| -> Result<Vec<f64>, CliError> {
            let parts: Vec<f64> = value
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| CliError::Parse {
                        file: truth_path.display().to_string(),
                        line: line_no,
                        message: format!("bad number {s:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if parts.len() != n {
                return Err(CliError::Parse {
                    file: truth_path.display().to_string(),
                    line: line_no,
                    message: format!("expected {n} values"),
                });
            }
            Ok(parts)
        };
        match key.trim() {
            "true_psi_deg" => true_psi = vals(1)?[0].to_radians(),
            "true_anchor_ecef" => {
                let v = vals(3)?;
                true_anchor = EcefCoord::new(v[0], v[1], v[2]);
            }
            "receiver" => {
                let v = vals(4)?;
                receivers.push((v[0], EcefCoord::new(v[1], v[2], v[3])));
            }
            "visibility" => {}
            _ => {}
        }
    }

    Ok(PipelineInputs {
        image,
        batch,
        intrinsics,
        r_sky_to_body,
        poses,
        truth: PipelineTruth {
            true_psi,
            true_anchor_ecef: true_anchor,
            receivers,
        },
    })
}

struct EpochOutcome {
    time: f64,
    kept: usize,
    rejected: usize,
    true_enu: Vector3<f64>,
    unfiltered_enu: Vector3<f64>,
    filtered_enu: Vector3<f64>,
}

impl EpochOutcome {
    fn unfiltered_horizontal(&self) -> f64 {
        let d = self.unfiltered_enu - self.true_enu;
        d.x.hypot(d.y)
    }
    fn filtered_horizontal(&self) -> f64 {
        let d = self.filtered_enu - self.true_enu;
        d.x.hypot(d.y)
    }
}

struct TrialOutcome {
    psi_est: f64,
    psi_err: f64,
    coarse_anchor_err: f64,
    refined_anchor_err: f64,
    threshold: Option<u8>,
    epochs: Vec<EpochOutcome>,
}

impl TrialOutcome {
    fn median_horizontal(&self, filtered: bool) -> f64 {
        let mut errs: Vec<f64> = self
            .epochs
            .iter()
            .map(|e| {
                if filtered {
                    e.filtered_horizontal()
                } else {
                    e.unfiltered_horizontal()
                }
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        if errs.is_empty() {
            return f64::NAN;
        }
        let mid = errs.len() / 2;
        if errs.len() % 2 == 1 {
            errs[mid]
        } else {
            0.5 * (errs[mid - 1] + errs[mid])
        }
    }

    fn wins(&self) -> usize {
        self.epochs
            .iter()
            .filter(|e| e.filtered_horizontal() < e.unfiltered_horizontal())
            .count()
    }
}

fn normalize_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * std::f64::consts::PI);
    if x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    x
}

// Run the full initialization + filtering pipeline on prepared inputs.
fn pipeline_trial(inputs: &PipelineInputs, config: &RunConfig) -> Result<TrialOutcome, CliError> {
    let batch = &inputs.batch;
    // Coarse anchor: elevation-filtered SPP on the first epoch.
    let (kept0, _) =
        bootstrap_weighted(&batch.epochs[0].observations, Some(config.elevation_cutoff))?;
    let coarse_sol = spp_solve(&kept0, None)?;
    let coarse_anchor =
        AnchorPoint::from_ecef(coarse_sol.position_ecef).map_err(|e| CliError::Io(e.to_string()))?;

    // Yaw calibration from Doppler; body velocities by finite differences
    // of the pose track (the VIO stand-in).
    let velocities: Vec<Vector3<f64>> = inputs
        .poses
        .iter()
        .enumerate()
        .map(|(i, (t, pose))| {
            if i + 1 < inputs.poses.len() {
                let (tn, next) = &inputs.poses[i + 1];
                (next.t_body_in_world - pose.t_body_in_world) / (tn - t)
            } else if i > 0 {
                let (tp, prev) = &inputs.poses[i - 1];
                (pose.t_body_in_world - prev.t_body_in_world) / (t - tp)
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    let cal = yaw_calibrate(batch, &velocities, &coarse_anchor)?;

    // Anchor refinement with the calibrated yaw and drift.
    let world_positions: Vec<Vector3<f64>> = inputs
        .poses
        .iter()
        .map(|(_, pose)| pose.t_body_in_world)
        .collect();
    let refined = refine_anchor(
        batch,
        &coarse_anchor,
        &world_positions,
        cal.psi,
        &RefineConfig {
            drift_rate: cal.drift_rate,
            ..Default::default()
        },
    )?;
    let refined_anchor =
        AnchorPoint::from_ecef(refined.anchor_ecef).map_err(|e| CliError::Io(e.to_string()))?;

    // Sky mask for the whole window (one sky image per scene).
    let (mask, otsu_result) = segment_image(&inputs.image, config)?;
    let threshold = otsu_result.as_ref().map(|r| r.threshold);
    let mask_ref = match &otsu_result {
        Some(r) if r.degenerate => None,
        _ => Some(&mask),
    };

    let truth_anchor = AnchorPoint::from_ecef(inputs.truth.true_anchor_ecef)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let mut epochs_out = Vec::new();
    for (k, epoch) in batch.epochs.iter().enumerate() {
        let chain = FrameChain::new(cal.psi, inputs.r_sky_to_body, inputs.poses[k].1.clone());
        let filtered = filter_epoch(
            &epoch.observations,
            &chain,
            &refined_anchor,
            &inputs.intrinsics,
            mask_ref,
            &FilterConfig {
                elevation_cutoff: config.elevation_cutoff,
            },
        )
        .map_err(|e| CliError::Io(e.to_string()))?;

        let (unfiltered_kept, _) = bootstrap_weighted(&epoch.observations, None)?;
        let sol_unfiltered = spp_solve(&unfiltered_kept, Some(refined_anchor.ecef))?;
        let sol_filtered = spp_solve(&filtered.kept, Some(refined_anchor.ecef))?;

        let truth_pos = inputs
            .truth
            .receivers
            .iter()
            .min_by(|a, b| (a.0 - epoch.time).abs().total_cmp(&(b.0 - epoch.time).abs()))
            .map(|(_, p)| *p)
            .ok_or_else(|| CliError::Io("truth has no receiver positions".into()))?;

        let enu_of = |p: EcefCoord| {
            skylos::geodesy::ecef_to_enu_point(&truth_anchor, p).to_vector()
        };
        epochs_out.push(EpochOutcome {
            time: epoch.time,
            kept: filtered.kept.len(),
            rejected: filtered.rejected.len(),
            true_enu: enu_of(truth_pos),
            unfiltered_enu: enu_of(sol_unfiltered.position_ecef),
            filtered_enu: enu_of(sol_filtered.position_ecef),
        });
    }

    Ok(TrialOutcome {
        psi_est: cal.psi,
        psi_err: normalize_angle(cal.psi - inputs.truth.true_psi),
        coarse_anchor_err: (coarse_anchor.ecef.to_vector()
            - inputs.truth.true_anchor_ecef.to_vector())
        .norm(),
        refined_anchor_err: (refined.anchor_ecef.to_vector()
            - inputs.truth.true_anchor_ecef.to_vector())
        .norm(),
        threshold,
        epochs: epochs_out,
    })
}

/// `pipeline`: synth (or load) → coarse SPP → yaw → anchor refinement →
/// segmentation + filtering → filtered vs unfiltered SPP, with plot data.
pub fn run_pipeline(
    scene_path: Option<&Path>,
    dataset: Option<&Path>,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<(), CliError> {
    ensure_dir(out_dir)?;

    let base_scene = match (scene_path, dataset) {
        (Some(p), _) => Some(formats::read_scene(p)?),
        (None, None) => Some(SceneSpec::desk_default(config.seed)),
        (None, Some(_)) => None,
    };

    let trials = config.monte_carlo_trials.max(1);
    let mut outcomes = Vec::with_capacity(trials);
    let mut report = String::new();
    writeln!(report, "trials={trials}").unwrap();
    writeln!(report, "seed={}", config.seed).unwrap();

    for trial in 0..trials {
        let inputs = match (&base_scene, dataset) {
            (Some(scene), _) => {
                let mut s = scene.clone();
                s.seed = scene.seed.wrapping_add(trial as u64);
                inputs_from_scene(&s)
            }
            (None, Some(dir)) => inputs_from_dataset(dir)?,
            (None, None) => unreachable!(),
        };
        let outcome = pipeline_trial(&inputs, config)?;

        writeln!(
            report,
            "trial={} psi_true_deg={:.6} psi_est_deg={:.6} psi_err_deg={:.6}",
            trial,
            inputs.truth.true_psi.to_degrees(),
            outcome.psi_est.to_degrees(),
            outcome.psi_err.to_degrees()
        )
        .unwrap();
        writeln!(
            report,
            "trial={} coarse_anchor_err_m={:.6} refined_anchor_err_m={:.6} otsu_threshold={}",
            trial,
            outcome.coarse_anchor_err,
            outcome.refined_anchor_err,
            outcome
                .threshold
                .map(|t| t.to_string())
                .unwrap_or_else(|| "none".into())
        )
        .unwrap();
        let kept: usize = outcome.epochs.iter().map(|e| e.kept).sum();
        let rejected: usize = outcome.epochs.iter().map(|e| e.rejected).sum();
        writeln!(
            report,
            "trial={} kept={} rejected={} median_h_unfiltered_m={:.6} median_h_filtered_m={:.6} wins={}/{}",
            trial,
            kept,
            rejected,
            outcome.median_horizontal(false),
            outcome.median_horizontal(true),
            outcome.wins(),
            outcome.epochs.len()
        )
        .unwrap();

        if trial == 0 {
            let mut xy = String::from("epoch_time,true_e,true_n,unfilt_e,unfilt_n,filt_e,filt_n\n");
            let mut th = String::from("epoch_time,true_u,unfilt_u,filt_u\n");
            for e in &outcome.epochs {
                writeln!(
                    xy,
                    "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    e.time,
                    e.true_enu.x,
                    e.true_enu.y,
                    e.unfiltered_enu.x,
                    e.unfiltered_enu.y,
                    e.filtered_enu.x,
                    e.filtered_enu.y
                )
                .unwrap();
                writeln!(
                    th,
                    "{:.6},{:.6},{:.6},{:.6}",
                    e.time, e.true_enu.z, e.unfiltered_enu.z, e.filtered_enu.z
                )
                .unwrap();
            }
            std::fs::write(out_dir.join("xy.csv"), xy).map_err(|e| CliError::Io(e.to_string()))?;
            std::fs::write(out_dir.join("th.csv"), th).map_err(|e| CliError::Io(e.to_string()))?;
        }
        outcomes.push(outcome);
    }

    let mut med_unfilt: Vec<f64> = outcomes.iter().map(|o| o.median_horizontal(false)).collect();
    let mut med_filt: Vec<f64> = outcomes.iter().map(|o| o.median_horizontal(true)).collect();
    med_unfilt.sort_by(f64::total_cmp);
    med_filt.sort_by(f64::total_cmp);
    let better = outcomes
        .iter()
        .filter(|o| o.median_horizontal(true) < o.median_horizontal(false))
        .count();
    writeln!(
        report,
        "summary median_h_unfiltered_m={:.6} median_h_filtered_m={:.6} filtered_better_trials={}/{}",
        med_unfilt[med_unfilt.len() / 2],
        med_filt[med_filt.len() / 2],
        better,
        trials
    )
    .unwrap();

    print!("{report}");
    std::fs::write(out_dir.join("report.txt"), report)
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}
