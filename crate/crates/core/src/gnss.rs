//! Weighted single-point positioning plus the two alignment solvers:
//! Doppler-based yaw-offset calibration and pseudorange-based anchor
//! refinement with chained per-epoch clock factors.
//!
//! All three are small damped Gauss-Newton problems. The residual
//! convention throughout is r = measured − predicted with J = ∂r/∂x, so
//! every solver applies the same step δ = −(JᵀWJ + λI)⁻¹·JᵀW·r with
//! multiplicative Levenberg damping (start 1e-3, ×10 on cost increase,
//! ÷10 on decrease).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::frames::rot_up;
use crate::geodesy::{self, AnchorPoint, EcefCoord};
use crate::nlos::{Constellation, KeptObservation, SatelliteObservation};

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("underdetermined system: {rows} measurements for {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("solver diverged")]
    Diverged,
    #[error("singular geometry: normal matrix condition {0:.3e}")]
    SingularGeometry(f64),
    #[error("yaw is unobservable: all window velocities below {0} m/s")]
    Unobservable(f64),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}

const DAMPING_INIT: f64 = 1e-3;
const DAMPING_MAX: f64 = 1e12;

/// One GNSS measurement epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub time: f64,
    pub observations: Vec<SatelliteObservation>,
}

/// Strictly time-ordered sliding window of epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochBatch {
    pub epochs: Vec<Epoch>,
}

impl EpochBatch {
    pub fn new(epochs: Vec<Epoch>) -> Result<Self, SolveError> {
        if epochs.is_empty() {
            return Err(SolveError::InvalidBatch("no epochs".into()));
        }
        for (i, e) in epochs.iter().enumerate() {
            if e.observations.is_empty() {
                return Err(SolveError::InvalidBatch(format!("epoch {i} is empty")));
            }
            if i > 0 && e.time <= epochs[i - 1].time {
                return Err(SolveError::InvalidBatch(format!(
                    "epoch times not strictly increasing at index {i}"
                )));
            }
            if e.observations.iter().any(|o| o.epoch_time != e.time) {
                return Err(SolveError::InvalidBatch(format!(
                    "epoch {i} contains observations with a different timestamp"
                )));
            }
        }
        Ok(Self { epochs })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// Receiver clock bias per constellation plus the drift rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClockState {
    /// Biases in meters, keyed by constellation; only constellations
    /// present in the data carry an entry.
    pub biases: BTreeMap<Constellation, f64>,
    /// Clock drift rate, m/s.
    pub drift_rate: f64,
}

/// Single-point positioning result.
#[derive(Debug, Clone, PartialEq)]
pub struct SppSolution {
    pub position_ecef: EcefCoord,
    pub clock: ClockState,
    /// Unweighted RMS of the post-fit pseudorange residuals, meters.
    pub post_fit_rms: f64,
    pub iterations: usize,
    /// Position block of (JᵀWJ)⁻¹ at the solution, m².
    pub covariance: Matrix3<f64>,
}

/// Yaw-offset calibration result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawCalibration {
    /// Yaw offset ψ, radians, normalized to (−π, π].
    pub psi: f64,
    /// Window-average clock drift rate, m/s.
    pub drift_rate: f64,
    /// Unweighted RMS of the Doppler residuals, m/s.
    pub residual_rms: f64,
}

/// Anchor refinement result.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedAnchor {
    pub anchor_ecef: EcefCoord,
    /// Per-epoch clock states, one per window epoch.
    pub per_epoch_biases: Vec<ClockState>,
    /// Unweighted RMS of the pseudorange residuals, meters.
    pub residual_rms: f64,
}

/// Knobs for [`refine_anchor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Clock random-walk sigma, meters per √second; the clock-factor
    /// weight is 1/(σ²·Δt). Default 0.1 m.
    pub clock_process_sigma: f64,
    /// Window-average clock drift rate δṫ, m/s (from yaw calibration).
    pub drift_rate: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            clock_process_sigma: 0.1,
            drift_rate: 0.0,
        }
    }
}

fn normalize_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * std::f64::consts::PI);
    if x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    x
}

/// Iterative weighted least-squares single-point positioning.
///
/// Solves position plus one clock bias per constellation present from a
/// single epoch of pseudoranges, weighted by 1/σ². Starts from `initial`
/// or the Earth center.
pub fn spp_solve(
    observations: &[KeptObservation],
    initial: Option<EcefCoord>,
) -> Result<SppSolution, SolveError> {
    let mut constellations: Vec<Constellation> = observations
        .iter()
        .map(|o| o.observation.constellation)
        .collect();
    constellations.sort();
    constellations.dedup();

    let n_obs = observations.len();
    let n_unknowns = 3 + constellations.len();
    if n_obs < n_unknowns {
        return Err(SolveError::Underdetermined {
            rows: n_obs,
            cols: n_unknowns,
        });
    }

    let clock_col = |c: Constellation| 3 + constellations.iter().position(|&x| x == c).unwrap();

    let mut position = initial.map(|p| p.to_vector()).unwrap_or_else(Vector3::zeros);
    let mut biases = DVector::<f64>::zeros(constellations.len());

    let residuals_and_jacobian = |pos: &Vector3<f64>, clk: &DVector<f64>| {
        let mut r = DVector::zeros(n_obs);
        let mut j = DMatrix::zeros(n_obs, n_unknowns);
        let mut w = DVector::zeros(n_obs);
        for (i, kept) in observations.iter().enumerate() {
            let obs = &kept.observation;
            let rel = obs.pos_ecef.to_vector() - pos;
            let range = rel.norm();
            let kappa = rel / range;
            let col = clock_col(obs.constellation);
            r[i] = obs.pseudorange - (range + clk[col - 3]);
            j[(i, 0)] = kappa.x;
            j[(i, 1)] = kappa.y;
            j[(i, 2)] = kappa.z;
            j[(i, col)] = -1.0;
            w[i] = 1.0 / kept.pseudorange_variance;
        }
        (r, j, w)
    };

    let mut first_step = f64::INFINITY;
    let mut last_step = f64::INFINITY;
    let mut normal_at_solution = DMatrix::zeros(n_unknowns, n_unknowns);
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..25 {
        iterations = iter + 1;
        let (r, j, w) = residuals_and_jacobian(&position, &biases);
        let jtw = j.transpose() * DMatrix::from_diagonal(&w);
        let normal = &jtw * &j;
        let cond = condition_number(&normal);
        if !cond.is_finite() || cond > 1e12 {
            return Err(SolveError::SingularGeometry(cond));
        }
        normal_at_solution = normal.clone();
        let rhs = -(&jtw * &r);
        let delta = normal
            .lu()
            .solve(&rhs)
            .ok_or(SolveError::SingularGeometry(cond))?;
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(SolveError::Diverged);
        }

        let pos_step = Vector3::new(delta[0], delta[1], delta[2]);
        position += pos_step;
        for (k, b) in biases.iter_mut().enumerate() {
            *b += delta[3 + k];
        }

        let step_norm = pos_step.norm();
        if iter == 0 {
            first_step = step_norm;
        }
        last_step = step_norm;
        if step_norm < 1e-4 {
            converged = true;
            break;
        }
    }

    if !converged && (!last_step.is_finite() || last_step > first_step) {
        return Err(SolveError::Diverged);
    }

    let (r, _, _) = residuals_and_jacobian(&position, &biases);
    let post_fit_rms = (r.iter().map(|x| x * x).sum::<f64>() / n_obs as f64).sqrt();

    let cov_full = normal_at_solution
        .try_inverse()
        .ok_or(SolveError::SingularGeometry(f64::INFINITY))?;
    let covariance = Matrix3::from_fn(|i, j| cov_full[(i, j)]);

    let mut clock = ClockState::default();
    for (k, &c) in constellations.iter().enumerate() {
        clock.biases.insert(c, biases[k]);
    }

    Ok(SppSolution {
        position_ecef: EcefCoord::from_vector(position),
        clock,
        post_fit_rms,
        iterations,
        covariance,
    })
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    // The SVD iteration does not terminate on non-finite input.
    if m.iter().any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

// One Doppler measurement prepared for the yaw problem: residual
// r(ψ, δṫ) = base + κᵀ·R_n→e·Rot_up(ψ)·v_w − δṫ.
struct DopplerTerm {
    base: f64,
    kappa_enu_rows: Vector3<f64>,
    v_world: Vector3<f64>,
    weight: f64,
}

/// Calibrate the yaw offset ψ between world and ENU from Doppler
/// measurements, with the window-average clock drift eliminated linearly
/// at every step.
///
/// `vio_velocities` are the per-epoch body velocities in the world frame,
/// index-aligned with the batch.
pub fn yaw_calibrate(
    batch: &EpochBatch,
    vio_velocities: &[Vector3<f64>],
    anchor: &AnchorPoint,
) -> Result<YawCalibration, SolveError> {
    if vio_velocities.len() != batch.len() {
        return Err(SolveError::InvalidBatch(format!(
            "{} velocities for {} epochs",
            vio_velocities.len(),
            batch.len()
        )));
    }
    const MIN_SPEED: f64 = 0.1;
    if vio_velocities.iter().all(|v| v.norm() <= MIN_SPEED) {
        return Err(SolveError::Unobservable(MIN_SPEED));
    }

    let r_n_to_e = anchor.r_n_to_e();
    let mut terms = Vec::new();
    for (epoch, v_world) in batch.epochs.iter().zip(vio_velocities) {
        for obs in &epoch.observations {
            let rel = obs.pos_ecef.to_vector() - anchor.ecef.to_vector();
            let kappa = rel / rel.norm();
            let elevation = crate::nlos::satellite_azel(anchor, obs).elevation;
            if elevation <= 0.0 {
                continue;
            }
            let sin_el = elevation.sin();
            let weight = sin_el * sin_el / (obs.n_si * obs.n_d);
            terms.push(DopplerTerm {
                base: obs.doppler_range_rate - kappa.dot(&obs.vel_ecef),
                // κᵀ·R_n→e folded into one row vector; stored transposed.
                kappa_enu_rows: r_n_to_e.transpose() * kappa,
                v_world: *v_world,
                weight,
            });
        }
    }
    if terms.is_empty() {
        return Err(SolveError::InvalidBatch(
            "no usable Doppler measurements above the horizon".into(),
        ));
    }

    let weight_sum: f64 = terms.iter().map(|t| t.weight).sum();

    // Residuals with δṫ eliminated: δṫ*(ψ) = Σw(base + g)/Σw.
    let eval = |psi: f64| -> (Vec<f64>, f64) {
        let rot = rot_up(psi);
        let raw: Vec<f64> = terms
            .iter()
            .map(|t| t.base + t.kappa_enu_rows.dot(&(rot * t.v_world)))
            .collect();
        let drift = terms
            .iter()
            .zip(&raw)
            .map(|(t, &x)| t.weight * x)
            .sum::<f64>()
            / weight_sum;
        (raw.iter().map(|x| x - drift).collect(), drift)
    };
    let cost = |psi: f64| -> f64 {
        let (res, _) = eval(psi);
        terms
            .iter()
            .zip(&res)
            .map(|(t, &r)| t.weight * r * r)
            .sum()
    };

    // Coarse global scan keeps Gauss-Newton in the right basin; the cost
    // in ψ is periodic with potentially several local minima.
    let mut psi = 0.0;
    let mut best_cost = f64::INFINITY;
    for i in 0..120 {
        let candidate = -std::f64::consts::PI + i as f64 * (2.0 * std::f64::consts::PI / 120.0);
        let c = cost(candidate);
        if c < best_cost {
            best_cost = c;
            psi = candidate;
        }
    }

    let drot = |psi: f64| -> Matrix3<f64> {
        let (s, c) = psi.sin_cos();
        Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
    };

    let mut lambda = DAMPING_INIT;
    let mut current_cost = best_cost;
    let mut converged = false;
    for _ in 0..60 {
        let (res, _) = eval(psi);
        let rot_d = drot(psi);
        let g: Vec<f64> = terms
            .iter()
            .map(|t| t.kappa_enu_rows.dot(&(rot_d * t.v_world)))
            .collect();
        let g_mean = terms
            .iter()
            .zip(&g)
            .map(|(t, &gi)| t.weight * gi)
            .sum::<f64>()
            / weight_sum;
        let mut jt_w_r = 0.0;
        let mut jt_w_j = 0.0;
        for ((t, &r), &gi) in terms.iter().zip(&res).zip(&g) {
            let j = gi - g_mean;
            jt_w_r += t.weight * j * r;
            jt_w_j += t.weight * j * j;
        }
        if jt_w_j + lambda <= 0.0 {
            return Err(SolveError::Diverged);
        }
        let step = -jt_w_r / (jt_w_j + lambda);
        let trial = psi + step;
        let trial_cost = cost(trial);
        if trial_cost <= current_cost {
            psi = trial;
            current_cost = trial_cost;
            lambda = (lambda / 10.0).max(1e-15);
            if step.abs() < 1e-12 {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > DAMPING_MAX {
                break;
            }
        }
    }
    if !converged && !current_cost.is_finite() {
        return Err(SolveError::Diverged);
    }

    let (res, drift) = eval(psi);
    let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
    Ok(YawCalibration {
        psi: normalize_angle(psi),
        drift_rate: drift,
        residual_rms: rms,
    })
}

// Column layout for the refinement problem: anchor xyz first, then one
// clock bias per (epoch, constellation) pair in window order.
struct RefineLayout {
    clock_cols: Vec<BTreeMap<Constellation, usize>>,
    n_cols: usize,
}

fn refine_layout(batch: &EpochBatch) -> RefineLayout {
    let mut clock_cols = Vec::with_capacity(batch.len());
    let mut next = 3;
    for epoch in &batch.epochs {
        let mut cols = BTreeMap::new();
        let mut consts: Vec<Constellation> =
            epoch.observations.iter().map(|o| o.constellation).collect();
        consts.sort();
        consts.dedup();
        for c in consts {
            cols.insert(c, next);
            next += 1;
        }
        clock_cols.push(cols);
    }
    RefineLayout {
        clock_cols,
        n_cols: next,
    }
}

// Clock-chain links: (epoch k, constellation, Δt) for constellations
// present in both epoch k−1 and k.
fn clock_links(batch: &EpochBatch, layout: &RefineLayout) -> Vec<(usize, Constellation, f64)> {
    let mut links = Vec::new();
    for k in 1..batch.len() {
        let dt = batch.epochs[k].time - batch.epochs[k - 1].time;
        for (&c, _) in &layout.clock_cols[k] {
            if layout.clock_cols[k - 1].contains_key(&c) {
                links.push((k, c, dt));
            }
        }
    }
    links
}

/// Evaluate the anchor-refinement cost (weighted pseudorange residuals
/// plus weighted clock-chain residuals) at a given state. Exposed so the
/// cost decrease of [`refine_anchor`] can be verified externally.
pub fn refinement_cost(
    batch: &EpochBatch,
    world_positions: &[Vector3<f64>],
    psi: f64,
    config: &RefineConfig,
    anchor_ecef: EcefCoord,
    biases: &[BTreeMap<Constellation, f64>],
    pr_weights: &dyn Fn(&SatelliteObservation) -> f64,
) -> f64 {
    let layout = refine_layout(batch);
    let rot_w_n = rot_up(psi);
    let anchor_geo = geodesy::ecef_to_geodetic(anchor_ecef).expect("anchor off Earth center");
    let r_n_e = geodesy::rotation_ecef_to_enu(anchor_geo).transpose();
    let mut cost = 0.0;
    for (k, epoch) in batch.epochs.iter().enumerate() {
        let receiver = anchor_ecef.to_vector() + r_n_e * (rot_w_n * world_positions[k]);
        for obs in &epoch.observations {
            let range = (obs.pos_ecef.to_vector() - receiver).norm();
            let bias = biases[k].get(&obs.constellation).copied().unwrap_or(0.0);
            let r = obs.pseudorange - (range + bias);
            cost += pr_weights(obs) * r * r;
        }
    }
    let sigma2 = config.clock_process_sigma * config.clock_process_sigma;
    for (k, c, dt) in clock_links(batch, &layout) {
        let b_k = biases[k].get(&c).copied().unwrap_or(0.0);
        let b_p = biases[k - 1].get(&c).copied().unwrap_or(0.0);
        let r = (b_k - b_p) - config.drift_rate * dt;
        cost += r * r / (sigma2 * dt);
    }
    cost
}

/// Refine the anchor position from windowed pseudoranges, solving the
/// anchor ECEF coordinate jointly with per-epoch, per-constellation clock
/// biases chained by drift-compensated clock factors.
///
/// `world_positions` are the per-epoch body positions in the world frame.
/// Elevation-dependent pseudorange weights are fixed at the coarse anchor.
pub fn refine_anchor(
    batch: &EpochBatch,
    coarse: &AnchorPoint,
    world_positions: &[Vector3<f64>],
    psi: f64,
    config: &RefineConfig,
) -> Result<RefinedAnchor, SolveError> {
    if world_positions.len() != batch.len() {
        return Err(SolveError::InvalidBatch(format!(
            "{} world positions for {} epochs",
            world_positions.len(),
            batch.len()
        )));
    }

    let layout = refine_layout(batch);
    let links = clock_links(batch, &layout);
    let n_rows: usize = batch
        .epochs
        .iter()
        .map(|e| e.observations.len())
        .sum::<usize>()
        + links.len();
    if n_rows < layout.n_cols {
        return Err(SolveError::Underdetermined {
            rows: n_rows,
            cols: layout.n_cols,
        });
    }

    // Elevation weights frozen at the coarse anchor.
    let weight_of = |obs: &SatelliteObservation| -> f64 {
        let el = crate::nlos::satellite_azel(coarse, obs).elevation;
        let s = el.sin().max(1e-3);
        s * s / (obs.n_si * obs.n_p)
    };
    let sigma2 = config.clock_process_sigma * config.clock_process_sigma;
    let rot_w_n = rot_up(psi);

    // State vector: anchor xyz then clock columns.
    let mut state = DVector::<f64>::zeros(layout.n_cols);
    state[0] = coarse.ecef.x;
    state[1] = coarse.ecef.y;
    state[2] = coarse.ecef.z;
    // Clock start values: per-epoch weighted mean prediction error.
    {
        let r_n_e = coarse.r_n_to_e();
        for (k, epoch) in batch.epochs.iter().enumerate() {
            let receiver = coarse.ecef.to_vector() + r_n_e * (rot_w_n * world_positions[k]);
            let mut sums: BTreeMap<Constellation, (f64, f64)> = BTreeMap::new();
            for obs in &epoch.observations {
                let range = (obs.pos_ecef.to_vector() - receiver).norm();
                let w = weight_of(obs);
                let entry = sums.entry(obs.constellation).or_insert((0.0, 0.0));
                entry.0 += w * (obs.pseudorange - range);
                entry.1 += w;
            }
            for (c, (num, den)) in sums {
                state[layout.clock_cols[k][&c]] = num / den;
            }
        }
    }

    let assemble = |state: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), SolveError> {
        let anchor_vec = Vector3::new(state[0], state[1], state[2]);
        let anchor_geo = geodesy::ecef_to_geodetic(EcefCoord::from_vector(anchor_vec))
            .map_err(|_| SolveError::Diverged)?;
        let r_n_e = geodesy::rotation_ecef_to_enu(anchor_geo).transpose();

        let mut r = DVector::zeros(n_rows);
        let mut j = DMatrix::zeros(n_rows, layout.n_cols);
        let mut w = DVector::zeros(n_rows);
        let mut row = 0;
        for (k, epoch) in batch.epochs.iter().enumerate() {
            let receiver = anchor_vec + r_n_e * (rot_w_n * world_positions[k]);
            for obs in &epoch.observations {
                let rel = obs.pos_ecef.to_vector() - receiver;
                let range = rel.norm();
                let kappa = rel / range;
                let col = layout.clock_cols[k][&obs.constellation];
                r[row] = obs.pseudorange - (range + state[col]);
                j[(row, 0)] = kappa.x;
                j[(row, 1)] = kappa.y;
                j[(row, 2)] = kappa.z;
                j[(row, col)] = -1.0;
                w[row] = weight_of(obs);
                row += 1;
            }
        }
        for &(k, c, dt) in &links {
            let col_k = layout.clock_cols[k][&c];
            let col_p = layout.clock_cols[k - 1][&c];
            r[row] = (state[col_k] - state[col_p]) - config.drift_rate * dt;
            j[(row, col_k)] = 1.0;
            j[(row, col_p)] = -1.0;
            w[row] = 1.0 / (sigma2 * dt);
            row += 1;
        }
        Ok((r, j, w))
    };
    let cost_of = |r: &DVector<f64>, w: &DVector<f64>| -> f64 {
        r.iter().zip(w.iter()).map(|(ri, wi)| wi * ri * ri).sum()
    };

    let mut lambda = DAMPING_INIT;
    let (r0, _, w0) = assemble(&state)?;
    let mut current_cost = cost_of(&r0, &w0);
    let mut converged = false;

    for _ in 0..50 {
        let (r, j, w) = assemble(&state)?;
        let jtw = j.transpose() * DMatrix::from_diagonal(&w);
        let mut normal = &jtw * &j;
        for d in 0..layout.n_cols {
            normal[(d, d)] += lambda;
        }
        let rhs = -(&jtw * &r);
        let Some(delta) = normal.lu().solve(&rhs) else {
            lambda *= 10.0;
            if lambda > DAMPING_MAX {
                return Err(SolveError::Diverged);
            }
            continue;
        };

        let trial = &state + &delta;
        let (rt, _, wt) = assemble(&trial)?;
        let trial_cost = cost_of(&rt, &wt);
        if trial_cost <= current_cost {
            state = trial;
            current_cost = trial_cost;
            lambda = (lambda / 10.0).max(1e-15);
            let pos_step = Vector3::new(delta[0], delta[1], delta[2]).norm();
            if pos_step < 1e-4 {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > DAMPING_MAX {
                break;
            }
        }
    }
    if !converged && !current_cost.is_finite() {
        return Err(SolveError::Diverged);
    }

    let (r, _, _) = assemble(&state)?;
    let n_pr: usize = batch.epochs.iter().map(|e| e.observations.len()).sum();
    let residual_rms =
        (r.iter().take(n_pr).map(|x| x * x).sum::<f64>() / n_pr as f64).sqrt();

    let mut per_epoch_biases = Vec::with_capacity(batch.len());
    for cols in &layout.clock_cols {
        let mut cs = ClockState {
            drift_rate: config.drift_rate,
            ..Default::default()
        };
        for (&c, &col) in cols {
            cs.biases.insert(c, state[col]);
        }
        per_epoch_biases.push(cs);
    }

    Ok(RefinedAnchor {
        anchor_ecef: EcefCoord::new(state[0], state[1], state[2]),
        per_epoch_biases,
        residual_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{EnuCoord, GeodeticCoord};
    use crate::nlos::satellite_azel;
    use approx::assert_abs_diff_eq;

    fn anchor() -> AnchorPoint {
        AnchorPoint::from_geodetic(GeodeticCoord::from_degrees(31.03, 121.44, 12.0))
    }

    fn sat_obs(
        anchor: &AnchorPoint,
        az_deg: f64,
        el_deg: f64,
        range: f64,
        id: &str,
        time: f64,
    ) -> SatelliteObservation {
        let dir = crate::frames::AzEl::from_degrees(az_deg, el_deg).to_enu_direction();
        let pos = geodesy::enu_to_ecef_point(anchor, EnuCoord::from_vector(dir * range));
        SatelliteObservation {
            epoch_time: time,
            sat_id: id.into(),
            constellation: Constellation::from_letter(id.chars().next().unwrap()).unwrap(),
            pos_ecef: pos,
            vel_ecef: Vector3::zeros(),
            pseudorange: 0.0,
            doppler_range_rate: 0.0,
            n_si: 1.0,
            n_p: 1.0,
            n_d: 1.0,
        }
    }

    fn eight_sat_geometry(anchor: &AnchorPoint, time: f64) -> Vec<SatelliteObservation> {
        let specs = [
            (0.0, 80.0),
            (45.0, 45.0),
            (90.0, 30.0),
            (150.0, 55.0),
            (200.0, 35.0),
            (250.0, 60.0),
            (300.0, 25.0),
            (330.0, 70.0),
        ];
        specs
            .iter()
            .enumerate()
            .map(|(i, &(az, el))| {
                sat_obs(anchor, az, el, 2.2e7 + 1e5 * i as f64, &format!("G{:02}", i + 1), time)
            })
            .collect()
    }

    fn with_true_ranges(
        mut obs: Vec<SatelliteObservation>,
        receiver: Vector3<f64>,
        bias: f64,
    ) -> Vec<KeptObservation> {
        for o in &mut obs {
            o.pseudorange = (o.pos_ecef.to_vector() - receiver).norm() + bias;
        }
        obs.into_iter()
            .map(|observation| {
                let el = satellite_azel(&anchor(), &observation).elevation;
                let s = el.sin();
                KeptObservation {
                    pseudorange_variance: observation.n_si * observation.n_p / (s * s),
                    doppler_variance: observation.n_si * observation.n_d / (s * s),
                    observation,
                }
            })
            .collect()
    }

    #[test]
    fn noiseless_epoch_recovers_truth() {
        let anchor = anchor();
        let truth = anchor.ecef.to_vector() + Vector3::new(3.0, -8.0, 1.2);
        let kept = with_true_ranges(eight_sat_geometry(&anchor, 0.0), truth, 0.0);
        let sol = spp_solve(&kept, None).unwrap();
        assert!((sol.position_ecef.to_vector() - truth).norm() < 1e-4);
        assert!(sol.post_fit_rms < 1e-6);
        assert!(sol.clock.biases[&Constellation::G].abs() < 1e-4);
    }

    #[test]
    fn common_mode_shift_absorbs_into_clock() {
        let anchor = anchor();
        let truth = anchor.ecef.to_vector();
        let clean = with_true_ranges(eight_sat_geometry(&anchor, 0.0), truth, 0.0);
        let shifted = with_true_ranges(eight_sat_geometry(&anchor, 0.0), truth, 100.0);
        let a = spp_solve(&clean, None).unwrap();
        let b = spp_solve(&shifted, None).unwrap();
        assert!(
            (a.position_ecef.to_vector() - b.position_ecef.to_vector()).norm() < 1e-6,
            "position must not move"
        );
        assert_abs_diff_eq!(
            b.clock.biases[&Constellation::G] - a.clock.biases[&Constellation::G],
            100.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn three_satellites_single_constellation_is_underdetermined() {
        let anchor = anchor();
        let truth = anchor.ecef.to_vector();
        let kept = with_true_ranges(eight_sat_geometry(&anchor, 0.0)[..3].to_vec(), truth, 0.0);
        assert!(matches!(
            spp_solve(&kept, None),
            Err(SolveError::Underdetermined { .. })
        ));
    }

    #[test]
    fn collinear_satellites_are_singular() {
        let anchor = anchor();
        let truth = anchor.ecef.to_vector();
        // Five satellites stacked along one line of sight.
        let obs: Vec<_> = (0..5)
            .map(|i| {
                sat_obs(
                    &anchor,
                    40.0,
                    50.0,
                    2.0e7 + 1e6 * i as f64,
                    &format!("G{:02}", i + 1),
                    0.0,
                )
            })
            .collect();
        let kept = with_true_ranges(obs, truth, 0.0);
        assert!(matches!(
            spp_solve(&kept, None),
            Err(SolveError::SingularGeometry(_))
        ));
    }

    #[test]
    fn nan_input_diverges() {
        let anchor = anchor();
        let truth = anchor.ecef.to_vector();
        let mut kept = with_true_ranges(eight_sat_geometry(&anchor, 0.0), truth, 0.0);
        kept[0].observation.pseudorange = f64::NAN;
        assert!(matches!(
            spp_solve(&kept, None),
            Err(SolveError::Diverged) | Err(SolveError::SingularGeometry(_))
        ));
    }

    #[test]
    fn translation_equivariance() {
        let anchor = anchor();
        let truth = anchor.ecef.to_vector() + Vector3::new(1.0, 2.0, 3.0);
        let shift = Vector3::new(5000.0, -2000.0, 800.0);
        let base = with_true_ranges(eight_sat_geometry(&anchor, 0.0), truth, 7.5);
        let shifted: Vec<KeptObservation> = base
            .iter()
            .map(|k| {
                let mut o = k.observation.clone();
                o.pos_ecef = EcefCoord::from_vector(o.pos_ecef.to_vector() + shift);
                KeptObservation {
                    observation: o,
                    pseudorange_variance: k.pseudorange_variance,
                    doppler_variance: k.doppler_variance,
                }
            })
            .collect();
        // Shifting satellites and receiver together preserves all ranges,
        // so the shifted problem's truth is truth + shift.
        let a = spp_solve(&base, None).unwrap();
        let b = spp_solve(&shifted, None).unwrap();
        assert!(
            ((b.position_ecef.to_vector() - a.position_ecef.to_vector()) - shift).norm() < 1e-6
        );
    }

    fn doppler_window(
        anchor: &AnchorPoint,
        psi_true: f64,
        drift: f64,
        n_epochs: usize,
        speed: f64,
    ) -> (EpochBatch, Vec<Vector3<f64>>) {
        let r_n_e = anchor.r_n_to_e();
        let mut epochs = Vec::new();
        let mut vels = Vec::new();
        for k in 0..n_epochs {
            let time = k as f64;
            // Receiver wiggles heading over the window.
            let heading = 0.4 * k as f64;
            let v_world = Vector3::new(speed * heading.cos(), speed * heading.sin(), 0.0);
            let v_ecef = r_n_e * (rot_up(psi_true) * v_world);
            let mut observations = eight_sat_geometry(anchor, time);
            for (i, obs) in observations.iter_mut().enumerate() {
                obs.vel_ecef = Vector3::new(
                    800.0 * (i as f64 * 0.7).cos(),
                    800.0 * (i as f64 * 1.3).sin(),
                    300.0 * (i as f64 * 0.4).cos(),
                );
                let rel = obs.pos_ecef.to_vector() - anchor.ecef.to_vector();
                let kappa = rel / rel.norm();
                obs.doppler_range_rate = kappa.dot(&(obs.vel_ecef - v_ecef)) + drift;
            }
            epochs.push(Epoch { time, observations });
            vels.push(v_world);
        }
        (EpochBatch::new(epochs).unwrap(), vels)
    }

    #[test]
    fn yaw_recovered_from_noiseless_doppler() {
        let anchor = anchor();
        let psi_true = 30.0f64.to_radians();
        let (batch, vels) = doppler_window(&anchor, psi_true, 0.7, 10, 2.0);
        let cal = yaw_calibrate(&batch, &vels, &anchor).unwrap();
        assert!(
            (cal.psi - psi_true).abs() < 1e-3,
            "psi error {}",
            (cal.psi - psi_true).abs()
        );
        assert_abs_diff_eq!(cal.drift_rate, 0.7, epsilon = 1e-6);
        assert!(cal.residual_rms < 1e-9);
    }

    #[test]
    fn zero_velocity_window_is_unobservable() {
        let anchor = anchor();
        let (batch, _) = doppler_window(&anchor, 0.3, 0.0, 5, 2.0);
        let vels = vec![Vector3::zeros(); 5];
        assert!(matches!(
            yaw_calibrate(&batch, &vels, &anchor),
            Err(SolveError::Unobservable(_))
        ));
    }

    #[test]
    fn yaw_solution_beats_grid_scan() {
        let anchor = anchor();
        let psi_true = -2.1;
        let (batch, vels) = doppler_window(&anchor, psi_true, -0.2, 8, 1.5);
        let cal = yaw_calibrate(&batch, &vels, &anchor).unwrap();
        assert!((normalize_angle(cal.psi - psi_true)).abs() < 1e-3);
    }

    fn refine_window(
        anchor_true: &AnchorPoint,
        psi: f64,
        n_epochs: usize,
        bias0: f64,
        drift: f64,
    ) -> (EpochBatch, Vec<Vector3<f64>>) {
        let r_n_e = anchor_true.r_n_to_e();
        let mut epochs = Vec::new();
        let mut world_positions = Vec::new();
        for k in 0..n_epochs {
            let time = k as f64;
            let p_world = Vector3::new(1.5 * k as f64, 0.8 * k as f64, 0.1 * k as f64);
            let receiver = anchor_true.ecef.to_vector() + r_n_e * (rot_up(psi) * p_world);
            let mut observations = eight_sat_geometry(anchor_true, time);
            let bias = bias0 + drift * time;
            for obs in &mut observations {
                obs.pseudorange = (obs.pos_ecef.to_vector() - receiver).norm() + bias;
            }
            epochs.push(Epoch { time, observations });
            world_positions.push(p_world);
        }
        (EpochBatch::new(epochs).unwrap(), world_positions)
    }

    #[test]
    fn anchor_recovered_from_perturbed_start() {
        let truth = anchor();
        let psi = 0.6;
        let (batch, world_positions) = refine_window(&truth, psi, 10, 40.0, 0.25);
        let coarse = AnchorPoint::from_ecef(EcefCoord::from_vector(
            truth.ecef.to_vector() + Vector3::new(30.0, -25.0, 28.0),
        ))
        .unwrap();
        let config = RefineConfig {
            drift_rate: 0.25,
            ..Default::default()
        };
        let refined = refine_anchor(&batch, &coarse, &world_positions, psi, &config).unwrap();
        let err = (refined.anchor_ecef.to_vector() - truth.ecef.to_vector()).norm();
        assert!(err < 1e-3, "anchor error {err}");
        assert!(refined.residual_rms < 1e-6);
        for (k, cs) in refined.per_epoch_biases.iter().enumerate() {
            assert_abs_diff_eq!(
                cs.biases[&Constellation::G],
                40.0 + 0.25 * k as f64,
                epsilon = 1e-3
            );
        }
    }

    #[test]
    fn refinement_strictly_decreases_cost() {
        let truth = anchor();
        let psi = -0.3;
        let (batch, world_positions) = refine_window(&truth, psi, 6, 12.0, 0.0);
        let coarse = AnchorPoint::from_ecef(EcefCoord::from_vector(
            truth.ecef.to_vector() + Vector3::new(-20.0, 35.0, -15.0),
        ))
        .unwrap();
        let config = RefineConfig::default();
        let weights = |obs: &SatelliteObservation| {
            let el = satellite_azel(&coarse, obs).elevation;
            let s = el.sin().max(1e-3);
            s * s / (obs.n_si * obs.n_p)
        };
        let zero_biases = vec![BTreeMap::new(); batch.len()];
        let initial_cost = refinement_cost(
            &batch,
            &world_positions,
            psi,
            &config,
            coarse.ecef,
            &zero_biases,
            &weights,
        );
        let refined = refine_anchor(&batch, &coarse, &world_positions, psi, &config).unwrap();
        let final_biases: Vec<BTreeMap<Constellation, f64>> = refined
            .per_epoch_biases
            .iter()
            .map(|cs| cs.biases.clone())
            .collect();
        let final_cost = refinement_cost(
            &batch,
            &world_positions,
            psi,
            &config,
            refined.anchor_ecef,
            &final_biases,
            &weights,
        );
        assert!(
            final_cost < initial_cost,
            "cost must strictly decrease: {final_cost} !< {initial_cost}"
        );
    }

    #[test]
    fn single_epoch_dof_counting() {
        let truth = anchor();
        let receiver = truth.ecef.to_vector();
        let mut obs4 = eight_sat_geometry(&truth, 0.0)[..4].to_vec();
        for o in &mut obs4 {
            o.pseudorange = (o.pos_ecef.to_vector() - receiver).norm() + 5.0;
        }
        let batch = EpochBatch::new(vec![Epoch {
            time: 0.0,
            observations: obs4.clone(),
        }])
        .unwrap();
        let refined = refine_anchor(
            &batch,
            &truth,
            &[Vector3::zeros()],
            0.0,
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(
            (refined.anchor_ecef.to_vector() - receiver).norm() < 1e-2,
            "4 sats, 4 unknowns must solve"
        );

        let batch3 = EpochBatch::new(vec![Epoch {
            time: 0.0,
            observations: obs4[..3].to_vec(),
        }])
        .unwrap();
        assert!(matches!(
            refine_anchor(
                &batch3,
                &truth,
                &[Vector3::zeros()],
                0.0,
                &RefineConfig::default()
            ),
            Err(SolveError::Underdetermined { .. })
        ));
    }

    #[test]
    fn batch_validation() {
        let a = anchor();
        let obs = eight_sat_geometry(&a, 2.0);
        assert!(EpochBatch::new(vec![]).is_err());
        assert!(EpochBatch::new(vec![Epoch {
            time: 2.0,
            observations: vec![]
        }])
        .is_err());
        let e1 = Epoch {
            time: 2.0,
            observations: obs.clone(),
        };
        let e0 = Epoch {
            time: 1.0,
            observations: eight_sat_geometry(&a, 1.0),
        };
        assert!(EpochBatch::new(vec![e1.clone(), e0]).is_err());
        assert!(EpochBatch::new(vec![e1]).is_ok());
    }
}
