//! Coarse positioning: gross-error screening followed by equal-weight
//! iterated least squares on the corrected pseudoranges.
//!
//! State layout is `[x, y, z, c·dt, isb_BDS, isb_GAL, isb_GLO]` with every
//! clock term in meters. ISB columns of systems absent from an epoch are
//! dropped and their values held at the starting point.

use crate::frames::{self, EcefPos, GeodeticPos, LookAngles, FrameError, WGS84_A};
use crate::ingest::EpochRecord;
use crate::models::{self, CorrectionConfig, ModelError, SatObservation, System};
use log::debug;
use nalgebra::{DMatrix, DVector, SVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub type CoarseState = SVector<f64, 7>;

pub const ILS_MAX_ITER: usize = 10;
pub const ILS_TOL_M: f64 = 1e-4;
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Error)]
pub enum CoarseError {
    #[error("only {have} satellites left, need {need}")]
    TooFewSatellites { have: usize, need: usize },
    #[error("normal matrix condition number {0:.3e} exceeds limit")]
    RankDeficient(f64),
    #[error("least squares did not converge in {ILS_MAX_ITER} iterations")]
    NoConvergence { solution: Box<CoarseSolution> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] FrameError),
}

/// A satellite ready for positioning: position and corrected pseudorange.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub system: System,
    pub sat_id: u16,
    pub sat_pos: EcefPos,
    /// Corrected pseudorange (m).
    pub range: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseSolution {
    pub rx_pos: EcefPos,
    /// c·dt_r (m).
    pub clock_bias: f64,
    /// BDS, GAL, GLO relative to GPS (m).
    pub isb: [f64; 3],
    /// Which ISB entries were estimated (system present).
    pub isb_active: [bool; 3],
    /// Post-fit residuals `z - f(x)` (m), one per measurement.
    pub residuals: Vec<f64>,
    /// Receiver-to-satellite unit vectors in ENU at `rx_pos`.
    pub los_unit: Vec<Vector3<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl CoarseSolution {
    pub fn state(&self) -> CoarseState {
        CoarseState::from_column_slice(&[
            self.rx_pos.x,
            self.rx_pos.y,
            self.rx_pos.z,
            self.clock_bias,
            self.isb[0],
            self.isb[1],
            self.isb[2],
        ])
    }

    /// Elevation and azimuth per measurement, derived from `los_unit`.
    pub fn look_angles(&self) -> Vec<(f64, f64)> {
        self.los_unit
            .iter()
            .map(|u| {
                let el = u.z.clamp(-1.0, 1.0).asin();
                let az = if u.x.hypot(u.y) < 1e-12 { 0.0 } else { u.x.atan2(u.y) };
                (el, az)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcConfig {
    /// Radians.
    pub elevation_mask: f64,
    /// dB-Hz.
    pub snr_min: f64,
    pub residual_reject_factor: f64,
    /// Non-GPS systems with fewer satellites are dropped.
    pub min_sats_per_system: usize,
    /// Lower bound (m) on the robust residual scale.
    pub residual_floor: f64,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            elevation_mask: 10f64.to_radians(),
            snr_min: 25.0,
            residual_reject_factor: 4.0,
            min_sats_per_system: 1,
            residual_floor: 0.5,
        }
    }
}

impl QcConfig {
    /// Accepts everything except residual outliers.
    pub fn permissive() -> Self {
        Self {
            elevation_mask: 0.0,
            snr_min: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=30f64.to_radians() + 1e-12).contains(&self.elevation_mask) {
            return Err("elevation mask must lie in [0, 30] degrees".into());
        }
        if !(self.residual_reject_factor >= 2.0) {
            return Err("residual_reject_factor must be at least 2".into());
        }
        if !(self.residual_floor > 0.0) || !self.snr_min.is_finite() {
            return Err("residual_floor must be positive and snr_min finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Snr,
    Elevation,
    Residual,
    SystemCount,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Snr => "snr",
            RejectReason::Elevation => "elevation",
            RejectReason::Residual => "residual",
            RejectReason::SystemCount => "system_count",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub system: System,
    pub sat_id: u16,
    pub reason: RejectReason,
}

/// Output of [`quality_control`] and [`solve_epoch`].
#[derive(Debug, Clone)]
pub struct CoarseFix {
    /// The epoch restricted to the accepted satellites.
    pub epoch: EpochRecord,
    pub rejections: Vec<Rejection>,
    /// Corrected measurements aligned with `epoch.observations`.
    pub measurements: Vec<Measurement>,
    pub solution: CoarseSolution,
}

/// Number of satellites needed to estimate position, clock and the ISBs of
/// the non-GPS systems present.
pub fn required_satellites<'a>(systems: impl Iterator<Item = &'a System>) -> usize {
    let mut present = [false; 3];
    for s in systems {
        if let Some(i) = s.isb_index() {
            present[i] = true;
        }
    }
    4 + present.iter().filter(|p| **p).count()
}

/// Row `[-(sat - rx)/D, 1, alpha_C, alpha_E, alpha_R]` per measurement.
pub fn geometry_matrix(rx: &EcefPos, meas: &[Measurement]) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(meas.len(), 7);
    for (i, m) in meas.iter().enumerate() {
        let d = m.sat_pos.vec() - rx.vec();
        let u = d / d.norm();
        h[(i, 0)] = -u.x;
        h[(i, 1)] = -u.y;
        h[(i, 2)] = -u.z;
        h[(i, 3)] = 1.0;
        for (k, a) in m.system.indicators().iter().enumerate() {
            h[(i, 4 + k)] = *a;
        }
    }
    h
}

/// Modeled pseudorange `D + c·dt + ISB_sys` for the 7-state.
pub fn predicted_range(x: &CoarseState, m: &Measurement) -> f64 {
    let rx = Vector3::new(x[0], x[1], x[2]);
    let isb = m.system.isb_index().map_or(0.0, |i| x[4 + i]);
    (m.sat_pos.vec() - rx).norm() + x[3] + isb
}

/// Condition number of a symmetric positive semidefinite matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Gauss-Newton with W = I: `dx = (HᵀH)⁻¹ Hᵀ (z − f(x))` until the position
/// step falls below 1e-4 m or ten iterations pass.
pub fn ils_solve(meas: &[Measurement], x0: &CoarseState) -> Result<CoarseSolution, CoarseError> {
    ils_solve_traced(meas, x0).map(|(s, _)| s)
}

/// [`ils_solve`] that also returns the state after every iteration.
pub fn ils_solve_traced(
    meas: &[Measurement],
    x0: &CoarseState,
) -> Result<(CoarseSolution, Vec<CoarseState>), CoarseError> {
    let mut active = [true, true, true, true, false, false, false];
    for m in meas {
        if let Some(i) = m.system.isb_index() {
            active[4 + i] = true;
        }
    }
    let cols: Vec<usize> = (0..7).filter(|&c| active[c]).collect();
    if meas.len() < cols.len() {
        return Err(CoarseError::TooFewSatellites {
            have: meas.len(),
            need: cols.len(),
        });
    }

    let mut x = *x0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < ILS_MAX_ITER {
        iterations += 1;
        let rx = EcefPos::new(x[0], x[1], x[2]);
        let h_full = geometry_matrix(&rx, meas);
        let h = h_full.select_columns(&cols);
        let l = DVector::from_iterator(meas.len(), meas.iter().map(|m| m.range - predicted_range(&x, m)));
        let n = h.transpose() * &h;
        let cond = condition_number(&n);
        if !(cond <= MAX_CONDITION) {
            return Err(CoarseError::RankDeficient(cond));
        }
        let rhs = h.transpose() * l;
        let dx = n
            .cholesky()
            .ok_or(CoarseError::RankDeficient(f64::INFINITY))?
            .solve(&rhs);
        for (k, &c) in cols.iter().enumerate() {
            x[c] += dx[k];
        }
        trace.push(x);
        if Vector3::new(dx[0], dx[1], dx[2]).norm() < ILS_TOL_M {
            converged = true;
            break;
        }
    }

    let rx = EcefPos::new(x[0], x[1], x[2]);
    let geo = frames::ecef_to_geodetic_lossy(&rx)?;
    let rot = frames::enu_rotation(&geo);
    let residuals = meas.iter().map(|m| m.range - predicted_range(&x, m)).collect();
    let los_unit = meas
        .iter()
        .map(|m| {
            let d = m.sat_pos.vec() - rx.vec();
            rot * (d / d.norm())
        })
        .collect();
    let solution = CoarseSolution {
        rx_pos: rx,
        clock_bias: x[3],
        isb: [x[4], x[5], x[6]],
        isb_active: [active[4], active[5], active[6]],
        residuals,
        los_unit,
        iterations,
        converged,
    };
    if !converged {
        return Err(CoarseError::NoConvergence {
            solution: Box::new(solution),
        });
    }
    Ok((solution, trace))
}

/// Starting state when nothing better is known: on the equator at the prime meridian.
pub fn default_start() -> CoarseState {
    CoarseState::from_column_slice(&[WGS84_A, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
}

fn time_of_day(t: f64) -> f64 {
    t.rem_euclid(86_400.0)
}

/// Corrected measurements for `obs` with atmospheric models evaluated at
/// `rx` (or omitted entirely when `rx` is `None`).
pub fn correct_observations(
    obs: &[SatObservation],
    rx: Option<&EcefPos>,
    t: f64,
    corr: &CorrectionConfig,
) -> Result<Vec<Measurement>, CoarseError> {
    let geo = match rx {
        Some(p) => Some((*p, frames::ecef_to_geodetic_lossy(p)?)),
        None => None,
    };
    obs.iter()
        .map(|o| {
            let range = match &geo {
                Some((p, g)) => {
                    let look = frames::look_angles_lossy(p, g, &o.sat_pos)?;
                    models::corrected_pseudorange_with(o, g, &look, time_of_day(t), corr)?
                }
                None => {
                    let blank = LookAngles::default();
                    let zero_atmo = SatObservation {
                        iono_delay: Some(o.iono_delay.unwrap_or(0.0)),
                        tropo_delay: Some(o.tropo_delay.unwrap_or(0.0)),
                        ..o.clone()
                    };
                    let g = GeodeticPos::default();
                    models::corrected_pseudorange_with(&zero_atmo, &g, &blank, 0.0, corr)?
                }
            };
            Ok(Measurement {
                system: o.system,
                sat_id: o.sat_id,
                sat_pos: o.sat_pos,
                range,
                snr: o.snr,
            })
        })
        .collect()
}

fn solve_observations(
    obs: &[SatObservation],
    prior: Option<&EcefPos>,
    x0: &CoarseState,
    t: f64,
    corr: &CorrectionConfig,
) -> Result<(Vec<Measurement>, CoarseSolution), CoarseError> {
    // Without a usable prior the atmosphere cannot be evaluated; solve on
    // geometry first and then re-solve with corrections at that fix.
    let (start, anchor) = match prior {
        Some(p) => (*x0, *p),
        None => {
            let meas = correct_observations(obs, None, t, corr)?;
            let s = ils_solve(&meas, x0)?;
            (s.state(), s.rx_pos)
        }
    };
    let meas = correct_observations(obs, Some(&anchor), t, corr)?;
    let sol = ils_solve(&meas, &start)?;
    if sol.rx_pos.distance(&anchor) > 100.0 {
        // Atmosphere was evaluated too far from the fix; refresh once.
        let meas = correct_observations(obs, Some(&sol.rx_pos), t, corr)?;
        let sol = ils_solve(&meas, &sol.state())?;
        return Ok((meas, sol));
    }
    Ok((meas, sol))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Robust residual scale `1.4826 · MAD`.
pub fn robust_scale(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let mut r = residuals.to_vec();
    let med = median(&mut r);
    let mut dev: Vec<f64> = residuals.iter().map(|x| (x - med).abs()).collect();
    1.4826 * median(&mut dev)
}

/// Residuals scaled by `1/sqrt(1 - h_ii)`, so that each has the variance of
/// the measurement noise under equal weighting.
pub fn normalized_residuals(sol: &CoarseSolution, meas: &[Measurement]) -> Result<Vec<f64>, CoarseError> {
    let mut cols = vec![0, 1, 2, 3];
    cols.extend((0..3).filter(|&k| sol.isb_active[k]).map(|k| 4 + k));
    let h = geometry_matrix(&sol.rx_pos, meas).select_columns(&cols);
    let n_inv = (h.transpose() * &h)
        .cholesky()
        .ok_or(CoarseError::RankDeficient(f64::INFINITY))?
        .inverse();
    Ok(sol
        .residuals
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let row = h.row(i);
            let lev = (row * &n_inv * row.transpose())[(0, 0)];
            r / (1.0 - lev).max(1e-6).sqrt()
        })
        .collect())
}

/// Screen an epoch and solve it. See [`quality_control`] for the rules.
pub fn solve_epoch(
    epoch: &EpochRecord,
    prior: Option<&EcefPos>,
    x0: &CoarseState,
    qc: &QcConfig,
    corr: &CorrectionConfig,
) -> Result<CoarseFix, CoarseError> {
    let mut kept: Vec<SatObservation> = Vec::with_capacity(epoch.observations.len());
    let mut rejections = Vec::new();
    let prior_geo = match prior {
        Some(p) => Some(frames::ecef_to_geodetic_lossy(p)?),
        None => None,
    };
    for o in &epoch.observations {
        let reason = if o.snr < qc.snr_min {
            Some(RejectReason::Snr)
        } else if let (Some(p), Some(g)) = (prior, prior_geo.as_ref()) {
            let look = frames::look_angles_lossy(p, g, &o.sat_pos)?;
            (look.elevation < qc.elevation_mask).then_some(RejectReason::Elevation)
        } else {
            None
        };
        match reason {
            Some(reason) => rejections.push(Rejection {
                system: o.system,
                sat_id: o.sat_id,
                reason,
            }),
            None => kept.push(o.clone()),
        }
    }
    drop_sparse_systems(&mut kept, &mut rejections, qc.min_sats_per_system);
    check_count(&kept)?;

    let (mut meas, mut sol) = solve_observations(&kept, prior, x0, epoch.t, corr)?;
    loop {
        let need = required_satellites(kept.iter().map(|o| &o.system));
        if kept.len() <= need {
            break;
        }
        let w = normalized_residuals(&sol, &meas)?;
        let (worst, worst_abs) = w
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.abs()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut trial = kept.clone();
        let o = trial.remove(worst);
        let mut trial_log = vec![Rejection {
            system: o.system,
            sat_id: o.sat_id,
            reason: RejectReason::Residual,
        }];
        drop_sparse_systems(&mut trial, &mut trial_log, qc.min_sats_per_system);
        if check_count(&trial).is_err() {
            break;
        }
        let (t_meas, t_sol) = match solve_observations(&trial, Some(&sol.rx_pos), &sol.state(), epoch.t, corr) {
            Ok(v) => v,
            Err(CoarseError::RankDeficient(_)) => break,
            Err(e) => return Err(e),
        };
        let scale = robust_scale(&normalized_residuals(&t_sol, &t_meas)?).max(qc.residual_floor);
        if worst_abs <= qc.residual_reject_factor * scale {
            break;
        }
        debug!("t={} rejecting {} {} normalized residual {:.2} m", epoch.t, o.system, o.sat_id, worst_abs);
        rejections.extend(trial_log);
        kept = trial;
        meas = t_meas;
        sol = t_sol;
    }

    Ok(CoarseFix {
        epoch: EpochRecord {
            observations: kept,
            ..epoch.clone()
        },
        rejections,
        measurements: meas,
        solution: sol,
    })
}

/// Removes low-SNR satellites, satellites below the elevation mask (only
/// when a prior position exists) and residual outliers. Outliers are taken
/// one at a time: the satellite with the largest normalized residual is
/// dropped while that residual exceeds `factor × max(1.4826·MAD, floor)`,
/// the MAD being taken over the normalized residuals of the fit without it.
pub fn quality_control(
    epoch: &EpochRecord,
    prior: Option<&EcefPos>,
    qc: &QcConfig,
    corr: &CorrectionConfig,
) -> Result<(EpochRecord, Vec<Rejection>), CoarseError> {
    let x0 = match prior {
        Some(p) => CoarseState::from_column_slice(&[p.x, p.y, p.z, 0.0, 0.0, 0.0, 0.0]),
        None => default_start(),
    };
    let fix = solve_epoch(epoch, prior, &x0, qc, corr)?;
    Ok((fix.epoch, fix.rejections))
}

fn drop_sparse_systems(kept: &mut Vec<SatObservation>, rejections: &mut Vec<Rejection>, min: usize) {
    for sys in [System::Bds, System::Gal, System::Glo] {
        let count = kept.iter().filter(|o| o.system == sys).count();
        if count > 0 && count < min {
            kept.retain(|o| {
                if o.system == sys {
                    rejections.push(Rejection {
                        system: o.system,
                        sat_id: o.sat_id,
                        reason: RejectReason::SystemCount,
                    });
                    false
                } else {
                    true
                }
            });
        }
    }
}

fn check_count(kept: &[SatObservation]) -> Result<(), CoarseError> {
    let need = required_satellites(kept.iter().map(|o| &o.system));
    if kept.len() < need {
        return Err(CoarseError::TooFewSatellites { have: kept.len(), need });
    }
    Ok(())
}
