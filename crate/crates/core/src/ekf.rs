//! 11-state extended Kalman filter:
//! `[p(3), v(3), c·dt, c·drift, isb_BDS, isb_GAL, isb_GLO]`.
//!
//! Constant-velocity dynamics, diagonal measurement noise supplied per
//! satellite, compensated innovation and Joseph-form covariance update.

use crate::coarse::{CoarseSolution, Measurement};
use crate::frames::EcefPos;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 11;
pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Gaps above this re-initialize the filter (s).
pub const MAX_GAP_S: f64 = 30.0;
pub const MAX_S_CONDITION: f64 = 1e14;

pub const IDX_POS: usize = 0;
pub const IDX_VEL: usize = 3;
pub const IDX_CLOCK: usize = 6;
pub const IDX_DRIFT: usize = 7;
pub const IDX_ISB: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error("time step {0} s exceeds the {MAX_GAP_S} s gap limit")]
    GapTooLarge(f64),
    #[error("time step {0} s is not positive")]
    NonPositiveStep(f64),
    #[error("innovation covariance condition {0:.3e} exceeds limit")]
    SingularS(f64),
    #[error("innovation covariance is not positive definite")]
    NotSpd,
    #[error("measurement update needs at least one satellite")]
    NoMeasurements,
    #[error("measurement noise must be positive and finite, got {0}")]
    BadNoise(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessNoiseConfig {
    /// Velocity random walk, m²/s³ per axis.
    pub velocity_psd: f64,
    /// Clock drift random walk, m²/s³.
    pub clock_drift_psd: f64,
    /// ISB random walk, m²/s.
    pub isb_psd: f64,
}

impl Default for ProcessNoiseConfig {
    fn default() -> Self {
        Self {
            velocity_psd: 1.0,
            clock_drift_psd: 0.1,
            isb_psd: 1e-4,
        }
    }
}

impl ProcessNoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        if [self.velocity_psd, self.clock_drift_psd, self.isb_psd]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            Ok(())
        } else {
            Err("process noise densities must be finite and non-negative".into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub sigma_p0: f64,
    pub sigma_v0: f64,
    pub sigma_cb0: f64,
    pub sigma_cd0: f64,
    pub sigma_isb0: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            sigma_p0: 10.0,
            sigma_v0: 1.0,
            sigma_cb0: 100.0,
            sigma_cd0: 10.0,
            sigma_isb0: 10.0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<(), String> {
        if [self.sigma_p0, self.sigma_v0, self.sigma_cb0, self.sigma_cd0, self.sigma_isb0]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err("initial standard deviations must be positive".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: StateVec,
    pub p: StateMat,
    pub t: f64,
}

impl FilterState {
    pub fn position(&self) -> EcefPos {
        EcefPos::new(self.x[0], self.x[1], self.x[2])
    }
}

pub fn init_filter(coarse: &CoarseSolution, cfg: &InitConfig, t: f64) -> FilterState {
    let mut x = StateVec::zeros();
    x[0] = coarse.rx_pos.x;
    x[1] = coarse.rx_pos.y;
    x[2] = coarse.rx_pos.z;
    x[IDX_CLOCK] = coarse.clock_bias;
    for k in 0..3 {
        x[IDX_ISB + k] = coarse.isb[k];
    }
    let mut d = StateVec::zeros();
    for k in 0..3 {
        d[IDX_POS + k] = cfg.sigma_p0.powi(2);
        d[IDX_VEL + k] = cfg.sigma_v0.powi(2);
        d[IDX_ISB + k] = cfg.sigma_isb0.powi(2);
    }
    d[IDX_CLOCK] = cfg.sigma_cb0.powi(2);
    d[IDX_DRIFT] = cfg.sigma_cd0.powi(2);
    FilterState {
        x,
        p: StateMat::from_diagonal(&d),
        t,
    }
}

pub fn transition(dt: f64) -> StateMat {
    let mut f = StateMat::identity();
    for k in 0..3 {
        f[(IDX_POS + k, IDX_VEL + k)] = dt;
    }
    f[(IDX_CLOCK, IDX_DRIFT)] = dt;
    f
}

/// Constant-velocity discretization for position/velocity and clock/drift;
/// ISB as a random walk.
pub fn process_noise(dt: f64, q: &ProcessNoiseConfig) -> StateMat {
    let mut m = StateMat::zeros();
    let (d1, d2, d3) = (dt, dt * dt / 2.0, dt * dt * dt / 3.0);
    let mut pair = |a: usize, b: usize, psd: f64| {
        m[(a, a)] = psd * d3;
        m[(a, b)] = psd * d2;
        m[(b, a)] = psd * d2;
        m[(b, b)] = psd * d1;
    };
    for k in 0..3 {
        pair(IDX_POS + k, IDX_VEL + k, q.velocity_psd);
    }
    pair(IDX_CLOCK, IDX_DRIFT, q.clock_drift_psd);
    for k in 0..3 {
        m[(IDX_ISB + k, IDX_ISB + k)] = q.isb_psd * dt;
    }
    m
}

pub fn time_update(s: &FilterState, dt: f64, q: &ProcessNoiseConfig) -> Result<FilterState, EkfError> {
    if !(dt > 0.0) {
        return Err(EkfError::NonPositiveStep(dt));
    }
    if dt > MAX_GAP_S {
        return Err(EkfError::GapTooLarge(dt));
    }
    let f = transition(dt);
    Ok(FilterState {
        x: f * s.x,
        p: f * s.p * f.transpose() + process_noise(dt, q),
        t: s.t + dt,
    })
}

/// Modeled pseudorange of the 11-state.
pub fn predicted_range(x: &StateVec, m: &Measurement) -> f64 {
    let d = m.sat_pos.vec() - x.fixed_rows::<3>(IDX_POS);
    let isb = m.system.isb_index().map_or(0.0, |i| x[IDX_ISB + i]);
    d.norm() + x[IDX_CLOCK] + isb
}

/// Jacobian `N × 11` and nonlinear innovation `z − f(x)`.
pub fn linearize(x: &StateVec, meas: &[Measurement]) -> (DMatrix<f64>, DVector<f64>) {
    let n = meas.len();
    let mut h = DMatrix::zeros(n, STATE_DIM);
    let mut v = DVector::zeros(n);
    for (i, m) in meas.iter().enumerate() {
        let d = m.sat_pos.vec() - x.fixed_rows::<3>(IDX_POS);
        let u = d / d.norm();
        for k in 0..3 {
            h[(i, IDX_POS + k)] = -u[k];
        }
        h[(i, IDX_CLOCK)] = 1.0;
        if let Some(k) = m.system.isb_index() {
            h[(i, IDX_ISB + k)] = 1.0;
        }
        v[i] = m.range - predicted_range(x, m);
    }
    (h, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostics {
    /// `z − f(x_pred)`.
    pub innovation: Vec<f64>,
    /// `v + v_c`.
    pub compensated: Vec<f64>,
    pub s_diag: Vec<f64>,
    /// Per-satellite `v_i² / S_ii`.
    pub nis: Vec<f64>,
    /// `vᵀ S⁻¹ v`.
    pub nis_total: f64,
}

/// Factors S and returns it with a condition estimate from the Cholesky
/// diagonal, `(max L_ii / min L_ii)²`.
pub fn factor_s(s: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, EkfError> {
    let chol = Cholesky::new(s).ok_or(EkfError::NotSpd)?;
    let l = chol.l_dirty();
    let diag = l.diagonal();
    let max = diag.max();
    let min = diag.min();
    let cond = if min > 0.0 { (max / min).powi(2) } else { f64::INFINITY };
    if !(cond <= MAX_S_CONDITION) {
        return Err(EkfError::SingularS(cond));
    }
    Ok(chol)
}

/// `(I − KH) P (I − KH)ᵀ + K R Kᵀ` for any gain `K`.
pub fn joseph_update(p: &StateMat, k: &DMatrix<f64>, h: &DMatrix<f64>, r_diag: &[f64]) -> StateMat {
    let kh = k * h;
    let a = StateMat::identity() - StateMat::from_iterator(kh.iter().copied());
    let mut krk = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for (j, r) in r_diag.iter().enumerate() {
        let col = k.column(j);
        krk += &col * col.transpose() * *r;
    }
    a * p * a.transpose() + StateMat::from_iterator(krk.iter().copied())
}

/// One compensated update: `x += K (v + v_c)` with `K = P Hᵀ S⁻¹`.
pub fn measurement_update(
    s: &FilterState,
    meas: &[Measurement],
    r_diag: &[f64],
    v_comp: &[f64],
) -> Result<(FilterState, UpdateDiagnostics), EkfError> {
    if meas.is_empty() {
        return Err(EkfError::NoMeasurements);
    }
    assert_eq!(meas.len(), r_diag.len());
    assert_eq!(meas.len(), v_comp.len());
    if let Some(bad) = r_diag.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(EkfError::BadNoise(*bad));
    }
    let (h, v) = linearize(&s.x, meas);
    let p = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, s.p.as_slice());
    let hp = &h * &p;
    let mut smat = &hp * h.transpose();
    for (i, r) in r_diag.iter().enumerate() {
        smat[(i, i)] += r;
    }
    let s_diag: Vec<f64> = smat.diagonal().iter().copied().collect();
    let chol = factor_s(smat)?;
    // K = P Hᵀ S⁻¹ = (S⁻¹ H P)ᵀ by symmetry of S and P
    let k = chol.solve(&hp).transpose();
    let comp = &v + DVector::from_column_slice(v_comp);
    let dx = &k * &comp;
    let nis_total = v.dot(&chol.solve(&v));
    let diag = UpdateDiagnostics {
        innovation: v.iter().copied().collect(),
        compensated: comp.iter().copied().collect(),
        nis: v.iter().zip(&s_diag).map(|(v, s)| v * v / s).collect(),
        s_diag,
        nis_total,
    };
    let mut x = s.x;
    for i in 0..STATE_DIM {
        x[i] += dx[i];
    }
    Ok((
        FilterState {
            x,
            p: joseph_update(&s.p, &k, &h, r_diag),
            t: s.t,
        },
        diag,
    ))
}
