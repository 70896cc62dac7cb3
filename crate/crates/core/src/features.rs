//! Per-satellite features and fixed-width packing.
//!
//! Slot layout of the 8-vector:
//! `[snr/60, ela/(π/2), sin aza, cos aza, psr', dpc', bds|gal, glo]`
//! where `psr' = clamp(psr/30, ±3)` and `dpc' = clamp(dpc, ±3)`.

use crate::coarse::{condition_number, CoarseFix, CoarseSolution, MAX_CONDITION};
use crate::models::System;
use crate::frames::dd::Dd;
use log::debug;
use nalgebra::{DMatrix, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

pub const FEATURE_DIM: usize = 8;
pub const DEFAULT_N_MAX: usize = 40;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DopError {
    #[error("at least 4 satellites are needed for DOP, got {0}")]
    TooFewSatellites(usize),
    #[error("DOP normal matrix condition number {0:.3e} exceeds limit")]
    SingularGeometry(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DopSet {
    pub hdop: f64,
    pub vdop: f64,
    pub pdop: f64,
    pub gdop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpcFlag {
    Ok,
    /// Only four satellites; DPC reported as 0.
    InsufficientRedundancy,
    /// Removing the satellite leaves a singular geometry; DPC reported as -gdop_full.
    SingularGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatFeatures {
    pub system: System,
    pub sat_id: u16,
    pub snr: f64,
    pub ela: f64,
    pub aza: f64,
    pub psr: f64,
    pub dpc: f64,
    pub dpc_flag: DpcFlag,
}

impl SatFeatures {
    /// BDS, GAL, GLO.
    pub fn one_hot(&self) -> [f64; 3] {
        self.system.indicators()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationSpec {
    pub snr_scale: f64,
    pub psr_scale: f64,
    pub dpc_scale: f64,
    pub clamp: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            snr_scale: 60.0,
            psr_scale: 30.0,
            dpc_scale: 1.0,
            clamp: 3.0,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<(), String> {
        if [self.snr_scale, self.psr_scale, self.dpc_scale, self.clamp]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err("normalization constants must be positive and finite".into())
        }
    }

    pub fn apply(&self, f: &SatFeatures) -> [f64; FEATURE_DIM] {
        let c = self.clamp;
        let oh = f.one_hot();
        [
            f.snr / self.snr_scale,
            f.ela / std::f64::consts::FRAC_PI_2,
            f.aza.sin(),
            f.aza.cos(),
            (f.psr / self.psr_scale).clamp(-c, c),
            (f.dpc / self.dpc_scale).clamp(-c, c),
            oh[0] + oh[1],
            oh[2],
        ]
    }
}

/// Features of one epoch, in the satellite order of the coarse fix after
/// any N_max truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochFeatures {
    pub sats: Vec<SatFeatures>,
    pub rows: Vec<[f64; FEATURE_DIM]>,
    /// Index of each kept satellite into the coarse fix measurements.
    pub source_index: Vec<usize>,
    pub dropped: Vec<(System, u16)>,
}

impl EpochFeatures {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `N × 8` matrix of the normalized rows.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), FEATURE_DIM, |i, j| self.rows[i][j])
    }
}

/// Padded `batch × N_max × 8` block with validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub batch: usize,
    pub n_max: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub sat_index_map: Vec<Option<(System, u16)>>,
}

impl FeatureTensor {
    pub fn zeros(batch: usize, n_max: usize) -> Self {
        Self {
            batch,
            n_max,
            values: vec![0.0; batch * n_max * FEATURE_DIM],
            mask: vec![false; batch * n_max],
            sat_index_map: vec![None; batch * n_max],
        }
    }

    pub fn from_epochs(epochs: &[EpochFeatures], n_max: usize) -> Self {
        let mut t = Self::zeros(epochs.len(), n_max);
        for (b, e) in epochs.iter().enumerate() {
            for (s, (row, f)) in e.rows.iter().zip(&e.sats).enumerate().take(n_max) {
                let slot = b * n_max + s;
                t.values[slot * FEATURE_DIM..(slot + 1) * FEATURE_DIM].copy_from_slice(row);
                t.mask[slot] = true;
                t.sat_index_map[slot] = Some((f.system, f.sat_id));
            }
        }
        t
    }

    pub fn slot(&self, b: usize, s: usize) -> &[f64] {
        let slot = b * self.n_max + s;
        &self.values[slot * FEATURE_DIM..(slot + 1) * FEATURE_DIM]
    }

    /// `N_max × 8` block of one batch entry, padding included.
    pub fn epoch_matrix(&self, b: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_max, FEATURE_DIM, |s, j| self.slot(b, s)[j])
    }

    pub fn epoch_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.n_max..(b + 1) * self.n_max]
    }
}

/// Post-fit residual with clock and ISB removed.
pub fn compute_psr(coarse: &CoarseSolution) -> Vec<f64> {
    coarse.residuals.clone()
}

/// Below this `1 - hᵀQh` the rank-one downdate amplifies rounding too much.
const DOWNDATE_MIN_DENOM: f64 = 1e-6;

fn dop_row(ela: f64, aza: f64) -> Vector4<f64> {
    Vector4::new(ela.cos() * aza.sin(), ela.cos() * aza.cos(), ela.sin(), 1.0)
}

fn normal_matrix(elas: &[f64], azas: &[f64], skip: Option<usize>) -> Matrix4<f64> {
    let mut n = Matrix4::zeros();
    for (i, (e, a)) in elas.iter().zip(azas).enumerate() {
        if Some(i) != skip {
            let h = dop_row(*e, *a);
            n += h * h.transpose();
        }
    }
    n
}

/// Cofactor matrix `(HᵀH)⁻¹` of the listed rows. Accumulation and
/// elimination run in double-double so that near-critical geometries still
/// come out accurate to f64 precision.
fn q_checked(elas: &[f64], azas: &[f64], skip: Option<usize>) -> Result<[[Dd; 4]; 4], DopError> {
    let n = normal_matrix(elas, azas, skip);
    let cond = condition_number(&DMatrix::from_column_slice(4, 4, n.as_slice()));
    if !(cond <= MAX_CONDITION) {
        return Err(DopError::SingularGeometry(cond));
    }
    let mut a = [[Dd::from(0.0); 8]; 4];
    for i in (0..elas.len()).filter(|i| Some(*i) != skip) {
        let h = dop_row(elas[i], azas[i]);
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] = a[r][c].add(Dd::from(h[r]).mul_f(h[c]));
            }
        }
    }
    for (r, row) in a.iter_mut().enumerate() {
        row[4 + r] = Dd::from(1.0);
    }
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&x, &y| a[x][col].0.abs().total_cmp(&a[y][col].0.abs()))
            .unwrap_or(col);
        if a[piv][col].0 == 0.0 {
            return Err(DopError::SingularGeometry(f64::INFINITY));
        }
        a.swap(col, piv);
        let p = a[col][col];
        for c in 0..8 {
            a[col][c] = a[col][c].div(p);
        }
        for r in (0..4).filter(|&r| r != col) {
            let f = a[r][col];
            for c in 0..8 {
                a[r][c] = a[r][c].sub(f.mul(a[col][c]));
            }
        }
    }
    Ok(std::array::from_fn(|r| std::array::from_fn(|c| a[r][4 + c])))
}

fn to_f64(q: &[[Dd; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| q[r][c].0)
}

fn dop_from_q(q: &Matrix4<f64>) -> DopSet {
    let h2 = q[(0, 0)] + q[(1, 1)];
    let v2 = q[(2, 2)];
    let p2 = h2 + v2;
    DopSet {
        hdop: h2.sqrt(),
        vdop: v2.sqrt(),
        pdop: p2.sqrt(),
        gdop: (p2 + q[(3, 3)]).sqrt(),
    }
}

pub fn compute_dop(elas: &[f64], azas: &[f64]) -> Result<DopSet, DopError> {
    if elas.len() < 4 {
        return Err(DopError::TooFewSatellites(elas.len()));
    }
    Ok(dop_from_q(&to_f64(&q_checked(elas, azas, None)?)))
}

/// DPC of satellite `n` alone. See [`compute_dpc_all`].
pub fn compute_dpc(elas: &[f64], azas: &[f64], n: usize) -> Result<(f64, DpcFlag), DopError> {
    Ok(compute_dpc_all(elas, azas)?[n])
}

/// `gdop(all) - gdop(all but n)` for every `n`, using a rank-one downdate of
/// the full inverse. Downdates that remove most of a direction lose too many
/// digits, so those are recomputed from the reduced geometry.
pub fn compute_dpc_all(elas: &[f64], azas: &[f64]) -> Result<Vec<(f64, DpcFlag)>, DopError> {
    let n = elas.len();
    if n < 4 {
        return Err(DopError::TooFewSatellites(n));
    }
    if n == 4 {
        return Ok(vec![(0.0, DpcFlag::InsufficientRedundancy); 4]);
    }
    let q = q_checked(elas, azas, None)?;
    let trace = (0..4).fold(Dd::from(0.0), |t, i| t.add(q[i][i]));
    let full = trace.sqrt().0;
    Ok((0..n)
        .map(|i| {
            let h = dop_row(elas[i], azas[i]);
            let qh: [Dd; 4] =
                std::array::from_fn(|r| (0..4).fold(Dd::from(0.0), |acc, c| acc.add(q[r][c].mul_f(h[c]))));
            let hqh = (0..4).fold(Dd::from(0.0), |acc, r| acc.add(qh[r].mul_f(h[r])));
            let denom = Dd::from(1.0).sub(hqh);
            if denom.0 < DOWNDATE_MIN_DENOM {
                return match q_checked(elas, azas, Some(i)) {
                    Ok(qp) => (full - dop_from_q(&to_f64(&qp)).gdop, DpcFlag::Ok),
                    Err(_) => (-full, DpcFlag::SingularGeometry),
                };
            }
            let qh2 = qh.iter().fold(Dd::from(0.0), |acc, x| acc.add(x.mul(*x)));
            (full - trace.add(qh2.div(denom)).sqrt().0, DpcFlag::Ok)
        })
        .collect())
}

/// Raw features of every satellite in a coarse fix.
pub fn raw_features(fix: &CoarseFix) -> Vec<SatFeatures> {
    let look = fix.solution.look_angles();
    let elas: Vec<f64> = look.iter().map(|l| l.0).collect();
    let azas: Vec<f64> = look.iter().map(|l| l.1).collect();
    let dpc = compute_dpc_all(&elas, &azas).unwrap_or_else(|e| {
        debug!("t={} DPC unavailable: {e}", fix.epoch.t);
        vec![(0.0, DpcFlag::SingularGeometry); elas.len()]
    });
    let psr = compute_psr(&fix.solution);
    fix.epoch
        .observations
        .iter()
        .enumerate()
        .map(|(i, o)| SatFeatures {
            system: o.system,
            sat_id: o.sat_id,
            snr: o.snr,
            ela: elas[i],
            aza: azas[i],
            psr: psr[i],
            dpc: dpc[i].0,
            dpc_flag: dpc[i].1,
        })
        .collect()
}

/// Normalizes the features of a coarse fix. Beyond `n_max` satellites, those
/// with the smallest |DPC| are dropped; the remaining order is preserved.
pub fn pack_features(fix: &CoarseFix, norms: &NormalizationSpec, n_max: usize) -> EpochFeatures {
    pack_raw(raw_features(fix), norms, n_max)
}

pub fn pack_raw(sats: Vec<SatFeatures>, norms: &NormalizationSpec, n_max: usize) -> EpochFeatures {
    let mut keep: Vec<usize> = (0..sats.len()).collect();
    let mut dropped = Vec::new();
    if sats.len() > n_max {
        let mut by_importance = keep.clone();
        by_importance.sort_by(|&a, &b| sats[b].dpc.abs().total_cmp(&sats[a].dpc.abs()).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = by_importance[..n_max].to_vec();
        chosen.sort_unstable();
        for &i in &by_importance[n_max..] {
            debug!("dropping {} {} beyond N_max", sats[i].system, sats[i].sat_id);
            dropped.push((sats[i].system, sats[i].sat_id));
        }
        keep = chosen;
    }
    let kept: Vec<SatFeatures> = keep.iter().map(|&i| sats[i].clone()).collect();
    EpochFeatures {
        rows: kept.iter().map(|f| norms.apply(f)).collect(),
        sats: kept,
        source_index: keep,
        dropped,
    }
}

pub const FEATURE_CSV_HEADER: &str = "t,system,sat_id,snr,ela,aza,psr,dpc,dpc_flag,f0,f1,f2,f3,f4,f5,f6,f7";

/// One CSV line per satellite, header excluded.
pub fn write_features_csv<W: Write>(w: &mut W, t: f64, f: &EpochFeatures) -> std::io::Result<()> {
    for (s, row) in f.sats.iter().zip(&f.rows) {
        let flag = match s.dpc_flag {
            DpcFlag::Ok => "ok",
            DpcFlag::InsufficientRedundancy => "insufficient_redundancy",
            DpcFlag::SingularGeometry => "singular_geometry",
        };
        write!(w, "{t},{},{},{},{},{},{},{},{flag}", s.system, s.sat_id, s.snr, s.ela, s.aza, s.psr, s.dpc)?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
