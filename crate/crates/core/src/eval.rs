//! Error series in a fixed local frame, RMSE and CDF summaries, and report
//! writers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{self, EcefPos, GeodeticPos};
use crate::pipeline::{Solution, StepKind};

pub const CDF_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{solutions} solutions for {truth} truth epochs")]
    LengthMismatch { solutions: usize, truth: usize },
    #[error("no epoch has both a solution and ground truth")]
    NoValidEpochs,
    #[error("reference point: {0}")]
    Reference(String),
    #[error("solutions file: {0}")]
    Solutions(String),
}

/// Per-epoch east/north/up errors (m); `valid` is false where no solution exists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorSeries {
    pub e: Vec<f64>,
    pub n: Vec<f64>,
    pub u: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ErrorSeries {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn norm_3d(&self, i: usize) -> f64 {
        (self.e[i] * self.e[i] + self.n[i] * self.n[i] + self.u[i] * self.u[i]).sqrt()
    }
}

/// Solution minus truth rotated into ENU at `reference`. Epochs with no
/// solution (or no truth) are marked invalid and carry zeros.
pub fn enu_errors(
    solutions: &[Option<EcefPos>],
    truth: &[Option<EcefPos>],
    reference: &GeodeticPos,
) -> Result<ErrorSeries, EvalError> {
    if solutions.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            solutions: solutions.len(),
            truth: truth.len(),
        });
    }
    let rot = frames::enu_rotation(reference);
    let mut out = ErrorSeries::default();
    for (s, t) in solutions.iter().zip(truth) {
        let (d, ok) = match (s, t) {
            (Some(s), Some(t)) => (rot * (s.vec() - t.vec()), true),
            _ => (nalgebra::Vector3::zeros(), false),
        };
        out.e.push(d.x);
        out.n.push(d.y);
        out.u.push(d.z);
        out.valid.push(ok);
    }
    Ok(out)
}

/// First available truth point as a geodetic reference.
pub fn reference_point(truth: &[Option<EcefPos>]) -> Result<GeodeticPos, EvalError> {
    let first = truth.iter().flatten().next().ok_or(EvalError::NoValidEpochs)?;
    frames::ecef_to_geodetic_lossy(first).map_err(|e| EvalError::Reference(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub rmse_e: f64,
    pub rmse_n: f64,
    pub rmse_u: f64,
    pub rmse_2d: f64,
    pub rmse_3d: f64,
    pub p95_3d: f64,
    /// `(quantile, 3D error)` at quantiles 0.01, 0.02, ..., 1.00.
    pub cdf: Vec<(f64, f64)>,
    pub epochs_used: usize,
    pub epochs_skipped: usize,
    /// Reference latitude, longitude (deg) and height (m).
    pub reference: [f64; 3],
}

/// Nearest-rank quantile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn summarize(method: &str, series: &ErrorSeries, reference: &GeodeticPos) -> Result<RunReport, EvalError> {
    let idx: Vec<usize> = (0..series.len()).filter(|&i| series.valid[i]).collect();
    if idx.is_empty() {
        return Err(EvalError::NoValidEpochs);
    }
    let n = idx.len() as f64;
    let ms = |v: &[f64]| idx.iter().map(|&i| v[i] * v[i]).sum::<f64>() / n;
    let (me, mn, mu) = (ms(&series.e), ms(&series.n), ms(&series.u));
    let mut d3: Vec<f64> = idx.iter().map(|&i| series.norm_3d(i)).collect();
    d3.sort_by(f64::total_cmp);
    let cdf = (1..=CDF_POINTS)
        .map(|k| {
            let q = k as f64 / CDF_POINTS as f64;
            (q, nearest_rank(&d3, q))
        })
        .collect();
    Ok(RunReport {
        method: method.to_string(),
        rmse_e: me.sqrt(),
        rmse_n: mn.sqrt(),
        rmse_u: mu.sqrt(),
        rmse_2d: (me + mn).sqrt(),
        rmse_3d: (me + mn + mu).sqrt(),
        p95_3d: nearest_rank(&d3, 0.95),
        cdf,
        epochs_used: idx.len(),
        epochs_skipped: series.len() - idx.len(),
        reference: [reference.lat.to_degrees(), reference.lon.to_degrees(), reference.height],
    })
}

/// Error series and summary of one pipeline's solutions against truth.
pub fn evaluate(method: &str, solutions: &[Solution], truth: &[Option<EcefPos>]) -> Result<(ErrorSeries, RunReport), EvalError> {
    let reference = reference_point(truth)?;
    let pos: Vec<Option<EcefPos>> = solutions.iter().map(|s| s.position).collect();
    let series = enu_errors(&pos, truth, &reference)?;
    let report = summarize(method, &series, &reference)?;
    Ok((series, report))
}

pub const REPORT_CSV_HEADER: &str =
    "method,rmse_e,rmse_n,rmse_u,rmse_2d,rmse_3d,p95_3d,epochs_used,epochs_skipped,ref_lat_deg,ref_lon_deg,ref_height_m";

pub fn reports_csv(reports: &[RunReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{REPORT_CSV_HEADER}");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.rmse_e,
            r.rmse_n,
            r.rmse_u,
            r.rmse_2d,
            r.rmse_3d,
            r.p95_3d,
            r.epochs_used,
            r.epochs_skipped,
            r.reference[0],
            r.reference[1],
            r.reference[2]
        );
    }
    s
}

pub fn cdf_csv(reports: &[RunReport]) -> String {
    let mut s = String::from("method,quantile,error_3d\n");
    for r in reports {
        for (q, v) in &r.cdf {
            let _ = writeln!(s, "{},{q},{v}", r.method);
        }
    }
    s
}

pub fn series_csv(method: &str, t: &[f64], series: &ErrorSeries) -> String {
    let mut s = String::from("method,t,e,n,u,valid\n");
    for (i, t) in t.iter().enumerate() {
        let _ = writeln!(s, "{method},{t},{},{},{},{}", series.e[i], series.n[i], series.u[i], series.valid[i] as u8);
    }
    s
}

pub const SOLUTIONS_CSV_HEADER: &str = "method,t,x,y,z,kind";

#[derive(Deserialize)]
struct SolutionRow {
    method: String,
    t: f64,
    x: Option<f64>,
    y: Option<f64>,
    z: Option<f64>,
    kind: StepKind,
}

/// Per-epoch ECEF solutions of several methods; missing positions are empty fields.
pub fn solutions_csv(runs: &[(&str, &[Solution])]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{SOLUTIONS_CSV_HEADER}");
    for (method, sols) in runs {
        for sol in *sols {
            let kind = serde_json::to_value(sol.kind).ok();
            let kind = kind.as_ref().and_then(|k| k.as_str()).unwrap_or("none");
            match sol.position {
                Some(p) => {
                    let _ = writeln!(s, "{method},{},{},{},{},{kind}", sol.t, p.x, p.y, p.z);
                }
                None => {
                    let _ = writeln!(s, "{method},{},,,,{kind}", sol.t);
                }
            }
        }
    }
    s
}

/// Inverse of [`solutions_csv`]; methods keep their order of first appearance.
pub fn parse_solutions_csv(text: &str) -> Result<Vec<(String, Vec<Solution>)>, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| EvalError::Solutions(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != SOLUTIONS_CSV_HEADER {
        return Err(EvalError::Solutions(format!("expected header {SOLUTIONS_CSV_HEADER}")));
    }
    let mut runs: Vec<(String, Vec<Solution>)> = Vec::new();
    for (i, row) in rdr.deserialize::<SolutionRow>().enumerate() {
        let row = row.map_err(|e| EvalError::Solutions(format!("row {}: {e}", i + 2)))?;
        let position = match (row.x, row.y, row.z) {
            (Some(x), Some(y), Some(z)) => Some(EcefPos::new(x, y, z)),
            (None, None, None) => None,
            _ => return Err(EvalError::Solutions(format!("row {}: partial position", i + 2))),
        };
        let sol = Solution {
            t: row.t,
            position,
            kind: row.kind,
        };
        match runs.iter_mut().find(|(m, _)| *m == row.method) {
            Some((_, v)) => v.push(sol),
            None => runs.push((row.method, vec![sol])),
        }
    }
    Ok(runs)
}

/// Fixed-width table of the headline numbers.
pub fn summary_table(reports: &[RunReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7}",
        "method", "E", "N", "U", "2D", "3D", "p95 3D", "used", "skipped"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<12} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>7} {:>7}",
            r.method, r.rmse_e, r.rmse_n, r.rmse_u, r.rmse_2d, r.rmse_3d, r.p95_3d, r.epochs_used, r.epochs_skipped
        );
    }
    s
}
