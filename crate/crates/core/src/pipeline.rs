//! Per-epoch preprocessing shared by every positioning pipeline, and the
//! chronological filter sweep.
//!
//! Quality control, coarse solutions and features do not depend on the
//! network, so they are computed once per dataset; the filter then consumes
//! the screened, corrected measurements of each epoch together with
//! per-satellite noise variances and innovation offsets.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::coarse::{self, CoarseFix, CoarseState, Measurement, QcConfig};
use crate::ekf::{self, EkfError, FilterState, InitConfig, ProcessNoiseConfig, MAX_GAP_S};
use crate::features::{self, EpochFeatures, NormalizationSpec, DEFAULT_N_MAX};
use crate::frames::EcefPos;
use crate::ingest::EpochRecord;
use crate::models::CorrectionConfig;
use crate::net::{self, NetParams};

/// Elevations below this are treated as this value by the noise model.
const MIN_MODEL_ELEVATION: f64 = 1.0 * std::f64::consts::PI / 180.0;

/// Variances below 1 cm² would make the innovation covariance numerically
/// singular next to metre-level ones.
pub const DEFAULT_R_FLOOR: f64 = 1e-4;

/// Fixed pseudorange noise model `r = (a + b / sin el)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElevationModel {
    pub a: f64,
    pub b: f64,
}

impl Default for ElevationModel {
    fn default() -> Self {
        Self { a: 0.3, b: 0.3 }
    }
}

impl ElevationModel {
    pub fn variance(&self, elevation: f64) -> f64 {
        let s = self.a + self.b / elevation.max(MIN_MODEL_ELEVATION).sin();
        s * s
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.a >= 0.0 && self.b >= 0.0 && self.a + self.b > 0.0 && self.a.is_finite() && self.b.is_finite() {
            Ok(())
        } else {
            Err(format!("elevation model a={} b={} must be non-negative, not both zero", self.a, self.b))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub qc: QcConfig,
    pub corrections: CorrectionConfig,
    pub norms: NormalizationSpec,
    pub n_max: usize,
    pub init: InitConfig,
    pub process: ProcessNoiseConfig,
    pub elevation: ElevationModel,
    /// Lower bound on every measurement variance handed to the filter (m²).
    pub r_floor: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            qc: QcConfig::default(),
            corrections: CorrectionConfig::default(),
            norms: NormalizationSpec::default(),
            n_max: DEFAULT_N_MAX,
            init: InitConfig::default(),
            process: ProcessNoiseConfig::default(),
            elevation: ElevationModel::default(),
            r_floor: DEFAULT_R_FLOOR,
        }
    }
}

/// Everything the filter needs from one epoch that does not depend on the network.
#[derive(Debug, Clone)]
pub struct PreparedEpoch {
    pub t: f64,
    pub truth: Option<EcefPos>,
    pub fix: Option<CoarseFix>,
    pub features: Option<EpochFeatures>,
    /// Measurements of the satellites in `features`, same order.
    pub meas: Vec<Measurement>,
    /// Coarse-fix elevations of the same satellites (rad).
    pub elevations: Vec<f64>,
    pub error: Option<String>,
}

impl PreparedEpoch {
    pub fn usable(&self) -> bool {
        self.fix.is_some() && !self.meas.is_empty()
    }
}

fn failed(rec: &EpochRecord, error: String) -> PreparedEpoch {
    PreparedEpoch {
        t: rec.t,
        truth: rec.truth,
        fix: None,
        features: None,
        meas: Vec::new(),
        elevations: Vec::new(),
        error: Some(error),
    }
}

/// Screens and solves every epoch; the previous fix (when recent) seeds the
/// next one. Failures are recorded per epoch and never abort the sweep.
pub fn prepare(records: &[EpochRecord], start: Option<EcefPos>, cfg: &PipelineConfig) -> Vec<PreparedEpoch> {
    let mut last: Option<(f64, CoarseState)> = None;
    records
        .iter()
        .map(|rec| {
            let prior = last.filter(|(t, _)| rec.t - t > 0.0 && rec.t - t <= MAX_GAP_S);
            let (prior_pos, x0) = match (prior, start) {
                (Some((_, s)), _) => (Some(EcefPos::new(s[0], s[1], s[2])), s),
                (None, Some(p)) => (None, CoarseState::from_column_slice(&[p.x, p.y, p.z, 0.0, 0.0, 0.0, 0.0])),
                (None, None) => (None, coarse::default_start()),
            };
            let fix = match coarse::solve_epoch(rec, prior_pos.as_ref(), &x0, &cfg.qc, &cfg.corrections) {
                Ok(f) => f,
                Err(e) => {
                    warn!("t={} coarse solution failed: {e}", rec.t);
                    return failed(rec, e.to_string());
                }
            };
            last = Some((rec.t, fix.solution.state()));
            let feats = features::pack_features(&fix, &cfg.norms, cfg.n_max);
            let meas = feats.source_index.iter().map(|&i| fix.measurements[i].clone()).collect();
            let elevations = feats.sats.iter().map(|s| s.ela).collect();
            PreparedEpoch {
                t: rec.t,
                truth: rec.truth,
                fix: Some(fix),
                features: Some(feats),
                meas,
                elevations,
                error: None,
            }
        })
        .collect()
}

/// Per-satellite measurement variances and innovation offsets of one epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochNoise {
    pub r: Vec<f64>,
    pub vc: Vec<f64>,
}

pub fn elevation_noise(epochs: &[PreparedEpoch], model: &ElevationModel) -> Vec<EpochNoise> {
    epochs
        .iter()
        .map(|e| EpochNoise {
            r: e.elevations.iter().map(|&el| model.variance(el)).collect(),
            vc: vec![0.0; e.elevations.len()],
        })
        .collect()
}

/// Network outputs for every epoch, evaluated in chunks of `chunk` epochs.
pub fn network_noise(epochs: &[PreparedEpoch], params: &NetParams, chunk: usize) -> Vec<EpochNoise> {
    let empty = EpochFeatures {
        sats: Vec::new(),
        rows: Vec::new(),
        source_index: Vec::new(),
        dropped: Vec::new(),
    };
    let mut out = Vec::with_capacity(epochs.len());
    for group in epochs.chunks(chunk.max(1)) {
        let feats: Vec<&EpochFeatures> = group.iter().map(|e| e.features.as_ref().unwrap_or(&empty)).collect();
        for (r, vc) in net::forward_epochs(&feats, params) {
            out.push(EpochNoise { r, vc });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Filter (re)initialized from the coarse solution.
    Init,
    Update,
    /// Prediction only: no usable measurements or the update failed.
    Predict,
    /// No filter state exists yet and the epoch has no coarse solution.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub kind: StepKind,
    /// State after time update, before the measurement update.
    pub predicted: Option<FilterState>,
    pub error: Option<String>,
}

/// Chronological EKF driver with gap handling.
#[derive(Debug, Clone, Default)]
pub struct FilterRunner {
    pub state: Option<FilterState>,
    init: InitConfig,
    process: ProcessNoiseConfig,
    r_floor: f64,
}

impl FilterRunner {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            state: None,
            init: cfg.init,
            process: cfg.process,
            r_floor: cfg.r_floor,
        }
    }

    pub fn step(&mut self, epoch: &PreparedEpoch, noise: &EpochNoise) -> StepOutcome {
        let init_from_fix = |fix: &CoarseFix| ekf::init_filter(&fix.solution, &self.init, epoch.t);
        let prev = match &self.state {
            Some(s) if epoch.t - s.t > 0.0 && epoch.t - s.t <= MAX_GAP_S => s.clone(),
            other => {
                if let Some(s) = other {
                    debug!("t={} gap of {} s; re-initializing", epoch.t, epoch.t - s.t);
                }
                return match &epoch.fix {
                    Some(fix) => {
                        self.state = Some(init_from_fix(fix));
                        StepOutcome {
                            kind: StepKind::Init,
                            predicted: None,
                            error: None,
                        }
                    }
                    None => {
                        self.state = None;
                        StepOutcome {
                            kind: StepKind::None,
                            predicted: None,
                            error: epoch.error.clone(),
                        }
                    }
                };
            }
        };
        let pred = match ekf::time_update(&prev, epoch.t - prev.t, &self.process) {
            Ok(p) => p,
            Err(e) => {
                return self.predict_only(prev, None, Some(e));
            }
        };
        if !epoch.usable() {
            return self.predict_only(pred.clone(), Some(pred), None);
        }
        let r: Vec<f64> = noise.r.iter().map(|r| r.max(self.r_floor)).collect();
        match ekf::measurement_update(&pred, &epoch.meas, &r, &noise.vc) {
            Ok((post, _)) => {
                self.state = Some(post);
                StepOutcome {
                    kind: StepKind::Update,
                    predicted: Some(pred),
                    error: None,
                }
            }
            Err(e) => {
                warn!("t={} measurement update failed: {e}", epoch.t);
                self.predict_only(pred.clone(), Some(pred), Some(e))
            }
        }
    }

    fn predict_only(&mut self, s: FilterState, predicted: Option<FilterState>, err: Option<EkfError>) -> StepOutcome {
        self.state = Some(s);
        StepOutcome {
            kind: StepKind::Predict,
            predicted,
            error: err.map(|e| e.to_string()),
        }
    }
}

/// One epoch of a pipeline's output.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub t: f64,
    pub position: Option<EcefPos>,
    pub kind: StepKind,
}

/// Runs the filter over all epochs with the given noise.
pub fn run_filter(epochs: &[PreparedEpoch], noise: &[EpochNoise], cfg: &PipelineConfig) -> Vec<(Solution, Option<FilterState>)> {
    assert_eq!(epochs.len(), noise.len());
    let mut runner = FilterRunner::new(cfg);
    epochs
        .iter()
        .zip(noise)
        .map(|(e, n)| {
            let out = runner.step(e, n);
            let state = runner.state.clone();
            (
                Solution {
                    t: e.t,
                    position: state.as_ref().map(|s| s.position()),
                    kind: out.kind,
                },
                state,
            )
        })
        .collect()
}

/// Per-epoch least squares with no filtering.
pub fn run_baseline_ls(epochs: &[PreparedEpoch]) -> Vec<Solution> {
    epochs
        .iter()
        .map(|e| Solution {
            t: e.t,
            position: e.fix.as_ref().map(|f| f.solution.rx_pos),
            kind: if e.fix.is_some() { StepKind::Update } else { StepKind::None },
        })
        .collect()
}

/// EKF with elevation-model variances and no innovation offsets.
pub fn run_baseline_ekf(epochs: &[PreparedEpoch], cfg: &PipelineConfig) -> Vec<Solution> {
    let noise = elevation_noise(epochs, &cfg.elevation);
    run_filter(epochs, &noise, cfg).into_iter().map(|(s, _)| s).collect()
}

/// EKF with network-predicted variances and innovation offsets.
pub fn run_lf(epochs: &[PreparedEpoch], params: &NetParams, cfg: &PipelineConfig) -> Vec<Solution> {
    let noise = network_noise(epochs, params, 64);
    run_filter(epochs, &noise, cfg).into_iter().map(|(s, _)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{self, ScenarioConfig, TrajectorySpec};

    fn scenario(seed: u64, secs: f64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig {
            seed,
            duration_s: secs,
            ..ScenarioConfig::default()
        };
        cfg.errors = cfg.errors.zeroed();
        cfg
    }

    #[test]
    fn elevation_model_values() {
        let m = ElevationModel::default();
        assert!((m.variance(std::f64::consts::FRAC_PI_2) - 0.36).abs() < 1e-15);
        assert!((m.variance(std::f64::consts::FRAC_PI_6) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn noiseless_pipelines_track_truth() {
        let mut sc = scenario(2, 40.0);
        sc.trajectory = TrajectorySpec::static_at(-33.9, 151.2, 40.0);
        let s = sim::generate(&sc).unwrap();
        let cfg = PipelineConfig::default();
        let prepared = prepare(&s.records, None, &cfg);
        assert!(prepared.iter().all(|e| e.usable()));
        for sol in run_baseline_ls(&prepared).iter().zip(&s.records) {
            assert!(sol.0.position.unwrap().distance(&sol.1.truth.unwrap()) < 1e-6);
        }
        let ekf = run_baseline_ekf(&prepared, &cfg);
        assert_eq!(ekf[0].kind, StepKind::Init);
        assert!(ekf[1..].iter().all(|s| s.kind == StepKind::Update));
        let last = ekf.last().unwrap().position.unwrap();
        let d = last.distance(&s.records.last().unwrap().truth.unwrap());
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn gaps_reinitialize_and_failures_predict() {
        let mut cfg = scenario(3, 20.0);
        cfg.trajectory = TrajectorySpec::static_at(30.0, 10.0, 0.0);
        let s = sim::generate(&cfg).unwrap();
        let mut recs = s.records.clone();
        for r in recs.iter_mut().skip(10) {
            r.t += 100.0;
        }
        recs[5].observations.truncate(2);
        let pc = PipelineConfig::default();
        let prepared = prepare(&recs, None, &pc);
        assert!(prepared[5].fix.is_none());
        let sols = run_baseline_ekf(&prepared, &pc);
        assert_eq!(sols[5].kind, StepKind::Predict);
        assert!(sols[5].position.is_some());
        assert_eq!(sols[10].kind, StepKind::Init);
        let ls = run_baseline_ls(&prepared);
        assert!(ls[5].position.is_none());
    }

    #[test]
    fn network_noise_matches_per_epoch_forward() {
        let s = sim::generate(&scenario(4, 10.0)).unwrap();
        let pc = PipelineConfig::default();
        let prepared = prepare(&s.records, None, &pc);
        let p = NetParams::init(9);
        let batched = network_noise(&prepared, &p, 4);
        for (e, n) in prepared.iter().zip(&batched) {
            let single = net::forward_epochs(&[e.features.as_ref().unwrap()], &p);
            for (a, b) in single[0].0.iter().zip(&n.r) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in single[0].1.iter().zip(&n.vc) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
