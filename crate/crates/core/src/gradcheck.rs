//! Central-difference check of the training gradients on a micro-scenario.
//!
//! The scenario has two epochs of three satellites each, one of them with a
//! reflected-path bias, and goes through the same loss as training: features,
//! network, compensated measurement update and the DHEM loss.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coarse::Measurement;
use crate::ekf::{FilterState, StateMat, StateVec, IDX_CLOCK, IDX_ISB, IDX_POS, IDX_VEL};
use crate::features::{self, DpcFlag, NormalizationSpec, SatFeatures, DEFAULT_N_MAX};
use crate::frames::{enu_to_ecef, geodetic_to_ecef, EnuVec, GeodeticPos};
use crate::models::System;
use crate::net::tape::{AdjointFault, TapeError};
use crate::net::{NetParams, PARAM_NAMES};
use crate::train::{self, DhemConfig, LossEpoch, NoisePath};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely: below it the
/// difference quotient is dominated by rounding of the loss.
pub const GRADIENT_FLOOR: f64 = 1e-6;

const SAT_RANGE: f64 = 2.2e7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
    pub r_floor: f64,
    pub dhem: DhemConfig,
    pub fault: Option<AdjointFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            r_floor: crate::pipeline::DEFAULT_R_FLOOR,
            dhem: DhemConfig::default(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub parameters: usize,
    pub loss: f64,
    pub max_rel_error: f64,
    /// `name[row,col]` of the worst parameter.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        format!(
            "gradcheck: {} parameters, loss {:.12e}, max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}): {}",
            self.parameters,
            self.loss,
            self.max_rel_error,
            self.worst,
            self.analytic,
            self.numeric,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Two epochs of three satellites around a fixed receiver, with filter
/// predictions a few metres off and one biased satellite in each epoch.
pub fn micro_scenario(seed: u64) -> Vec<LossEpoch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let site = GeodeticPos::from_degrees(22.3193, 114.1694, 10.0);
    let truth = geodetic_to_ecef(&site);
    let systems = [System::Gps, System::Gal, System::Bds];
    let clock = 1500.0;
    let isb = [3.0, -2.0, 5.0];
    (0..2)
        .map(|k| {
            let mut meas = Vec::new();
            let mut sats = Vec::new();
            for (i, &system) in systems.iter().enumerate() {
                let el = (20.0 + 25.0 * i as f64 + rng.gen_range(-5.0..5.0f64)).to_radians();
                let az = (120.0 * i as f64 + 40.0 * k as f64 + rng.gen_range(-10.0..10.0f64)).to_radians();
                let dir = EnuVec {
                    east: el.cos() * az.sin(),
                    north: el.cos() * az.cos(),
                    up: el.sin(),
                };
                let sat_pos = enu_to_ecef(
                    &EnuVec {
                        east: dir.east * SAT_RANGE,
                        north: dir.north * SAT_RANGE,
                        up: dir.up * SAT_RANGE,
                    },
                    &site,
                );
                let bias = if i == k { 8.0 + 4.0 * k as f64 } else { 0.0 };
                let noise: f64 = rng.gen_range(-0.5..0.5);
                let offset = system.isb_index().map_or(0.0, |j| isb[j]);
                let range = sat_pos.distance(&truth) + clock + offset + bias + noise;
                let snr = 45.0 - if bias > 0.0 { 8.0 } else { 0.0 } + rng.gen_range(-2.0..2.0);
                meas.push(Measurement {
                    system,
                    sat_id: i as u16 + 1,
                    sat_pos,
                    range,
                    snr,
                });
                sats.push(SatFeatures {
                    system,
                    sat_id: i as u16 + 1,
                    snr,
                    ela: el,
                    aza: az,
                    psr: bias + noise,
                    dpc: 0.0,
                    dpc_flag: DpcFlag::InsufficientRedundancy,
                });
            }
            let rows = features::pack_raw(sats, &NormalizationSpec::default(), DEFAULT_N_MAX).rows;
            let off = Vector3::new(3.0, -2.0, 4.0) * (1.0 + 0.5 * k as f64);
            let mut x = StateVec::zeros();
            for j in 0..3 {
                x[IDX_POS + j] = truth.vec()[j] + off[j];
                x[IDX_ISB + j] = isb[j];
            }
            x[IDX_CLOCK] = clock + 2.0;
            // a mid-run covariance: the clock is already pinned down to a few
            // metres, as it is after the first updates of a real sweep
            let mut d = StateVec::zeros();
            for j in 0..3 {
                d[IDX_POS + j] = 9.0;
                d[IDX_VEL + j] = 0.25;
                d[IDX_ISB + j] = 1.0;
            }
            d[IDX_CLOCK] = 16.0;
            d[IDX_CLOCK + 1] = 1.0;
            let mut p = StateMat::from_diagonal(&d);
            for j in 0..3 {
                p[(IDX_POS + j, IDX_CLOCK)] = 2.0;
                p[(IDX_CLOCK, IDX_POS + j)] = 2.0;
            }
            LossEpoch {
                predicted: FilterState { x, p, t: k as f64 },
                meas,
                rows,
                truth,
            }
        })
        .collect()
}

/// Analytic gradients of `params` against central differences for every parameter.
pub fn check(params: &NetParams, epochs: &[LossEpoch], cfg: &GradcheckConfig) -> Result<GradcheckReport, TapeError> {
    let (loss, grads) = train::batch_gradient(params, epochs, &cfg.dhem, cfg.r_floor, NoisePath::Live, cfg.fault)?;
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let mut flat = base.clone();
    let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..flat.len() {
        flat[i] = base[i] + cfg.step;
        let plus = train::batch_loss_value(&NetParams::from_flat(&flat), epochs, &cfg.dhem, cfg.r_floor)?;
        flat[i] = base[i] - cfg.step;
        let minus = train::batch_loss_value(&NetParams::from_flat(&flat), epochs, &cfg.dhem, cfg.r_floor)?;
        flat[i] = base[i];
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        if rel > worst.1 || i == 0 {
            worst = (i, rel, a, numeric);
        }
    }
    Ok(GradcheckReport {
        parameters: base.len(),
        loss,
        max_rel_error: worst.1,
        worst: parameter_name(params, worst.0),
        analytic: worst.2,
        numeric: worst.3,
        passed: worst.1 < cfg.threshold,
    })
}

/// The default micro-scenario with seed-initialized parameters.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport, TapeError> {
    check(&NetParams::init(cfg.seed), &micro_scenario(cfg.seed), cfg)
}

fn parameter_name(params: &NetParams, mut i: usize) -> String {
    for (name, a) in PARAM_NAMES.iter().zip(params.arrays()) {
        if i < a.len() {
            // flat order is column-major within each array
            return format!("{name}[{},{}]", i % a.nrows(), i / a.nrows());
        }
        i -= a.len();
    }
    format!("#{i}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_scenario_shape() {
        let e = micro_scenario(3);
        assert_eq!(e.len(), 2);
        for ep in &e {
            assert_eq!(ep.meas.len(), 3);
            assert_eq!(ep.rows.len(), 3);
            assert!(ep.predicted.position().distance(&ep.truth) > 1.0);
        }
        assert_eq!(micro_scenario(3), e);
    }

    #[test]
    fn parameter_names_cover_flat_layout() {
        let p = NetParams::zeros();
        assert_eq!(parameter_name(&p, 0), "wq[0,0]");
        assert_eq!(parameter_name(&p, 1), "wq[1,0]");
        assert_eq!(parameter_name(&p, p.len() - 1), "b4[0,1]");
    }
}
