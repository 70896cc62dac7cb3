//! Dynamic hard-example-mining loss, Adam, the cosine schedule and the
//! training loop.
//!
//! Each epoch's loss differentiates through that epoch's measurement update
//! and the network only: the predicted state is a constant input. The
//! position error enters the loss through its norm, which is the same in
//! ECEF and ENU, so no rotation is taken.

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::{self, FilterState, IDX_POS, STATE_DIM};
use crate::eval;
use crate::frames::EcefPos;
use crate::net::tape::{AdjointFault, Tape, TapeError, Var};
use crate::net::{self, NetParams, ParamVars};
use crate::pipeline::{self, EpochNoise, FilterRunner, PipelineConfig, PreparedEpoch, StepKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch at t={0} has no ground truth")]
    NoGroundTruth(f64),
    #[error("loss became non-finite in training epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize, params: Box<NetParams> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no epoch in the training set produced a measurement update")]
    NoUpdates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DhemConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub dynamic_gamma: bool,
    /// Added to the batch maximum in the weight denominator (m).
    pub eps_max: f64,
    /// Treat the batch maximum as a constant when differentiating.
    pub stop_gradient_max: bool,
}

impl Default for DhemConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
            lambda: 0.1,
            dynamic_gamma: true,
            eps_max: 1e-9,
            stop_gradient_max: false,
        }
    }
}

impl DhemConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(format!("alpha {} must be positive", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(format!("gamma {} must be non-negative", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.eps_max > 0.0 && self.eps_max.is_finite()) {
            return Err(format!("eps_max {} must be positive", self.eps_max));
        }
        Ok(())
    }

    fn gamma_at(&self, d: f64) -> f64 {
        if self.dynamic_gamma {
            self.gamma * (-self.lambda * d).exp()
        } else {
            self.gamma
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DhemBreakdown {
    /// `sqrt(mean(L_dhem²))`.
    pub loss: f64,
    pub l_base: Vec<f64>,
    pub w: Vec<f64>,
    pub gamma_dyn: Vec<f64>,
    pub l_dhem: Vec<f64>,
}

/// Scalar evaluation of the loss over a batch of ENU error vectors.
pub fn dhem_loss(errors: &[[f64; 3]], cfg: &DhemConfig) -> DhemBreakdown {
    assert!(!errors.is_empty(), "empty batch");
    let l_base: Vec<f64> = errors.iter().map(|e| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()).collect();
    dhem_from_base(l_base, cfg)
}

pub fn dhem_from_base(l_base: Vec<f64>, cfg: &DhemConfig) -> DhemBreakdown {
    let denom = l_base.iter().copied().fold(f64::NEG_INFINITY, f64::max) + cfg.eps_max;
    let gamma_dyn: Vec<f64> = l_base.iter().map(|&d| cfg.gamma_at(d)).collect();
    let w: Vec<f64> = l_base
        .iter()
        .zip(&gamma_dyn)
        .map(|(&d, &g)| (1.0 - (d / denom).sqrt()).powf(g))
        .collect();
    let l_dhem: Vec<f64> = l_base.iter().zip(&w).map(|(&d, &w)| cfg.alpha * w * d).collect();
    let loss = (l_dhem.iter().map(|l| l * l).sum::<f64>() / l_dhem.len() as f64).sqrt();
    DhemBreakdown {
        loss,
        l_base,
        w,
        gamma_dyn,
        l_dhem,
    }
}

/// The same loss on the tape; `d` is a `B×1` column of error norms.
pub fn dhem_loss_tape(t: &mut Tape, d: Var, cfg: &DhemConfig) -> Var {
    let b = t.value(d).nrows();
    let m = t.max(d);
    let m = if cfg.stop_gradient_max { t.detach(m) } else { m };
    let m = t.add_scalar(m, cfg.eps_max);
    let m = t.broadcast(m, b, 1);
    let ratio = t.div(d, m);
    let root = t.sqrt(ratio);
    let neg = t.scale(root, -1.0);
    let base = t.add_scalar(neg, 1.0);
    let expo = if cfg.dynamic_gamma {
        let s = t.scale(d, -cfg.lambda);
        let e = t.exp(s);
        t.scale(e, cfg.gamma)
    } else {
        let g = t.constant_scalar(cfg.gamma);
        t.broadcast(g, b, 1)
    };
    let w = t.pow(base, expo);
    let wd = t.mul(w, d);
    let l = t.scale(wd, cfg.alpha);
    let sq = t.mul(l, l);
    let ms = t.mean(sq);
    t.sqrt(ms)
}

/// `η_min + ½(lr0 − η_min)(1 + cos(π (epoch mod T_max) / T_max))`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let phase = (epoch % cfg.t_max) as f64 / cfg.t_max as f64;
    cfg.eta_min + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    /// One bias-corrected step in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub t_max: usize,
    pub eta_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Trailing fraction of the training records held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr0: 1e-3,
            t_max: 50,
            eta_min: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 || self.t_max == 0 {
            return Err("batch_size and t_max must be at least 1".into());
        }
        if !(self.lr0 >= 0.0 && self.eta_min >= 0.0 && self.lr0.is_finite() && self.eta_min.is_finite()) {
            return Err("learning rates must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err("adam betas must lie in [0, 1) and eps be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err("validation_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Inputs of one epoch's loss: everything but the network is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEpoch {
    pub predicted: FilterState,
    pub meas: Vec<crate::coarse::Measurement>,
    pub rows: Vec<[f64; crate::features::FEATURE_DIM]>,
    pub truth: EcefPos,
}

/// How the network outputs enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoisePath {
    #[default]
    Live,
    /// Variances detached and offsets zeroed: no path reaches the parameters.
    Frozen,
}

/// Loss of a batch of epochs on `t`, returning the loss node and the
/// per-epoch error norms.
pub fn batch_loss(
    t: &mut Tape,
    p: &ParamVars,
    epochs: &[LossEpoch],
    dhem: &DhemConfig,
    r_floor: f64,
    path: NoisePath,
) -> Result<(Var, Vec<f64>), TapeError> {
    let feats: Vec<crate::features::EpochFeatures> = epochs
        .iter()
        .map(|e| crate::features::EpochFeatures {
            sats: Vec::new(),
            rows: e.rows.clone(),
            source_index: Vec::new(),
            dropped: Vec::new(),
        })
        .collect();
    let refs: Vec<&crate::features::EpochFeatures> = feats.iter().collect();
    let (xm, segments) = net::stack_epochs(&refs);
    let x = t.leaf(xm);
    let f = net::forward_tape(t, p, x, &segments);
    let mut norms = Vec::with_capacity(epochs.len());
    for (e, seg) in epochs.iter().zip(&segments) {
        let n = seg.len;
        let (h, v) = ekf::linearize(&e.predicted.x, &e.meas);
        let pm = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, e.predicted.p.as_slice());
        let pht = &pm * h.transpose();
        let s_base = &h * &pht;
        let r = t.rows(f.r, seg.start, n);
        // max(r, floor) as r + relu(floor - r)
        let below = t.scale(r, -1.0);
        let below = t.add_scalar(below, r_floor);
        let below = t.relu(below);
        let r = t.add(r, below);
        let (r, vc) = match path {
            NoisePath::Live => (r, t.rows(f.vc, seg.start, n)),
            NoisePath::Frozen => (t.detach(r), t.leaf(DMatrix::zeros(n, 1))),
        };
        let rd = t.diag(r);
        let sb = t.leaf(s_base);
        let s = t.add(sb, rd);
        let vv = t.leaf(DMatrix::from_column_slice(n, 1, v.as_slice()));
        let rhs = t.add(vv, vc);
        let y = t.solve_spd(s, rhs)?;
        let gain = t.leaf(pht.rows(IDX_POS, 3).into_owned());
        let dx = t.matmul(gain, y);
        let off = e.predicted.position().vec() - e.truth.vec();
        let off = t.leaf(DMatrix::from_column_slice(3, 1, off.as_slice()));
        let err = t.add(dx, off);
        let sq = t.mul(err, err);
        let ss = t.sum(sq);
        let d = t.sqrt(ss);
        norms.push(d);
    }
    let d = t.concat_rows(&norms);
    let values = t.value(d).iter().copied().collect();
    Ok((dhem_loss_tape(t, d, dhem), values))
}

/// Loss value and parameter gradients of one batch.
pub fn batch_gradient(
    params: &NetParams,
    epochs: &[LossEpoch],
    dhem: &DhemConfig,
    r_floor: f64,
    path: NoisePath,
    fault: Option<AdjointFault>,
) -> Result<(f64, NetParams), TapeError> {
    let mut t = Tape::new();
    t.inject_fault(fault);
    let p = params.on_tape(&mut t);
    let (loss, _) = batch_loss(&mut t, &p, epochs, dhem, r_floor, path)?;
    let g = t.backward(loss)?;
    Ok((t.scalar(loss), p.gradients(&g)))
}

/// Loss value only.
pub fn batch_loss_value(params: &NetParams, epochs: &[LossEpoch], dhem: &DhemConfig, r_floor: f64) -> Result<f64, TapeError> {
    let mut t = Tape::new();
    let p = params.on_tape(&mut t);
    let (loss, _) = batch_loss(&mut t, &p, epochs, dhem, r_floor, NoisePath::Live)?;
    Ok(t.scalar(loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mean_loss: Vec<f64>,
    pub val_rmse_3d: Vec<f64>,
    pub lr: Vec<f64>,
    pub skipped: Vec<usize>,
    pub wall_time_s: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_rmse_3d: f64,
    pub dhem: DhemConfig,
    pub config: TrainConfig,
}

impl TrainReport {
    /// Per-epoch CSV. Wall time is left out so that the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let d = &self.dhem;
        let _ = writeln!(
            s,
            "# dhem alpha={} gamma={} lambda={} dynamic_gamma={} eps_max={} stop_gradient_max={}",
            d.alpha, d.gamma, d.lambda, d.dynamic_gamma, d.eps_max, d.stop_gradient_max
        );
        let c = &self.config;
        let _ = writeln!(
            s,
            "# train epochs={} batch_size={} lr0={} t_max={} eta_min={} seed={} best_epoch={} best_val_rmse_3d={}",
            c.epochs, c.batch_size, c.lr0, c.t_max, c.eta_min, c.seed, self.best_epoch, self.best_val_rmse_3d
        );
        let _ = writeln!(s, "epoch,lr,mean_loss,val_rmse_3d,skipped");
        for i in 0..self.mean_loss.len() {
            let _ = writeln!(s, "{i},{},{},{},{}", self.lr[i], self.mean_loss[i], self.val_rmse_3d[i], self.skipped[i]);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation RMSE.
    pub best: NetParams,
    pub last: NetParams,
    pub report: TrainReport,
}

/// Prepared training and validation epochs from one record set: the
/// trailing `validation_fraction` is held out.
pub fn split_train_validation(prepared: Vec<PreparedEpoch>, fraction: f64) -> (Vec<PreparedEpoch>, Vec<PreparedEpoch>) {
    let n_val = (prepared.len() as f64 * fraction).round() as usize;
    let mut train = prepared;
    let val = train.split_off(train.len() - n_val);
    (train, val)
}

/// 3D RMSE of the network pipeline on prepared epochs.
pub fn validation_rmse(epochs: &[PreparedEpoch], params: &NetParams, cfg: &PipelineConfig) -> f64 {
    let truth: Vec<Option<EcefPos>> = epochs.iter().map(|e| e.truth).collect();
    let sols = pipeline::run_lf(epochs, params, cfg);
    match eval::evaluate("val", &sols, &truth) {
        Ok((_, r)) => r.rmse_3d,
        Err(_) => f64::INFINITY,
    }
}

/// One chronological sweep over `epochs` with an optimizer step after every
/// batch. Returns the mean batch loss and the number of skipped epochs.
pub fn train_epoch(
    epochs: &[PreparedEpoch],
    params: &mut NetParams,
    adam: &mut Adam,
    lr: f64,
    pcfg: &PipelineConfig,
    tcfg: &TrainConfig,
    dhem: &DhemConfig,
    epoch_index: usize,
) -> Result<(f64, usize), TrainError> {
    let mut runner = FilterRunner::new(pcfg);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut skipped = 0usize;
    for (bi, batch) in epochs.chunks(tcfg.batch_size).enumerate() {
        let noise = pipeline::network_noise(batch, params, batch.len());
        let mut inputs = Vec::with_capacity(batch.len());
        for (e, n) in batch.iter().zip(&noise) {
            let out = runner.step(e, n);
            match (out.kind, out.predicted) {
                (StepKind::Update, Some(pred)) => {
                    let truth = e.truth.ok_or(TrainError::NoGroundTruth(e.t))?;
                    inputs.push(LossEpoch {
                        predicted: pred,
                        meas: e.meas.clone(),
                        rows: e.features.as_ref().map(|f| f.rows.clone()).unwrap_or_default(),
                        truth,
                    });
                }
                (StepKind::Predict, _) => {
                    debug!("t={} skipped: {}", e.t, out.error.as_deref().unwrap_or("no usable measurements"));
                    skipped += 1;
                }
                _ => {}
            }
        }
        if inputs.is_empty() {
            continue;
        }
        let (loss, grads) = match batch_gradient(params, &inputs, dhem, pcfg.r_floor, NoisePath::Live, None) {
            Ok(v) => v,
            Err(e) => {
                warn!("training epoch {epoch_index} batch {bi} skipped: {e}");
                skipped += inputs.len();
                continue;
            }
        };
        let flat_g = grads.to_flat();
        if !loss.is_finite() || flat_g.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::DivergedLoss {
                epoch: epoch_index,
                batch: bi,
                params: Box::new(params.clone()),
            });
        }
        let mut flat = params.to_flat();
        adam.step(&mut flat, &flat_g, lr);
        *params = NetParams::from_flat(&flat);
        loss_sum += loss;
        batches += 1;
    }
    if batches == 0 {
        return Err(TrainError::NoUpdates);
    }
    Ok((loss_sum / batches as f64, skipped))
}

/// Full training run with per-epoch validation and best-parameter selection.
pub fn train(
    train_set: &[PreparedEpoch],
    val_set: &[PreparedEpoch],
    init: NetParams,
    pcfg: &PipelineConfig,
    tcfg: &TrainConfig,
    dhem: &DhemConfig,
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate().map_err(TrainError::Config)?;
    dhem.validate().map_err(TrainError::Config)?;
    if let Some(e) = train_set.iter().find(|e| e.usable() && e.truth.is_none()) {
        return Err(TrainError::NoGroundTruth(e.t));
    }
    let mut params = init;
    let mut adam = Adam::new(params.len(), tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
    let mut report = TrainReport {
        mean_loss: Vec::new(),
        val_rmse_3d: Vec::new(),
        lr: Vec::new(),
        skipped: Vec::new(),
        wall_time_s: Vec::new(),
        best_epoch: 0,
        best_val_rmse_3d: f64::INFINITY,
        dhem: *dhem,
        config: tcfg.clone(),
    };
    let mut best = params.clone();
    for ep in 0..tcfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(ep, tcfg);
        let (loss, skipped) = train_epoch(train_set, &mut params, &mut adam, lr, pcfg, tcfg, dhem, ep)?;
        let val = if val_set.is_empty() {
            loss
        } else {
            validation_rmse(val_set, &params, pcfg)
        };
        if val < report.best_val_rmse_3d {
            report.best_val_rmse_3d = val;
            report.best_epoch = ep;
            best = params.clone();
        }
        let wall = started.elapsed().as_secs_f64();
        info!("epoch {ep}: lr {lr:.6} loss {loss:.4} val 3D RMSE {val:.4} m ({wall:.1} s)");
        report.mean_loss.push(loss);
        report.val_rmse_3d.push(val);
        report.lr.push(lr);
        report.skipped.push(skipped);
        report.wall_time_s.push(wall);
    }
    Ok(TrainOutcome {
        best,
        last: params,
        report,
    })
}

/// Noise of the network restricted to what the loss sees, for inspection.
pub fn epoch_noise(epoch: &PreparedEpoch, params: &NetParams) -> EpochNoise {
    pipeline::network_noise(std::slice::from_ref(epoch), params, 1).remove(0)
}

/// Position error of the compensated update, evaluated numerically.
pub fn update_error(e: &LossEpoch, r: &[f64], vc: &[f64]) -> Option<f64> {
    let (post, _) = ekf::measurement_update(&e.predicted, &e.meas, r, vc).ok()?;
    Some(post.position().distance(&e.truth))
}

/// `S⁻¹(v + v_c)` position increment written out with an explicit inverse.
pub fn reference_increment(e: &LossEpoch, r: &[f64], vc: &[f64]) -> Option<nalgebra::Vector3<f64>> {
    let (h, v) = ekf::linearize(&e.predicted.x, &e.meas);
    let pm = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, e.predicted.p.as_slice());
    let mut s = &h * &pm * h.transpose();
    for (i, ri) in r.iter().enumerate() {
        s[(i, i)] += ri;
    }
    let sinv = s.try_inverse()?;
    let dx = &pm * h.transpose() * sinv * (v + DVector::from_column_slice(vc));
    Some(nalgebra::Vector3::new(dx[0], dx[1], dx[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{self, ScenarioConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dhem_hand_example() {
        let cfg = DhemConfig {
            lambda: 0.0,
            eps_max: 1e-300,
            ..DhemConfig::default()
        };
        let b = dhem_loss(&[[3.0, 0.0, 0.0], [0.0, 4.0, 0.0]], &cfg);
        assert!((b.w[0] - 0.01794919243112272).abs() < 1e-15);
        assert_eq!(b.w[1], 0.0);
        assert!((b.l_dhem[0] - 0.05384757729336816).abs() < 1e-15);
        assert!((b.loss - 0.03807598705460738).abs() < 1e-15);
    }

    #[test]
    fn dhem_all_zero_batch() {
        let b = dhem_loss(&[[0.0; 3]; 4], &DhemConfig::default());
        assert_eq!(b.loss, 0.0);
        assert!(b.w.iter().all(|w| *w == 1.0));
        let mut t = Tape::new();
        let d = t.leaf(DMatrix::zeros(4, 1));
        let l = dhem_loss_tape(&mut t, d, &DhemConfig::default());
        assert_eq!(t.scalar(l), 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(d).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dhem_weights_bounded_and_max_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DhemConfig::default();
        for _ in 0..200 {
            let errs: Vec<[f64; 3]> = (0..rng.gen_range(1..20))
                .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0)])
                .collect();
            let b = dhem_loss(&errs, &cfg);
            assert!(b.w.iter().all(|w| (0.0..=1.0).contains(w)));
            let (im, m) = b
                .l_base
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            let expect = (1.0 - (m / (m + cfg.eps_max)).sqrt()).powf(b.gamma_dyn[im]);
            assert_eq!(b.w[im], expect);
        }
    }

    #[test]
    fn dhem_lambda_zero_scaling() {
        let cfg = DhemConfig {
            lambda: 0.0,
            eps_max: 1e-9,
            ..DhemConfig::default()
        };
        let errs: [[f64; 3]; 3] = [[1.0, 2.0, 0.5], [0.25, 0.5, 0.125], [3.0, -1.0, 2.0]];
        let a = dhem_from_base(errs.iter().map(|e| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()).collect(), &cfg);
        // Scale by 2 with the guard scaled alongside so the ratios are exact.
        let scaled = DhemConfig {
            eps_max: 2e-9,
            ..cfg
        };
        let b = dhem_from_base(a.l_base.iter().map(|d| 2.0 * d).collect(), &scaled);
        assert_eq!(a.w, b.w);
        assert_eq!(b.loss, 2.0 * a.loss);
    }

    #[test]
    fn dhem_tape_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dynamic in [true, false] {
            // A wide guard keeps the hardest sample's weight base out of
            // cancellation so that finite differences are meaningful.
            let cfg = DhemConfig {
                dynamic_gamma: dynamic,
                eps_max: 1e-3,
                ..DhemConfig::default()
            };
            for _ in 0..50 {
                let d: Vec<f64> = (0..rng.gen_range(1..16)).map(|_| rng.gen_range(0.0..30.0)).collect();
                let mut t = Tape::new();
                let dv = t.leaf(DMatrix::from_column_slice(d.len(), 1, &d));
                let l = dhem_loss_tape(&mut t, dv, &cfg);
                let s = dhem_from_base(d.clone(), &cfg);
                assert!((t.scalar(l) - s.loss).abs() <= 1e-12 * s.loss.max(1.0));
                let g = t.backward(l).unwrap();
                let g = g.wrt(dv).unwrap();
                for i in 0..d.len() {
                    let h = 1e-6;
                    let mut up = d.clone();
                    up[i] += h;
                    let mut dn = d.clone();
                    dn[i] -= h;
                    let fd = (dhem_from_base(up, &cfg).loss - dhem_from_base(dn, &cfg).loss) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
                }
            }
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn cosine_schedule_points() {
        let c = cfg();
        assert_eq!(cosine_lr(0, &c), 0.001);
        assert_eq!(cosine_lr(50, &c), 0.001);
        assert!((cosine_lr(25, &c) - 0.00055).abs() < 1e-18);
        assert!((cosine_lr(49, &c) - c.eta_min) < 1e-5);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut a = Adam::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 3.5];
        a.step(&mut p, &[0.0; 3], 0.1);
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn adam_first_step_bounded_by_lr() {
        for g in [1e-12, 1e-3, 1.0, 1e6, -7.0] {
            let mut a = Adam::new(1, 0.9, 0.999, 1e-8);
            let mut p = vec![0.0];
            a.step(&mut p, &[g], 0.01);
            assert!(p[0].abs() <= 0.01 * (1.0 + 1e-12));
            assert!(p[0] * g <= 0.0);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f = (x-1)² + 10 (y+2)². Adam's step is invariant to the problem
        // scale and its momentum bounds the per-step contraction by about
        // sqrt(β1), so the start sits a few 1e-4 from the minimizer.
        let mut a = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0 - 2e-4, -2.0 + 1.5e-4];
        for k in 0..100 {
            let g = [2.0 * (p[0] - 1.0), 20.0 * (p[1] + 2.0)];
            a.step(&mut p, &g, 8e-5 * 0.97f64.powi(k));
        }
        assert!((p[0] - 1.0).abs() < 1e-6 && (p[1] + 2.0).abs() < 1e-6, "{p:?}");
    }

    fn micro_inputs(seed: u64) -> (Vec<PreparedEpoch>, PipelineConfig) {
        let mut sc = ScenarioConfig {
            seed,
            duration_s: 24.0,
            ..ScenarioConfig::default()
        };
        sc.constellation.gps = 5;
        sc.constellation.bds = 2;
        sc.constellation.gal = 0;
        sc.constellation.glo = 0;
        let s = sim::generate(&sc).unwrap();
        let pc = PipelineConfig::default();
        (pipeline::prepare(&s.records, None, &pc), pc)
    }

    fn loss_epochs(prepared: &[PreparedEpoch], params: &NetParams, pc: &PipelineConfig) -> Vec<LossEpoch> {
        let noise = pipeline::network_noise(prepared, params, 8);
        let mut runner = FilterRunner::new(pc);
        let mut out = Vec::new();
        for (e, n) in prepared.iter().zip(&noise) {
            let o = runner.step(e, n);
            if let (StepKind::Update, Some(p)) = (o.kind, o.predicted) {
                out.push(LossEpoch {
                    predicted: p,
                    meas: e.meas.clone(),
                    rows: e.features.as_ref().unwrap().rows.clone(),
                    truth: e.truth.unwrap(),
                });
            }
        }
        out
    }

    #[test]
    fn tape_update_matches_filter_update() {
        let (prepared, pc) = micro_inputs(11);
        let params = NetParams::init(3);
        let inputs = loss_epochs(&prepared, &params, &pc);
        let mut t = Tape::new();
        let p = params.on_tape(&mut t);
        let (_, norms) = batch_loss(&mut t, &p, &inputs, &DhemConfig::default(), pc.r_floor, NoisePath::Live).unwrap();
        for (e, d) in inputs.iter().zip(&norms) {
            let feats = crate::features::EpochFeatures {
                sats: Vec::new(),
                rows: e.rows.clone(),
                source_index: Vec::new(),
                dropped: Vec::new(),
            };
            let (r, vc) = net::forward_epochs(&[&feats], &params).remove(0);
            let r: Vec<f64> = r.iter().map(|v| v.max(pc.r_floor)).collect();
            let numeric = update_error(e, &r, &vc).unwrap();
            assert!((numeric - d).abs() < 1e-8, "{numeric} vs {d}");
            let inc = reference_increment(e, &r, &vc).unwrap();
            let explicit = (e.predicted.position().vec() + inc - e.truth.vec()).norm();
            assert!((explicit - d).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_noise_path_has_zero_gradients() {
        let (prepared, pc) = micro_inputs(12);
        let params = NetParams::init(4);
        let inputs = loss_epochs(&prepared, &params, &pc);
        let (loss, g) = batch_gradient(&params, &inputs, &DhemConfig::default(), pc.r_floor, NoisePath::Frozen, None).unwrap();
        assert!(loss > 0.0);
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
        let (_, g) = batch_gradient(&params, &inputs, &DhemConfig::default(), pc.r_floor, NoisePath::Live, None).unwrap();
        assert!(g.to_flat().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (prepared, pc) = micro_inputs(13);
        let mut tc = cfg();
        tc.lr0 = 0.0;
        tc.eta_min = 0.0;
        tc.epochs = 1;
        let init = NetParams::init(5);
        let out = train(&prepared, &[], init.clone(), &pc, &tc, &DhemConfig::default()).unwrap();
        assert_eq!(out.last.to_flat(), init.to_flat());
    }

    #[test]
    fn training_is_deterministic() {
        let (prepared, pc) = micro_inputs(14);
        let (tr, va) = split_train_validation(prepared, 0.25);
        let mut tc = cfg();
        tc.epochs = 2;
        let a = train(&tr, &va, NetParams::init(6), &pc, &tc, &DhemConfig::default()).unwrap();
        let b = train(&tr, &va, NetParams::init(6), &pc, &tc, &DhemConfig::default()).unwrap();
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        assert_eq!(a.best.to_text(), b.best.to_text());
        assert_eq!(a.report.mean_loss.len(), 2);
    }

    #[test]
    fn missing_truth_rejected() {
        let (mut prepared, pc) = micro_inputs(15);
        prepared[3].truth = None;
        let r = train(&prepared, &[], NetParams::init(1), &pc, &cfg(), &DhemConfig::default());
        assert!(matches!(r, Err(TrainError::NoGroundTruth(_))));
    }
}
