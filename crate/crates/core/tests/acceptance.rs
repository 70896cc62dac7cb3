//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lfgnss::coarse::{self, QcConfig};
use lfgnss::config::RunConfig;
use lfgnss::ekf::{InitConfig, ProcessNoiseConfig, STATE_DIM};
use lfgnss::eval;
use lfgnss::features::{compute_dop, compute_dpc_all, DpcFlag};
use lfgnss::frames::EcefPos;
use lfgnss::gradcheck::{self, GradcheckConfig};
use lfgnss::ingest::{self, DataSource, DatasetManifest};
use lfgnss::models::CorrectionConfig;
use lfgnss::net::tape::Tape;
use lfgnss::net::NetParams;
use lfgnss::pipeline::{self, ElevationModel, FilterRunner, PipelineConfig, PreparedEpoch};
use lfgnss::sim::{self, ScenarioConfig, TrajectorySpec};
use lfgnss::train::{self, cosine_lr, dhem_loss, dhem_loss_tape, Adam, DhemConfig, TrainConfig};
use lfgnss::workflow;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn gradient_integrity() -> Outcome {
    let started = Instant::now();
    let r = gradcheck::run(&GradcheckConfig::default()).expect("gradcheck runs");
    let secs = started.elapsed().as_secs_f64();
    outcome(
        r.passed && r.max_rel_error < 1e-4 && secs < 30.0,
        format!(
            "{} parameters, step {}, max relative error {:.2e} at {} (< 1e-4), {:.1} s (< 30 s)",
            r.parameters,
            gradcheck::DEFAULT_STEP,
            r.max_rel_error,
            r.worst,
            secs
        ),
    )
}

// ---------------------------------------------------------------- 2

fn ils_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_pos, mut worst_clock, mut worst_isb) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    let mut solved = 0;
    for i in 0..100 {
        let mut cfg = ScenarioConfig {
            seed: 10_000 + i,
            duration_s: 1.0,
            ..ScenarioConfig::default()
        };
        cfg.errors = cfg.errors.zeroed();
        cfg.trajectory = TrajectorySpec::static_at(rng.gen_range(-70.0..70.0), rng.gen_range(-180.0..180.0), rng.gen_range(-50.0..2000.0));
        let s = sim::generate(&cfg).expect("scenario");
        let rec = &s.records[0];
        let truth = &s.truth.epochs[0];
        let fix = match coarse::solve_epoch(rec, None, &coarse::default_start(), &QcConfig::default(), &CorrectionConfig::default()) {
            Ok(f) => f,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let systems: std::collections::BTreeSet<_> = fix.epoch.observations.iter().map(|o| o.system).collect();
        if fix.epoch.observations.len() < 6 || systems.len() < 4 {
            failures += 1;
            continue;
        }
        solved += 1;
        let sol = &fix.solution;
        worst_pos = worst_pos.max(sol.rx_pos.distance(&truth.position));
        worst_clock = worst_clock.max((sol.clock_bias - truth.clock_bias_m).abs());
        for k in 0..3 {
            worst_isb = worst_isb.max((sol.isb[k] - truth.isb_m[k]).abs());
        }
    }
    outcome(
        failures == 0 && worst_pos < 1e-6 && worst_clock < 1e-6 && worst_isb < 1e-6,
        format!(
            "{solved}/100 geometries solved with >= 6 satellites of 4 systems; max error position {worst_pos:.1e} m, clock {worst_clock:.1e} m, ISB {worst_isb:.1e} m (< 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Double-double arithmetic for the DPC oracle.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    fn new(a: f64) -> Self {
        Dd(a, 0.0)
    }
    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd(s, (a - (s - bb)) + (b - bb))
    }
    fn norm(s: f64, e: f64) -> Dd {
        let t = s + e;
        Dd(t, e - (t - s))
    }
    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.0, o.0);
        let t = Dd::two_sum(self.1, o.1);
        let s = Dd::norm(s.0, s.1 + t.0);
        Dd::norm(s.0, s.1 + t.1)
    }
    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }
    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p);
        Dd::norm(p, e + self.0 * o.1 + self.1 * o.0)
    }
    fn div(self, o: Dd) -> Dd {
        let q1 = self.0 / o.0;
        let r = self.add(o.mul(Dd::new(q1)).neg());
        let q2 = r.0 / o.0;
        let r = r.add(o.mul(Dd::new(q2)).neg());
        let q3 = r.0 / o.0;
        Dd::norm(q1, q2).add(Dd::new(q3))
    }
}

/// GDOP from scratch: rebuild the normal matrix of the kept rows in
/// double-double and take trace(N⁻¹) = trace(adj N) / det N by cofactors.
fn naive_gdop(elas: &[f64], azas: &[f64], skip: Option<usize>) -> f64 {
    let mut n = [[Dd::new(0.0); 4]; 4];
    for i in (0..elas.len()).filter(|&i| Some(i) != skip) {
        let h = [elas[i].cos() * azas[i].sin(), elas[i].cos() * azas[i].cos(), elas[i].sin(), 1.0];
        for r in 0..4 {
            for c in 0..4 {
                n[r][c] = n[r][c].add(Dd::new(h[r]).mul(Dd::new(h[c])));
            }
        }
    }
    let det3 = |rows: [usize; 3], cols: [usize; 3]| {
        let e = |i: usize, j: usize| n[rows[i]][cols[j]];
        let a = e(1, 1).mul(e(2, 2)).add(e(1, 2).mul(e(2, 1)).neg());
        let b = e(1, 0).mul(e(2, 2)).add(e(1, 2).mul(e(2, 0)).neg());
        let c = e(1, 0).mul(e(2, 1)).add(e(1, 1).mul(e(2, 0)).neg());
        e(0, 0).mul(a).add(e(0, 1).mul(b).neg()).add(e(0, 2).mul(c))
    };
    let others = |k: usize| -> [usize; 3] {
        let v: Vec<usize> = (0..4).filter(|&j| j != k).collect();
        [v[0], v[1], v[2]]
    };
    let mut det = Dd::new(0.0);
    for c in 0..4 {
        let term = n[0][c].mul(det3(others(0), others(c)));
        det = if c % 2 == 0 { det.add(term) } else { det.add(term.neg()) };
    }
    let mut adj_trace = Dd::new(0.0);
    for k in 0..4 {
        adj_trace = adj_trace.add(det3(others(k), others(k)));
    }
    let tr = adj_trace.div(det);
    if det.0 <= 0.0 || tr.0 <= 0.0 {
        return f64::INFINITY;
    }
    // one Newton step on the f64 root recovers full precision
    let r = tr.0.sqrt();
    let corr = tr.add(Dd::new(r).mul(Dd::new(r)).neg()).0 / (2.0 * r);
    r + corr
}

fn dpc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut geometries, mut compared, mut singular, mut worst) = (0, 0, 0, 0.0f64);
    let mut rejected = 0;
    while geometries < 500 {
        let n = rng.gen_range(5..=20);
        let elas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..std::f64::consts::FRAC_PI_2)).collect();
        let azas: Vec<f64> = (0..n).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
        if compute_dop(&elas, &azas).is_err() {
            rejected += 1;
            continue;
        }
        geometries += 1;
        let full = naive_gdop(&elas, &azas, None);
        for (i, (d, flag)) in compute_dpc_all(&elas, &azas).unwrap().into_iter().enumerate() {
            match flag {
                DpcFlag::Ok => {
                    compared += 1;
                    worst = worst.max((d - (full - naive_gdop(&elas, &azas, Some(i)))).abs());
                }
                _ => singular += 1,
            }
        }
    }
    outcome(
        worst < 1e-9,
        format!(
            "{geometries} geometries with N in [5, 20], {compared} leave-one-out deltas, max |error| {worst:.1e} (< 1e-9); {singular} flagged singular, {rejected} singular full geometries redrawn"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Spacing of f64 values between 2^22 and 2^23 m, where ECEF coordinates lie.
const ECEF_ULP: f64 = 9.313225746154785e-10;

struct Textbook {
    x: DVector<f64>,
    p: DMatrix<f64>,
    t: f64,
}

/// Straightforward EKF written from the model equations: explicit inverse
/// of S and Joseph covariance update.
fn textbook_step(kf: Option<Textbook>, e: &PreparedEpoch, init: &InitConfig, q: &ProcessNoiseConfig, model: &ElevationModel) -> Option<Textbook> {
    let Some(mut kf) = kf else {
        let fix = e.fix.as_ref()?;
        let s = &fix.solution;
        let mut x = DVector::zeros(STATE_DIM);
        x[0] = s.rx_pos.x;
        x[1] = s.rx_pos.y;
        x[2] = s.rx_pos.z;
        x[6] = s.clock_bias;
        for k in 0..3 {
            x[8 + k] = s.isb[k];
        }
        let sp = init.sigma_p0 * init.sigma_p0;
        let sv = init.sigma_v0 * init.sigma_v0;
        let si = init.sigma_isb0 * init.sigma_isb0;
        let d = [sp, sp, sp, sv, sv, sv, init.sigma_cb0 * init.sigma_cb0, init.sigma_cd0 * init.sigma_cd0, si, si, si];
        return Some(Textbook {
            x,
            p: DMatrix::from_diagonal(&DVector::from_row_slice(&d)),
            t: e.t,
        });
    };
    let dt = e.t - kf.t;
    let mut f = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM);
    for k in 0..3 {
        f[(k, 3 + k)] = dt;
    }
    f[(6, 7)] = dt;
    let mut qm = DMatrix::<f64>::zeros(STATE_DIM, STATE_DIM);
    for (a, b, psd) in [(0, 3, q.velocity_psd), (1, 4, q.velocity_psd), (2, 5, q.velocity_psd), (6, 7, q.clock_drift_psd)] {
        qm[(a, a)] = psd * dt.powi(3) / 3.0;
        qm[(a, b)] = psd * dt * dt / 2.0;
        qm[(b, a)] = psd * dt * dt / 2.0;
        qm[(b, b)] = psd * dt;
    }
    for k in 8..11 {
        qm[(k, k)] = q.isb_psd * dt;
    }
    kf.x = &f * &kf.x;
    kf.p = &f * &kf.p * f.transpose() + qm;
    kf.t = e.t;
    if !e.usable() {
        return Some(kf);
    }
    let n = e.meas.len();
    let mut h = DMatrix::<f64>::zeros(n, STATE_DIM);
    let mut v = DVector::<f64>::zeros(n);
    let mut r = DMatrix::<f64>::zeros(n, n);
    for (i, m) in e.meas.iter().enumerate() {
        let dx = m.sat_pos.x - kf.x[0];
        let dy = m.sat_pos.y - kf.x[1];
        let dz = m.sat_pos.z - kf.x[2];
        let rho = (dx * dx + dy * dy + dz * dz).sqrt();
        h[(i, 0)] = -dx / rho;
        h[(i, 1)] = -dy / rho;
        h[(i, 2)] = -dz / rho;
        h[(i, 6)] = 1.0;
        let isb = match m.system.isb_index() {
            Some(k) => {
                h[(i, 8 + k)] = 1.0;
                kf.x[8 + k]
            }
            None => 0.0,
        };
        v[i] = m.range - (rho + kf.x[6] + isb);
        let s = model.a + model.b / e.elevations[i].max(1f64.to_radians()).sin();
        r[(i, i)] = s * s;
    }
    let s = &h * &kf.p * h.transpose() + &r;
    let k = &kf.p * h.transpose() * s.try_inverse().expect("S invertible");
    kf.x += &k * v;
    let a = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM) - &k * &h;
    kf.p = &a * &kf.p * a.transpose() + &k * r * k.transpose();
    Some(kf)
}

fn filter_equivalence() -> Outcome {
    let pcfg = PipelineConfig::default();
    let s = sim::generate(&ScenarioConfig {
        seed: 4,
        duration_s: 200.0,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let prepared = pipeline::prepare(&s.records, None, &pcfg);
    let noise = pipeline::elevation_noise(&prepared, &pcfg.elevation);
    let lf = pipeline::run_filter(&prepared, &noise, &pcfg);
    // Each step starts the oracle from the filter's previous state, so the
    // comparison measures one propagate/update at a time. The free-running
    // oracle is also reported: it drifts by a few ulps of the ECEF coordinates
    // because 1-ulp position differences feed back through the innovations.
    let mut free: Option<Textbook> = None;
    let mut prev: Option<Textbook> = None;
    let (mut worst_x, mut worst_p, mut drift, mut compared) = (0.0f64, 0.0f64, 0.0f64, 0);
    for (e, (_, state)) in prepared.iter().zip(&lf) {
        free = textbook_step(free, e, &pcfg.init, &pcfg.process, &pcfg.elevation);
        let step = textbook_step(prev.take(), e, &pcfg.init, &pcfg.process, &pcfg.elevation);
        if let (Some(a), Some(f), Some(b)) = (&step, &free, state) {
            compared += 1;
            for i in 0..STATE_DIM {
                worst_x = worst_x.max((a.x[i] - b.x[i]).abs());
                drift = drift.max((f.x[i] - b.x[i]).abs());
                for j in 0..STATE_DIM {
                    worst_p = worst_p.max((a.p[(i, j)] - b.p[(i, j)]).abs() / (1.0 + b.p[(i, j)].abs()));
                }
            }
        }
        prev = state.as_ref().map(|b| Textbook {
            x: DVector::from_column_slice(b.x.as_slice()),
            p: DMatrix::from_column_slice(STATE_DIM, STATE_DIM, b.p.as_slice()),
            t: b.t,
        });
    }

    let long = sim::generate(&ScenarioConfig {
        seed: 5,
        duration_s: 10_001.0,
        ..ScenarioConfig::default()
    })
    .unwrap();
    let prepared = pipeline::prepare(&long.records, None, &pcfg);
    let noise = pipeline::elevation_noise(&prepared, &pcfg.elevation);
    let mut runner = FilterRunner::new(&pcfg);
    let (mut asym, mut min_eig, mut cycles) = (0.0f64, f64::INFINITY, 0usize);
    for (e, n) in prepared.iter().zip(&noise) {
        let out = runner.step(e, n);
        if out.kind == pipeline::StepKind::Update {
            cycles += 1;
        }
        if let Some(st) = &runner.state {
            asym = asym.max((st.p - st.p.transpose()).abs().max());
            let sym = DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| 0.5 * (st.p[(i, j)] + st.p[(j, i)]));
            min_eig = min_eig.min(SymmetricEigen::new(sym).eigenvalues.min());
        }
    }
    outcome(
        compared == 200 && worst_x < 1e-9 && asym < 1e-9 && min_eig > -1e-9 && cycles >= 10_000,
        format!(
            "{compared} epochs: max per-step state difference {worst_x:.1e} (< 1e-9), max relative P difference {worst_p:.1e}, free-running drift {drift:.1e} ({:.0} ulp of 6.4e6 m); {cycles} propagate/update cycles: max asymmetry {asym:.1e} (< 1e-9), min eigenvalue {min_eig:.2e} (> -1e-9)",
            drift / ECEF_ULP
        ),
    )
}

// ---------------------------------------------------------------- 5

fn straight_line_dhem(errors: &[[f64; 3]], c: &DhemConfig) -> (f64, Vec<f64>) {
    let mut base = Vec::new();
    for e in errors {
        base.push((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt());
    }
    let mut max = base[0];
    for &b in &base {
        if b > max {
            max = b;
        }
    }
    let mut sum = 0.0;
    let mut ws = Vec::new();
    for &b in &base {
        let gamma = if c.dynamic_gamma { c.gamma * (-c.lambda * b).exp() } else { c.gamma };
        let w = (1.0 - (b / (max + c.eps_max)).sqrt()).powf(gamma);
        let l = c.alpha * w * b;
        sum += l * l;
        ws.push(w);
    }
    ((sum / base.len() as f64).sqrt(), ws)
}

fn dhem_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let cfg = DhemConfig {
            alpha: rng.gen_range(0.2..3.0),
            gamma: rng.gen_range(0.0..4.0),
            lambda: rng.gen_range(0.0..0.5),
            dynamic_gamma: rng.gen(),
            ..DhemConfig::default()
        };
        let n = rng.gen_range(1..=32);
        let errs: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-30.0..30.0))).collect();
        let (expect, ws) = straight_line_dhem(&errs, &cfg);
        let got = dhem_loss(&errs, &cfg);
        let mut t = Tape::new();
        let d: Vec<f64> = got.l_base.clone();
        let dv = t.leaf(DMatrix::from_column_slice(n, 1, &d));
        let tape = dhem_loss_tape(&mut t, dv, &cfg);
        worst = worst.max((got.loss - expect).abs()).max((t.scalar(tape) - expect).abs());
        for (a, b) in got.w.iter().zip(&ws) {
            worst = worst.max((a - b).abs());
        }
    }
    // λ = 0: power-of-two scale factors are exact in binary, so w must be
    // bit-identical and the loss exactly c times larger
    let mut exact = true;
    for c in [0.25, 0.5, 2.0, 8.0] {
        for _ in 0..50 {
            let cfg = DhemConfig {
                lambda: 0.0,
                gamma: rng.gen_range(0.0..4.0),
                ..DhemConfig::default()
            };
            let errs: Vec<[f64; 3]> = (0..rng.gen_range(1..=16)).map(|_| [0; 3].map(|_| rng.gen_range(-30.0..30.0))).collect();
            let scaled: Vec<[f64; 3]> = errs.iter().map(|e| e.map(|v| v * c)).collect();
            let a = dhem_loss(&errs, &cfg);
            let b = dhem_loss(
                &scaled,
                &DhemConfig {
                    eps_max: cfg.eps_max * c,
                    ..cfg
                },
            );
            exact &= a.w == b.w && b.loss == c * a.loss;
        }
    }
    outcome(
        worst < 1e-12 && exact,
        format!("500 random batches: max deviation from the scalar chain {worst:.1e} (< 1e-12); lambda = 0 scaling exact: {exact}"),
    )
}

// ---------------------------------------------------------------- 6

struct SeedResult {
    seed: u64,
    ekf: f64,
    lf: f64,
    nlos_fraction: f64,
}

fn learning_seed(seed: u64) -> SeedResult {
    let pcfg = PipelineConfig::default();
    let make = |seed: u64, secs: f64| {
        sim::generate(&ScenarioConfig {
            seed,
            duration_s: secs,
            ..ScenarioConfig::default()
        })
        .unwrap()
    };
    let train_s = make(1000 + seed, 3000.0);
    let test_s = make(2000 + seed, 1000.0);
    let sats: usize = train_s.truth.epochs.iter().map(|e| e.sats.len()).sum();
    let nlos_fraction = train_s.truth.nlos_count() as f64 / sats as f64;
    let prepared = pipeline::prepare(&train_s.records, None, &pcfg);
    let (tr, val) = train::split_train_validation(prepared, 0.2);
    let tcfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let out = train::train(&tr, &val, NetParams::init(seed), &pcfg, &tcfg, &DhemConfig::default()).expect("training");
    let test = pipeline::prepare(&test_s.records, None, &pcfg);
    let truth: Vec<Option<EcefPos>> = test.iter().map(|e| e.truth).collect();
    let ekf = eval::evaluate("ekf", &pipeline::run_baseline_ekf(&test, &pcfg), &truth).unwrap().1;
    let lf = eval::evaluate("lf", &pipeline::run_lf(&test, &out.best, &pcfg), &truth).unwrap().1;
    SeedResult {
        seed,
        ekf: ekf.rmse_3d,
        lf: lf.rmse_3d,
        nlos_fraction,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn learning_effect() -> Outcome {
    let started = Instant::now();
    let results: Vec<SeedResult> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64).map(|seed| s.spawn(move || learning_seed(seed))).collect();
        handles.into_iter().map(|h| h.join().expect("seed thread")).collect()
    });
    let secs = started.elapsed().as_secs_f64();
    let ekf = median(results.iter().map(|r| r.ekf).collect());
    let lf = median(results.iter().map(|r| r.lf).collect());
    let improvement = 1.0 - lf / ekf;
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| format!("seed {}: ekf {:.2} lf {:.2} nlos {:.2}", r.seed, r.ekf, r.lf, r.nlos_fraction))
        .collect();
    outcome(
        improvement >= 0.15 && secs < 1800.0,
        format!(
            "median 3D RMSE ekf {ekf:.2} m, lf {lf:.2} m, improvement {:.1}% (>= 15%), {secs:.0} s (< 1800 s); {}",
            improvement * 100.0,
            per_seed.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn schedule_and_optimizer() -> Outcome {
    let cfg = TrainConfig::default();
    let formula = |e: usize| {
        let phase = (e % 50) as f64 / 50.0;
        1e-4 + 0.5 * (1e-3 - 1e-4) * (1.0 + (std::f64::consts::PI * phase).cos())
    };
    let points = [(0, 0.001), (25, 0.00055), (50, 0.001)];
    let mut ok = true;
    let mut shown = Vec::new();
    for (e, expect) in points {
        let lr = cosine_lr(e, &cfg);
        ok &= lr == formula(e) && (lr - expect).abs() < 1e-15;
        shown.push(format!("lr({e}) = {lr}"));
    }
    // f = (x-1)² + 10 (y+2)²
    let mut adam = Adam::new(2, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut p = vec![1.0 - 2e-4, -2.0 + 1.5e-4];
    for k in 0..100 {
        let g = [2.0 * (p[0] - 1.0), 20.0 * (p[1] + 2.0)];
        adam.step(&mut p, &g, 8e-5 * 0.97f64.powi(k));
    }
    let dist = ((p[0] - 1.0).powi(2) + (p[1] + 2.0).powi(2)).sqrt();
    outcome(
        ok && dist < 1e-6,
        format!("{}; Adam 100 steps on a 2-D quadratic ends {dist:.1e} from the minimizer (< 1e-6)", shown.join(", ")),
    )
}

// ---------------------------------------------------------------- 8

fn random_dataset(rng: &mut ChaCha8Rng) -> (DatasetManifest, Vec<ingest::EpochRecord>) {
    let mut cfg = ScenarioConfig {
        seed: rng.gen(),
        duration_s: rng.gen_range(1..=15) as f64,
        rate_hz: if rng.gen_bool(0.2) { 10 } else { 1 },
        start_time: rng.gen_range(0.0..604_800.0),
        ..ScenarioConfig::default()
    };
    cfg.constellation.gps = rng.gen_range(0..=8);
    cfg.constellation.bds = rng.gen_range(0..=5);
    cfg.constellation.gal = rng.gen_range(0..=5);
    cfg.constellation.glo = rng.gen_range(1..=4);
    cfg.errors.troposphere = rng.gen();
    cfg.errors.ionosphere = rng.gen();
    let mut records = sim::generate(&cfg).unwrap().records;
    for r in records.iter_mut() {
        if rng.gen_bool(0.3) {
            r.truth = None;
            r.truth_clock = None;
        }
    }
    let manifest = DatasetManifest::for_records(&format!("random-{}", cfg.seed), &records, DataSource::Simulated, Some(cfg.seed));
    (manifest, records)
}

fn ingest_robustness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut identical = 0;
    for _ in 0..100 {
        let (m, recs) = random_dataset(&mut rng);
        let bytes = ingest::encode_dataset(&m, &recs);
        if let Ok((m2, r2)) = ingest::parse_dataset_bytes(&bytes) {
            if m2 == m && r2 == recs && ingest::encode_dataset(&m2, &r2) == bytes {
                identical += 1;
            }
        }
    }

    let mut corpus = vec![std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/two_epochs.jsonl")).unwrap()];
    let (m, recs) = random_dataset(&mut rng);
    corpus.push(ingest::encode_dataset(&m, &recs[..recs.len().min(3)]));
    let prev_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let (mut crashes, mut errors, mut accepted) = (0, 0, 0);
    for i in 0..10_000 {
        let mut bytes = corpus[i % corpus.len()].clone();
        let pos = rng.gen_range(0..bytes.len());
        let old = bytes[pos];
        bytes[pos] = loop {
            let b: u8 = rng.gen();
            if b != old {
                break b;
            }
        };
        match panic::catch_unwind(AssertUnwindSafe(|| ingest::parse_dataset_bytes(&bytes))) {
            Err(_) => crashes += 1,
            Ok(Err(e)) => {
                errors += 1;
                if e.to_string().is_empty() {
                    crashes += 1;
                }
            }
            Ok(Ok(_)) => accepted += 1,
        }
    }
    panic::set_hook(prev_hook);
    outcome(
        identical == 100 && crashes == 0,
        format!(
            "parse(emit(d)) == d on {identical}/100 random datasets; 10000 single-byte mutations: {crashes} crashes, {errors} structured errors, {accepted} still valid"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn full_run(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = RunConfig::default();
    cfg.set_seed(9);
    cfg.scenario.duration_s = 300.0;
    cfg.train.epochs = 5;
    let data = dir.join("data");
    workflow::simulate(&cfg, &data).unwrap();
    let records = workflow::load_records(&data).unwrap();
    let model = dir.join("model.txt");
    let report = dir.join(workflow::TRAIN_REPORT_FILE);
    let trained = workflow::train_model(&cfg, &records, &model, &report).unwrap();
    let runs = workflow::run_methods(&cfg, &records, Some(&trained.params));
    let sol = dir.join(workflow::SOLUTIONS_FILE);
    workflow::write_solutions(&runs, &sol).unwrap();
    workflow::evaluate(&records, &workflow::read_solutions(&sol).unwrap(), dir).unwrap();
    let files = [
        "data/dataset.jsonl",
        "data/truth.jsonl",
        "model.txt",
        workflow::TRAIN_REPORT_FILE,
        workflow::SOLUTIONS_FILE,
        workflow::REPORT_FILE,
        workflow::CDF_FILE,
    ];
    files.iter().map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap())).collect()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_run(a.path());
    let rb = full_run(b.path());
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    outcome(
        differing.is_empty(),
        format!(
            "two simulate -> train -> run -> eval runs (seed 9, 300 epochs, 5 training epochs): {} of {} files byte-identical{}",
            ra.len() - differing.len(),
            ra.len(),
            if differing.is_empty() { String::new() } else { format!(", differing: {}", differing.join(", ")) }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient integrity", gradient_integrity),
        ("ILS exactness", ils_exactness),
        ("DPC oracle equivalence", dpc_oracle),
        ("filter equivalence", filter_equivalence),
        ("DHEM formula fidelity", dhem_fidelity),
        ("learning effect", learning_effect),
        ("schedule and optimizer", schedule_and_optimizer),
        ("ingest robustness", ingest_robustness),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let started = Instant::now();
        let o = f();
        println!(
            "criterion {} {name}: {} ({:.1} s) {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
