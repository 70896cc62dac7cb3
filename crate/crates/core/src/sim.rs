//! Synthetic urban scenarios: satellites on a kinematic shell, a waypoint
//! trajectory and a per-term pseudorange error budget with labeled NLOS.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{self, EcefPos, EnuVec, GeodeticPos, SPEED_OF_LIGHT};
use crate::ingest::{self, DataSource, DatasetManifest, EpochRecord, IngestError};
use crate::models::{self, CorrectionConfig, SatObservation, System};

pub const TRUTH_FORMAT: &str = "lfgnss-truth";
pub const TRUTH_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

const NOISE_FLOOR_ELEVATION: f64 = 5.0 * PI / 180.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstellationSpec {
    pub gps: usize,
    pub bds: usize,
    pub gal: usize,
    pub glo: usize,
    pub shell_radius_m: f64,
    /// Satellites wander between these elevations (degrees).
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Elevation mask the receiver is expected to apply (degrees).
    pub mask_deg: f64,
    /// Largest az/el drift rate (deg/s).
    pub max_rate_deg_s: f64,
    /// Random-walk step of the drift rate (deg/s per sqrt(s)).
    pub rate_noise_deg_s: f64,
}

impl Default for ConstellationSpec {
    fn default() -> Self {
        Self {
            gps: 6,
            bds: 4,
            gal: 4,
            glo: 3,
            shell_radius_m: 26_560_000.0,
            elevation_min_deg: 5.0,
            elevation_max_deg: 85.0,
            mask_deg: 10.0,
            max_rate_deg_s: 0.01,
            rate_noise_deg_s: 0.001,
        }
    }
}

impl ConstellationSpec {
    pub fn counts(&self) -> [(System, usize); 4] {
        [
            (System::Gps, self.gps),
            (System::Bds, self.bds),
            (System::Gal, self.gal),
            (System::Glo, self.glo),
        ]
    }

    pub fn total(&self) -> usize {
        self.gps + self.bds + self.gal + self.glo
    }

    /// Fraction of the elevation band above the mask.
    pub fn visible_fraction(&self) -> f64 {
        let span = self.elevation_max_deg - self.elevation_min_deg;
        ((self.elevation_max_deg - self.mask_deg.max(self.elevation_min_deg)) / span).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    /// `[lat_deg, lon_deg, height_m]` points visited in order.
    pub waypoints: Vec<[f64; 3]>,
    pub speed_mps: f64,
    /// Loop back to the first waypoint instead of stopping at the last.
    pub repeat: bool,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        let origin = GeodeticPos::from_degrees(22.3193, 114.1694, 10.0);
        let waypoints = [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)]
            .iter()
            .map(|&(e, n)| {
                let p = frames::enu_to_ecef(&EnuVec::new(e, n, 0.0), &origin);
                let g = frames::ecef_to_geodetic_lossy(&p).expect("surface point");
                [g.lat.to_degrees(), g.lon.to_degrees(), g.height]
            })
            .collect();
        Self {
            waypoints,
            speed_mps: 8.0,
            repeat: true,
        }
    }
}

impl TrajectorySpec {
    pub fn static_at(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self {
            waypoints: vec![[lat_deg, lon_deg, height]],
            speed_mps: 0.0,
            repeat: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlosSpec {
    /// Long-run fraction of NLOS satellite-epochs.
    pub probability: f64,
    pub bias_min_m: f64,
    pub bias_max_m: f64,
    pub snr_drop_db: f64,
    /// Mean time an NLOS/clean state persists (s); 0 redraws every epoch.
    pub mean_dwell_s: f64,
    pub low_elevation_deg: f64,
    /// NLOS odds multiplier below `low_elevation_deg` (capped at probability 1).
    pub low_elevation_factor: f64,
}

impl Default for NlosSpec {
    fn default() -> Self {
        Self {
            probability: 0.2,
            bias_min_m: 5.0,
            bias_max_m: 30.0,
            snr_drop_db: 7.0,
            mean_dwell_s: 10.0,
            low_elevation_deg: 30.0,
            low_elevation_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorBudget {
    /// Zenith pseudorange noise (m); scaled by `1/sin(el)` when elevation dependent.
    pub sigma_base_m: f64,
    pub elevation_dependent: bool,
    pub clock_bias_m: f64,
    pub clock_drift_mps: f64,
    /// BDS, GAL, GLO offsets relative to GPS (m).
    pub isb_m: [f64; 3],
    pub troposphere: bool,
    pub ionosphere: bool,
    /// Broadcast satellite clock offsets and group delays.
    pub satellite_clocks: bool,
    pub snr_noise_db: f64,
    pub nlos: NlosSpec,
}

impl Default for ErrorBudget {
    fn default() -> Self {
        Self {
            sigma_base_m: 0.5,
            elevation_dependent: true,
            clock_bias_m: 1e-3 * SPEED_OF_LIGHT,
            clock_drift_mps: 0.1,
            isb_m: [3.0, -2.0, 5.0],
            troposphere: true,
            ionosphere: true,
            satellite_clocks: true,
            snr_noise_db: 1.0,
            nlos: NlosSpec::default(),
        }
    }
}

impl ErrorBudget {
    /// No measurement errors; clock and inter-system biases are kept since
    /// they are estimated states rather than errors.
    pub fn zeroed(&self) -> Self {
        Self {
            sigma_base_m: 0.0,
            troposphere: false,
            ionosphere: false,
            satellite_clocks: false,
            snr_noise_db: 0.0,
            nlos: NlosSpec {
                probability: 0.0,
                ..self.nlos.clone()
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub rate_hz: u32,
    /// Time of the first epoch (GPS seconds).
    pub start_time: f64,
    pub constellation: ConstellationSpec,
    pub trajectory: TrajectorySpec,
    pub errors: ErrorBudget,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "urban".into(),
            seed: 1,
            duration_s: 600.0,
            rate_hz: 1,
            start_time: 388_800.0,
            constellation: ConstellationSpec::default(),
            trajectory: TrajectorySpec::default(),
            errors: ErrorBudget::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn epoch_count(&self) -> usize {
        (self.duration_s * self.rate_hz as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.rate_hz != 1 && self.rate_hz != 10 {
            return bad(format!("rate {} Hz must be 1 or 10", self.rate_hz));
        }
        if !(self.duration_s > 0.0) || self.epoch_count() == 0 {
            return bad(format!("duration {} s yields no epochs", self.duration_s));
        }
        if !self.start_time.is_finite() {
            return bad("start time must be finite".into());
        }
        let c = &self.constellation;
        if c.total() == 0 {
            return bad("no satellites configured".into());
        }
        if c.counts().iter().any(|&(_, n)| n > 99) {
            return bad("at most 99 satellites per system".into());
        }
        if !(c.shell_radius_m > 1.2 * frames::WGS84_A && c.shell_radius_m < 5e7) {
            return bad(format!("shell radius {} m out of range", c.shell_radius_m));
        }
        if !(c.elevation_min_deg >= 0.0 && c.elevation_min_deg < c.elevation_max_deg && c.elevation_max_deg < 90.0) {
            return bad("elevation band must satisfy 0 <= min < max < 90".into());
        }
        if c.elevation_max_deg <= c.mask_deg {
            return bad(format!(
                "all satellites below the {} deg mask (band tops out at {} deg)",
                c.mask_deg, c.elevation_max_deg
            ));
        }
        if !(c.max_rate_deg_s >= 0.0 && c.rate_noise_deg_s >= 0.0) {
            return bad("drift rates must be non-negative".into());
        }
        let t = &self.trajectory;
        if t.waypoints.is_empty() {
            return bad("trajectory needs at least one waypoint".into());
        }
        for w in &t.waypoints {
            let g = GeodeticPos::from_degrees(w[0], w[1], w[2]);
            if !g.is_valid() || w[2].abs() > 1e4 {
                return bad(format!("waypoint {w:?} is not a valid surface point"));
            }
        }
        if !(t.speed_mps >= 0.0 && t.speed_mps < 100.0) {
            return bad(format!("speed {} m/s out of range", t.speed_mps));
        }
        let e = &self.errors;
        if !(e.sigma_base_m >= 0.0 && e.sigma_base_m < 100.0) {
            return bad(format!("noise sigma {} m out of range", e.sigma_base_m));
        }
        if !(e.clock_bias_m.abs() < 0.5 * SPEED_OF_LIGHT * 1e-2 && e.clock_drift_mps.abs() < 1e3) {
            return bad("receiver clock truth out of range".into());
        }
        if e.isb_m.iter().any(|v| !(v.abs() < 1e4)) {
            return bad("inter-system biases out of range".into());
        }
        if !(e.snr_noise_db >= 0.0 && e.snr_noise_db < 20.0) {
            return bad("snr noise out of range".into());
        }
        let n = &e.nlos;
        if !(0.0..=1.0).contains(&n.probability) {
            return bad(format!("nlos probability {} outside [0, 1]", n.probability));
        }
        if !(n.bias_min_m > 0.0 && n.bias_min_m <= n.bias_max_m && n.bias_max_m < 1e3) {
            return bad(format!("nlos bias range [{}, {}] m invalid", n.bias_min_m, n.bias_max_m));
        }
        if !(n.snr_drop_db >= 0.0 && n.mean_dwell_s >= 0.0 && n.low_elevation_factor >= 1.0) {
            return bad("nlos drop, dwell and elevation factor must be non-negative (factor >= 1)".into());
        }
        Ok(())
    }

    /// NLOS probability above and below the low-elevation threshold, chosen
    /// so that the long-run fraction over the elevation band equals
    /// `probability`.
    pub fn nlos_probabilities(&self) -> (f64, f64) {
        let c = &self.constellation;
        let n = &self.errors.nlos;
        let span = c.elevation_max_deg - c.elevation_min_deg;
        let f_low = ((n.low_elevation_deg - c.elevation_min_deg) / span).clamp(0.0, 1.0);
        let high = n.probability / (f_low * n.low_elevation_factor + 1.0 - f_low);
        (high, (high * n.low_elevation_factor).min(1.0))
    }
}

/// Per-satellite truth for one epoch; `range` plus the listed terms is the
/// emitted pseudorange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatTruth {
    pub system: System,
    pub sat_id: u16,
    pub range: f64,
    pub elevation: f64,
    pub azimuth: f64,
    pub nlos_bias: f64,
    pub noise: f64,
    pub tropo: f64,
    pub iono: f64,
    /// `c · dt_sat` (m), subtracted from the pseudorange.
    pub sat_clock_m: f64,
    /// `c · tgd` (m), added to the pseudorange.
    pub tgd_m: f64,
}

impl SatTruth {
    pub fn is_nlos(&self) -> bool {
        self.nlos_bias > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthEpoch {
    pub t: f64,
    pub position: EcefPos,
    /// ECEF velocity (m/s).
    pub velocity: [f64; 3],
    pub clock_bias_m: f64,
    pub clock_drift_mps: f64,
    pub isb_m: [f64; 3],
    pub sats: Vec<SatTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthManifest {
    pub name: String,
    pub epoch_count: usize,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthLog {
    pub manifest: TruthManifest,
    pub epochs: Vec<TruthEpoch>,
}

impl TruthLog {
    pub fn nlos_count(&self) -> usize {
        self.epochs.iter().flat_map(|e| &e.sats).filter(|s| s.is_nlos()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub manifest: DatasetManifest,
    pub records: Vec<EpochRecord>,
    pub truth: TruthLog,
}

impl Scenario {
    pub fn dataset_bytes(&self) -> Vec<u8> {
        ingest::encode_dataset(&self.manifest, &self.records)
    }

    pub fn truth_bytes(&self) -> Vec<u8> {
        ingest::encode_lines(TRUTH_FORMAT, TRUTH_VERSION, &self.truth.manifest, &self.truth.epochs)
    }

    /// Writes `dataset.jsonl` and `truth.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        ingest::emit_dataset(&self.manifest, &self.records, &dir.join(DATASET_FILE))?;
        ingest::write_lines(
            &dir.join(TRUTH_FILE),
            TRUTH_FORMAT,
            TRUTH_VERSION,
            &self.truth.manifest,
            &self.truth.epochs,
        )?;
        Ok(())
    }
}

pub fn read_truth(path: &Path) -> Result<TruthLog, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_truth_bytes(&bytes)
}

pub fn parse_truth_bytes(bytes: &[u8]) -> Result<TruthLog, IngestError> {
    let (manifest, body): (TruthManifest, Vec<(usize, TruthEpoch)>) =
        ingest::decode_lines(bytes, TRUTH_FORMAT, TRUTH_VERSION)?;
    let epochs: Vec<TruthEpoch> = body.into_iter().map(|(_, e)| e).collect();
    if epochs.len() != manifest.epoch_count {
        return Err(IngestError::Format {
            line: 1,
            reason: format!("manifest lists {} epochs, file has {}", manifest.epoch_count, epochs.len()),
        });
    }
    Ok(TruthLog { manifest, epochs })
}

struct Track {
    origin: GeodeticPos,
    points: Vec<Vector3<f64>>,
    cumulative: Vec<f64>,
    speed: f64,
    repeat: bool,
}

impl Track {
    fn new(spec: &TrajectorySpec) -> Self {
        let origin = GeodeticPos::from_degrees(spec.waypoints[0][0], spec.waypoints[0][1], spec.waypoints[0][2]);
        let mut points: Vec<Vector3<f64>> = spec
            .waypoints
            .iter()
            .map(|w| {
                let p = frames::geodetic_to_ecef(&GeodeticPos::from_degrees(w[0], w[1], w[2]));
                frames::ecef_to_enu(&p, &origin).vec()
            })
            .collect();
        if spec.repeat && points.len() > 1 {
            points.push(points[0]);
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
        }
        Self {
            origin,
            points,
            cumulative,
            speed: spec.speed_mps,
            repeat: spec.repeat,
        }
    }

    /// ENU position and velocity after `elapsed` seconds.
    fn at(&self, elapsed: f64) -> (Vector3<f64>, Vector3<f64>) {
        let total = *self.cumulative.last().unwrap();
        if total <= 0.0 || self.speed <= 0.0 {
            return (self.points[0], Vector3::zeros());
        }
        let travelled = self.speed * elapsed;
        let s = if self.repeat { travelled.rem_euclid(total) } else { travelled.min(total) };
        let seg = match self.cumulative.iter().rposition(|&c| c <= s) {
            Some(i) if i + 1 < self.points.len() => i,
            _ => self.points.len() - 2,
        };
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let dir = if len > 0.0 {
            (self.points[seg + 1] - self.points[seg]) / len
        } else {
            Vector3::zeros()
        };
        let pos = self.points[seg] + dir * (s - self.cumulative[seg]);
        let moving = self.repeat || travelled < total;
        (pos, if moving { dir * self.speed } else { Vector3::zeros() })
    }
}

struct SatState {
    system: System,
    sat_id: u16,
    elevation: f64,
    azimuth: f64,
    el_rate: f64,
    az_rate: f64,
    sat_clock_s: f64,
    tgd_s: f64,
    nlos_bias: f64,
}

/// Independent random streams so that switching one error term leaves every
/// other draw untouched.
struct Streams {
    geometry: ChaCha8Rng,
    noise: ChaCha8Rng,
    nlos: ChaCha8Rng,
    snr: ChaCha8Rng,
    clocks: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            geometry: stream(1),
            noise: stream(2),
            nlos: stream(3),
            snr: stream(4),
            clocks: stream(5),
        }
    }
}

fn reflect(mut v: f64, lo: f64, hi: f64, rate: &mut f64) -> f64 {
    for _ in 0..4 {
        if v < lo {
            v = 2.0 * lo - v;
            *rate = rate.abs();
        } else if v > hi {
            v = 2.0 * hi - v;
            *rate = -rate.abs();
        } else {
            break;
        }
    }
    v.clamp(lo, hi)
}

/// Point on the shell seen from `origin` along `dir` (unit ECEF).
fn shell_point(origin: &Vector3<f64>, dir: &Vector3<f64>, radius: f64) -> Vector3<f64> {
    let b = origin.dot(dir);
    let s = -b + (b * b - origin.norm_squared() + radius * radius).sqrt();
    origin + dir * s
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario, SimError> {
    cfg.validate()?;
    let c = &cfg.constellation;
    let e = &cfg.errors;
    let mut rng = Streams::new(cfg.seed);
    let track = Track::new(&cfg.trajectory);
    let origin_ecef = frames::geodetic_to_ecef(&track.origin).vec();
    let r_origin = frames::enu_rotation(&track.origin).transpose();
    let el_lo = c.elevation_min_deg.to_radians();
    let el_hi = c.elevation_max_deg.to_radians();
    let max_rate = c.max_rate_deg_s.to_radians();
    let rate_noise = c.rate_noise_deg_s.to_radians();
    let corr = CorrectionConfig::default();
    let met = corr.meteo();
    let (p_high, p_low) = cfg.nlos_probabilities();
    let low_el = e.nlos.low_elevation_deg.to_radians();
    let dt = 1.0 / cfg.rate_hz as f64;
    let keep = if e.nlos.mean_dwell_s > 0.0 {
        (-dt / e.nlos.mean_dwell_s).exp()
    } else {
        0.0
    };

    let mut sats = Vec::with_capacity(c.total());
    for (system, count) in c.counts() {
        for k in 0..count {
            let g = &mut rng.geometry;
            let el = g.gen_range(el_lo..=el_hi);
            let az = g.gen_range(0.0..2.0 * PI);
            let el_rate = g.gen_range(-max_rate..=max_rate);
            let az_rate = g.gen_range(-max_rate..=max_rate);
            let clk: f64 = rng.clocks.gen_range(-1e-4..1e-4);
            let tgd: f64 = rng.clocks.gen_range(-1e-8..1e-8);
            sats.push(SatState {
                system,
                sat_id: k as u16 + 1,
                elevation: el,
                azimuth: az,
                el_rate,
                az_rate,
                sat_clock_s: if e.satellite_clocks { clk } else { 0.0 },
                tgd_s: if e.satellite_clocks { tgd } else { 0.0 },
                nlos_bias: 0.0,
            });
        }
    }

    let n_epochs = cfg.epoch_count();
    let mut records = Vec::with_capacity(n_epochs);
    let mut truth = Vec::with_capacity(n_epochs);
    for k in 0..n_epochs {
        let elapsed = k as f64 * dt;
        let t = cfg.start_time + elapsed;
        if k > 0 {
            for s in sats.iter_mut() {
                let g = &mut rng.geometry;
                let d_el: f64 = g.sample(StandardNormal);
                let d_az: f64 = g.sample(StandardNormal);
                s.el_rate = (s.el_rate + rate_noise * dt.sqrt() * d_el).clamp(-max_rate, max_rate);
                s.az_rate = (s.az_rate + rate_noise * dt.sqrt() * d_az).clamp(-max_rate, max_rate);
                s.elevation = reflect(s.elevation + s.el_rate * dt, el_lo, el_hi, &mut s.el_rate);
                s.azimuth = (s.azimuth + s.az_rate * dt).rem_euclid(2.0 * PI);
            }
        }
        let (enu, vel_enu) = track.at(elapsed);
        let rx = frames::enu_to_ecef(&EnuVec::from_vec(&enu), &track.origin);
        let rx_geo = frames::ecef_to_geodetic_lossy(&rx).map_err(|e| SimError::Config(e.to_string()))?;
        let vel = r_origin * vel_enu;
        let clock = e.clock_bias_m + e.clock_drift_mps * elapsed;

        let mut obs = Vec::with_capacity(sats.len());
        let mut sat_truth = Vec::with_capacity(sats.len());
        for s in sats.iter_mut() {
            let dir = r_origin * frames::enu_direction(s.elevation, s.azimuth);
            let sat_pos = EcefPos::from_vec(&shell_point(&origin_ecef, &dir, c.shell_radius_m));
            let look = frames::look_angles_lossy(&rx, &rx_geo, &sat_pos).map_err(|e| SimError::Config(e.to_string()))?;
            let range = rx.distance(&sat_pos);

            let u_keep: f64 = rng.nlos.gen();
            let u_state: f64 = rng.nlos.gen();
            let u_bias: f64 = rng.nlos.gen();
            if k == 0 || u_keep >= keep {
                let p = if look.elevation < low_el { p_low } else { p_high };
                s.nlos_bias = if u_state < p {
                    e.nlos.bias_min_m + (e.nlos.bias_max_m - e.nlos.bias_min_m) * u_bias
                } else {
                    0.0
                };
            }
            let z_noise: f64 = rng.noise.sample(StandardNormal);
            let z_snr: f64 = rng.snr.sample(StandardNormal);

            let sigma = if e.elevation_dependent {
                e.sigma_base_m / look.elevation.max(NOISE_FLOOR_ELEVATION).sin()
            } else {
                e.sigma_base_m
            };
            let noise = sigma * z_noise;
            let tropo = if e.troposphere {
                models::saastamoinen(&rx_geo, look.elevation, &met)
            } else {
                0.0
            };
            let iono = if e.ionosphere {
                models::klobuchar(
                    &rx_geo,
                    look.elevation,
                    look.azimuth,
                    t.rem_euclid(86_400.0),
                    &corr.klobuchar_alpha,
                    &corr.klobuchar_beta,
                )
            } else {
                0.0
            };
            let isb = s.system.isb_index().map_or(0.0, |i| e.isb_m[i]);
            let sat_clock_m = SPEED_OF_LIGHT * s.sat_clock_s;
            let tgd_m = SPEED_OF_LIGHT * s.tgd_s;
            let terms = clock + isb + tropo + iono + s.nlos_bias + noise - sat_clock_m + tgd_m;
            let nlos_flag = if s.nlos_bias > 0.0 { 1.0 } else { 0.0 };
            let snr = (50.0 - 20.0 * (1.0 - look.elevation.sin()) - e.nlos.snr_drop_db * nlos_flag
                + e.snr_noise_db * z_snr)
                .clamp(10.0, 60.0);

            obs.push(SatObservation {
                system: s.system,
                sat_id: s.sat_id,
                pseudorange: range + terms,
                snr,
                sat_pos,
                sat_clock_bias: s.sat_clock_s,
                tgd: s.tgd_s,
                iono_delay: (!e.ionosphere).then_some(0.0),
                tropo_delay: (!e.troposphere).then_some(0.0),
            });
            sat_truth.push(SatTruth {
                system: s.system,
                sat_id: s.sat_id,
                range,
                elevation: look.elevation,
                azimuth: look.azimuth,
                nlos_bias: s.nlos_bias,
                noise,
                tropo,
                iono,
                sat_clock_m,
                tgd_m,
            });
        }
        records.push(EpochRecord {
            t,
            observations: obs,
            truth: Some(rx),
            truth_clock: Some(clock / SPEED_OF_LIGHT),
        });
        truth.push(TruthEpoch {
            t,
            position: rx,
            velocity: [vel.x, vel.y, vel.z],
            clock_bias_m: clock,
            clock_drift_mps: e.clock_drift_mps,
            isb_m: e.isb_m,
            sats: sat_truth,
        });
    }

    let manifest = DatasetManifest::for_records(&cfg.name, &records, DataSource::Simulated, Some(cfg.seed));
    Ok(Scenario {
        manifest,
        records,
        truth: TruthLog {
            manifest: TruthManifest {
                name: cfg.name.clone(),
                epoch_count: n_epochs,
                config: cfg.clone(),
            },
            epochs: truth,
        },
    })
}

/// Plain-text summary of a scenario configuration.
pub fn describe(cfg: &ScenarioConfig) -> String {
    let c = &cfg.constellation;
    let e = &cfg.errors;
    let mut s = String::new();
    let _ = writeln!(s, "scenario {} (seed {})", cfg.name, cfg.seed);
    let _ = writeln!(
        s,
        "  {} epochs at {} Hz ({} s from t = {})",
        cfg.epoch_count(),
        cfg.rate_hz,
        cfg.duration_s,
        cfg.start_time
    );
    for (sys, n) in c.counts() {
        let _ = writeln!(s, "  {sys}: {n} satellites");
    }
    let _ = writeln!(
        s,
        "  expected visible above {} deg mask: {:.1} of {}",
        c.mask_deg,
        c.total() as f64 * c.visible_fraction(),
        c.total()
    );
    let _ = writeln!(
        s,
        "  trajectory: {} waypoints at {} m/s{}",
        cfg.trajectory.waypoints.len(),
        cfg.trajectory.speed_mps,
        if cfg.trajectory.repeat { ", looping" } else { "" }
    );
    let _ = writeln!(
        s,
        "  noise sigma {} m{}; troposphere {}; ionosphere {}; satellite clocks {}",
        e.sigma_base_m,
        if e.elevation_dependent { " / sin(el)" } else { "" },
        on_off(e.troposphere),
        on_off(e.ionosphere),
        on_off(e.satellite_clocks)
    );
    let _ = writeln!(
        s,
        "  receiver clock {} m + {} m/s; isb bds/gal/glo {:?} m",
        e.clock_bias_m, e.clock_drift_mps, e.isb_m
    );
    if e.nlos.probability == 0.0 {
        let _ = writeln!(s, "  clean scenario: no NLOS injection");
    } else {
        let _ = writeln!(
            s,
            "  expected NLOS fraction {}%: bias U[{}, {}] m, snr drop {} dB, dwell {} s, x{} below {} deg",
            e.nlos.probability * 100.0,
            e.nlos.bias_min_m,
            e.nlos.bias_max_m,
            e.nlos.snr_drop_db,
            e.nlos.mean_dwell_s,
            e.nlos.low_elevation_factor,
            e.nlos.low_elevation_deg
        );
    }
    s
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            duration_s: 60.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.dataset_bytes(), b.dataset_bytes());
        assert_eq!(a.truth_bytes(), b.truth_bytes());
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.dataset_bytes(), c.dataset_bytes());
    }

    #[test]
    fn records_validate_and_align_with_truth() {
        let s = generate(&small(5)).unwrap();
        assert_eq!(s.records.len(), 60);
        assert_eq!(s.truth.epochs.len(), 60);
        for (r, t) in s.records.iter().zip(&s.truth.epochs) {
            r.validate().unwrap();
            assert_eq!(r.t, t.t);
            let keys: Vec<_> = r.observations.iter().map(|o| o.key()).collect();
            let tkeys: Vec<_> = t.sats.iter().map(|s| (s.system, s.sat_id)).collect();
            assert_eq!(keys, tkeys);
            for (o, st) in r.observations.iter().zip(&t.sats) {
                let total = st.range
                    + t.clock_bias_m
                    + o.system.isb_index().map_or(0.0, |i| t.isb_m[i])
                    + st.tropo
                    + st.iono
                    + st.nlos_bias
                    + st.noise
                    - st.sat_clock_m
                    + st.tgd_m;
                assert!((o.pseudorange - total).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn files_round_trip() {
        let s = generate(&small(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write(dir.path()).unwrap();
        let (m, recs) = ingest::parse_dataset(&dir.path().join(DATASET_FILE)).unwrap();
        assert_eq!(m, s.manifest);
        assert_eq!(recs, s.records);
        let t = read_truth(&dir.path().join(TRUTH_FILE)).unwrap();
        assert_eq!(t, s.truth);
    }

    #[test]
    fn trajectory_follows_square_loop() {
        let spec = TrajectorySpec::default();
        let track = Track::new(&spec);
        let (p0, v0) = track.at(0.0);
        assert!(p0.norm() < 1e-9);
        assert!((v0.norm() - 8.0).abs() < 1e-9);
        let (p, _) = track.at(12.5);
        assert!((p - Vector3::new(100.0, 0.0, 0.0)).norm() < 1e-3);
        let (p, _) = track.at(50.0);
        assert!(p.norm() < 1e-3);
        let stop = Track::new(&TrajectorySpec {
            repeat: false,
            ..spec
        });
        let (p, v) = stop.at(1000.0);
        assert!((p - Vector3::new(0.0, 100.0, 0.0)).norm() < 1e-3);
        assert_eq!(v, Vector3::zeros());
    }

    #[test]
    fn satellites_stay_in_band() {
        let s = generate(&small(7)).unwrap();
        for e in &s.truth.epochs {
            for st in &e.sats {
                assert!(st.elevation > 4.9f64.to_radians() && st.elevation < 85.1f64.to_radians());
            }
        }
    }

    #[test]
    fn impossible_geometry_rejected() {
        let mut cfg = small(1);
        cfg.constellation.elevation_max_deg = 8.0;
        assert!(matches!(generate(&cfg), Err(SimError::Config(_))));
        let mut cfg = small(1);
        cfg.rate_hz = 5;
        assert!(generate(&cfg).is_err());
        let mut cfg = small(1);
        cfg.errors.nlos.probability = 1.5;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn nlos_split_preserves_mean_probability() {
        let cfg = ScenarioConfig::default();
        let (hi, lo) = cfg.nlos_probabilities();
        let f_low = (30.0 - 5.0) / 80.0;
        assert!((f_low * lo + (1.0 - f_low) * hi - 0.2).abs() < 1e-15);
        assert!((lo / hi - 3.0).abs() < 1e-12);
    }

    #[test]
    fn describe_mentions_systems_and_fraction() {
        let cfg = ScenarioConfig::default();
        let d = describe(&cfg);
        for (sys, n) in cfg.constellation.counts() {
            assert!(d.contains(&format!("{sys}: {n} satellites")), "{d}");
        }
        assert!(d.contains("expected NLOS fraction 20%"), "{d}");
        let mut clean = cfg.clone();
        clean.errors.nlos.probability = 0.0;
        assert!(describe(&clean).contains("clean scenario"));
    }
}
