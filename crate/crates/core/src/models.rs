//! Pseudorange measurement model and the deterministic corrections applied
//! before positioning: satellite clock, TGD, troposphere and ionosphere.
//!
//! Multipath and receiver hardware delay are left in the measurement; the
//! receiver delay is absorbed by the clock estimate and multipath is what the
//! learned filter has to cope with.

use crate::frames::{self, GeodeticPos, LookAngles, SPEED_OF_LIGHT};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "GPS")]
    Gps,
    #[serde(rename = "BDS")]
    Bds,
    #[serde(rename = "GAL")]
    Gal,
    #[serde(rename = "GLO")]
    Glo,
}

impl System {
    pub const ALL: [System; 4] = [System::Gps, System::Bds, System::Gal, System::Glo];

    /// Index into the ISB triple (BDS, GAL, GLO); GPS is the reference.
    pub fn isb_index(self) -> Option<usize> {
        match self {
            System::Gps => None,
            System::Bds => Some(0),
            System::Gal => Some(1),
            System::Glo => Some(2),
        }
    }

    /// Inter-system indicator row (alpha_C, alpha_E, alpha_R).
    pub fn indicators(self) -> [f64; 3] {
        let mut a = [0.0; 3];
        if let Some(i) = self.isb_index() {
            a[i] = 1.0;
        }
        a
    }

    pub fn tag(self) -> &'static str {
        match self {
            System::Gps => "GPS",
            System::Bds => "BDS",
            System::Gal => "GAL",
            System::Glo => "GLO",
        }
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// One satellite's measurement at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatObservation {
    pub system: System,
    pub sat_id: u16,
    /// Raw pseudorange (m).
    pub pseudorange: f64,
    /// Carrier-to-noise density (dB-Hz).
    pub snr: f64,
    pub sat_pos: frames::EcefPos,
    /// Satellite clock offset (s).
    pub sat_clock_bias: f64,
    /// Broadcast time group delay (s).
    pub tgd: f64,
    /// Precomputed ionospheric delay (m), when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iono_delay: Option<f64>,
    /// Precomputed tropospheric delay (m), when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tropo_delay: Option<f64>,
}

impl SatObservation {
    pub fn key(&self) -> (System, u16) {
        (self.system, self.sat_id)
    }

    /// Checks the value-range invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.pseudorange > 1e6 && self.pseudorange < 1e8) {
            return Err(format!("pseudorange {} outside (1e6, 1e8) m", self.pseudorange));
        }
        if !(0.0..=70.0).contains(&self.snr) {
            return Err(format!("snr {} outside [0, 70] dB-Hz", self.snr));
        }
        if !(self.sat_clock_bias.abs() < 1e-2) {
            return Err(format!("satellite clock bias {} s too large", self.sat_clock_bias));
        }
        if !self.tgd.is_finite() || self.tgd.abs() >= 1e-5 {
            return Err(format!("tgd {} s out of range", self.tgd));
        }
        if !self.sat_pos.is_finite() || self.sat_pos.norm() < 6.3e6 {
            return Err("satellite position not above the Earth's surface".into());
        }
        for (name, v) in [("iono_delay", self.iono_delay), ("tropo_delay", self.tropo_delay)] {
            if let Some(v) = v {
                if !v.is_finite() || v.abs() > 1e3 {
                    return Err(format!("{name} {v} m out of range"));
                }
            }
        }
        Ok(())
    }
}

/// Surface meteorology used by the troposphere model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meteo {
    pub pressure_hpa: f64,
    pub temperature_k: f64,
    /// Relative humidity as a fraction.
    pub humidity: f64,
}

impl Default for Meteo {
    fn default() -> Self {
        Self {
            pressure_hpa: 1013.25,
            temperature_k: 291.15,
            humidity: 0.5,
        }
    }
}

/// Broadcast Klobuchar coefficients from the GPS navigation message.
pub const KLOBUCHAR_ALPHA_DEFAULT: [f64; 4] = [0.1118e-07, -0.7451e-08, -0.5961e-07, 0.1192e-06];
pub const KLOBUCHAR_BETA_DEFAULT: [f64; 4] = [0.1167e+06, -0.2294e+06, -0.1311e+06, 0.1049e+07];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub use_saastamoinen: bool,
    pub use_klobuchar: bool,
    pub klobuchar_alpha: [f64; 4],
    pub klobuchar_beta: [f64; 4],
    pub default_pressure: f64,
    pub default_temperature: f64,
    pub default_humidity: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        let met = Meteo::default();
        Self {
            use_saastamoinen: true,
            use_klobuchar: true,
            klobuchar_alpha: KLOBUCHAR_ALPHA_DEFAULT,
            klobuchar_beta: KLOBUCHAR_BETA_DEFAULT,
            default_pressure: met.pressure_hpa,
            default_temperature: met.temperature_k,
            default_humidity: met.humidity,
        }
    }
}

impl CorrectionConfig {
    pub fn meteo(&self) -> Meteo {
        Meteo {
            pressure_hpa: self.default_pressure,
            temperature_k: self.default_temperature,
            humidity: self.default_humidity,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.default_pressure > 800.0 && self.default_pressure < 1100.0) {
            return Err(format!("pressure {} hPa outside (800, 1100)", self.default_pressure));
        }
        if !(self.default_temperature > 200.0 && self.default_temperature < 330.0) {
            return Err(format!("temperature {} K outside (200, 330)", self.default_temperature));
        }
        if !(0.0..=1.0).contains(&self.default_humidity) {
            return Err(format!("humidity {} outside [0, 1]", self.default_humidity));
        }
        if self.klobuchar_alpha.iter().chain(&self.klobuchar_beta).any(|v| !v.is_finite()) {
            return Err("klobuchar coefficients must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{which} correction disabled and no precomputed value for {system} {sat_id}")]
    MissingCorrection {
        which: &'static str,
        system: System,
        sat_id: u16,
    },
    #[error(transparent)]
    Geometry(#[from] frames::FrameError),
}

/// Elevation below which the troposphere value is flagged as unreliable.
pub const TROPO_LOW_ELEVATION: f64 = 5.0 * PI / 180.0;

/// Slant tropospheric delay (m) from the Saastamoinen zenith delays with a
/// 1/sin(elevation) mapping.
///
/// Elevations at or below zero are evaluated at 0.01 rad; callers should treat
/// anything below [`TROPO_LOW_ELEVATION`] as high uncertainty.
pub fn saastamoinen(rx: &GeodeticPos, elevation: f64, met: &Meteo) -> f64 {
    let el = elevation.max(0.01);
    let h = rx.height.max(0.0);
    let t = met.temperature_k;
    let e = 6.108 * met.humidity * ((17.15 * t - 4684.0) / (t - 38.45)).exp();
    let zhd = 0.0022768 * met.pressure_hpa / (1.0 - 0.00266 * (2.0 * rx.lat).cos() - 0.00028 * h / 1e3);
    let zwd = 0.002277 * (1255.0 / t + 0.05) * e;
    (zhd + zwd) / el.sin()
}

/// Broadcast (Klobuchar) ionospheric delay on L1 in meters.
///
/// Follows the eight-step algorithm of the GPS interface specification; angles
/// are converted to semicircles internally.
pub fn klobuchar(
    rx: &GeodeticPos,
    elevation: f64,
    azimuth: f64,
    gps_tod: f64,
    alpha: &[f64; 4],
    beta: &[f64; 4],
) -> f64 {
    let el_sc = elevation.max(0.0) / PI;
    // earth-centered angle
    let psi = 0.0137 / (el_sc + 0.11) - 0.022;
    // ionospheric pierce point
    let phi_i = (rx.lat / PI + psi * azimuth.cos()).clamp(-0.416, 0.416);
    let lam_i = rx.lon / PI + psi * azimuth.sin() / (phi_i * PI).cos();
    // geomagnetic latitude
    let phi_m = phi_i + 0.064 * ((lam_i - 1.617) * PI).cos();
    let mut t = 43200.0 * lam_i + gps_tod;
    t -= (t / 86400.0).floor() * 86400.0;
    let slant = 1.0 + 16.0 * (0.53 - el_sc).powi(3);
    let amp = (alpha[0] + phi_m * (alpha[1] + phi_m * (alpha[2] + phi_m * alpha[3]))).max(0.0);
    let per = (beta[0] + phi_m * (beta[1] + phi_m * (beta[2] + phi_m * beta[3]))).max(72000.0);
    let x = 2.0 * PI * (t - 50400.0) / per;
    let delay = if x.abs() < 1.57 {
        5e-9 + amp * (1.0 + x * x * (-0.5 + x * x / 24.0))
    } else {
        5e-9
    };
    SPEED_OF_LIGHT * slant * delay
}

/// Troposphere and ionosphere values for one observation: precomputed fields
/// take precedence over the models.
pub fn atmosphere(
    obs: &SatObservation,
    rx: &GeodeticPos,
    look: &LookAngles,
    time_of_day: f64,
    cfg: &CorrectionConfig,
) -> Result<(f64, f64), ModelError> {
    let tropo = match (obs.tropo_delay, cfg.use_saastamoinen) {
        (Some(t), _) => t,
        (None, true) => saastamoinen(rx, look.elevation, &cfg.meteo()),
        (None, false) => {
            return Err(ModelError::MissingCorrection {
                which: "troposphere",
                system: obs.system,
                sat_id: obs.sat_id,
            })
        }
    };
    let iono = match (obs.iono_delay, cfg.use_klobuchar) {
        (Some(i), _) => i,
        (None, true) => klobuchar(
            rx,
            look.elevation,
            look.azimuth,
            time_of_day,
            &cfg.klobuchar_alpha,
            &cfg.klobuchar_beta,
        ),
        (None, false) => {
            return Err(ModelError::MissingCorrection {
                which: "ionosphere",
                system: obs.system,
                sat_id: obs.sat_id,
            })
        }
    };
    Ok((tropo, iono))
}

/// `P + c·dt_sat − c·tgd − T − I`: what remains is geometry, receiver clock,
/// inter-system bias, multipath and noise.
pub fn corrected_pseudorange(
    obs: &SatObservation,
    rx: &GeodeticPos,
    time_of_day: f64,
    cfg: &CorrectionConfig,
) -> Result<f64, ModelError> {
    let needs_look = (obs.tropo_delay.is_none() && cfg.use_saastamoinen)
        || (obs.iono_delay.is_none() && cfg.use_klobuchar);
    let look = if needs_look {
        let rx_ecef = frames::geodetic_to_ecef(rx);
        frames::look_angles_lossy(&rx_ecef, rx, &obs.sat_pos)?
    } else {
        LookAngles::default()
    };
    corrected_pseudorange_with(obs, rx, &look, time_of_day, cfg)
}

/// [`corrected_pseudorange`] with look angles already known.
pub fn corrected_pseudorange_with(
    obs: &SatObservation,
    rx: &GeodeticPos,
    look: &LookAngles,
    time_of_day: f64,
    cfg: &CorrectionConfig,
) -> Result<f64, ModelError> {
    let (tropo, iono) = atmosphere(obs, rx, look, time_of_day, cfg)?;
    Ok(obs.pseudorange + SPEED_OF_LIGHT * obs.sat_clock_bias - SPEED_OF_LIGHT * obs.tgd - tropo - iono)
}
