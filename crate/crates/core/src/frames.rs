//! Coordinate frames: WGS-84 geodetic, ECEF and local East-North-Up.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 semi-minor axis (m).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);
/// Speed of light in vacuum (m/s), exact.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const GEODETIC_MAX_ITER: usize = 10;
const GEODETIC_TOL_RAD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("point is {0:.3} m from the Earth's center")]
    TooCloseToCenter(f64),
    /// Point lies on the polar axis; longitude is undefined.
    #[error("point lies on the polar axis, longitude undefined")]
    NearSingularity { fallback: GeodeticPos },
    #[error("satellite and receiver coincide ({0:.3} m apart)")]
    Coincident(f64),
    /// Satellite at the zenith; azimuth is undefined and reported as 0.
    #[error("satellite at zenith, azimuth undefined")]
    ZenithDegenerate { fallback: LookAngles },
}

impl FrameError {
    /// Recover the conventional value carried by a flagged singular case.
    pub fn geodetic_fallback(&self) -> Option<GeodeticPos> {
        match self {
            FrameError::NearSingularity { fallback } => Some(*fallback),
            _ => None,
        }
    }

    pub fn look_fallback(&self) -> Option<LookAngles> {
        match self {
            FrameError::ZenithDegenerate { fallback } => Some(*fallback),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcefPos {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPos {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vec(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn norm(&self) -> f64 {
        self.vec().norm()
    }

    pub fn distance(&self, other: &EcefPos) -> f64 {
        (self.vec() - other.vec()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeodeticPos {
    /// Radians, [-pi/2, pi/2].
    pub lat: f64,
    /// Radians, (-pi, pi].
    pub lon: f64,
    /// Meters above the ellipsoid.
    pub height: f64,
}

impl GeodeticPos {
    pub const fn new(lat: f64, lon: f64, height: f64) -> Self {
        Self { lat, lon, height }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && self.height.is_finite()
            && self.lat.abs() <= FRAC_PI_2
            && self.lon.abs() <= std::f64::consts::PI
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuVec {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl EnuVec {
    pub const fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.east, self.north, self.up)
    }

    pub fn from_vec(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn norm(&self) -> f64 {
        self.vec().norm()
    }
}

/// Elevation and azimuth of a satellite seen from a receiver.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LookAngles {
    /// Radians, [-pi/2, pi/2].
    pub elevation: f64,
    /// Radians clockwise from north, (-pi, pi].
    pub azimuth: f64,
    /// Geometric range (m).
    pub range: f64,
}

fn prime_vertical_radius(sin_lat: f64) -> f64 {
    WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt()
}

/// Double-double helpers. Round-tripping heights to 1e-9 m is below one ulp
/// of an ECEF coordinate, so the transforms carry the extra word internally.
pub(crate) mod dd {
    #[derive(Debug, Clone, Copy)]
    pub struct Dd(pub f64, pub f64);

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd(s, (a - (s - bb)) + (b - bb))
    }

    fn quick_two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd(s, b - (s - a))
    }

    impl Dd {
        pub fn from(a: f64) -> Self {
            Dd(a, 0.0)
        }

        pub fn add(self, o: Dd) -> Dd {
            let s = two_sum(self.0, o.0);
            let t = two_sum(self.1, o.1);
            let s = quick_two_sum(s.0, s.1 + t.0);
            quick_two_sum(s.0, s.1 + t.1)
        }

        pub fn sub(self, o: Dd) -> Dd {
            self.add(Dd(-o.0, -o.1))
        }

        pub fn mul(self, o: Dd) -> Dd {
            let p = self.0 * o.0;
            let e = self.0.mul_add(o.0, -p);
            quick_two_sum(p, e + self.0 * o.1 + self.1 * o.0)
        }

        pub fn mul_f(self, b: f64) -> Dd {
            self.mul(Dd::from(b))
        }

        pub fn sqrt(self) -> Dd {
            let r = self.0.sqrt();
            if r == 0.0 {
                return Dd(0.0, 0.0);
            }
            let d = self.sub(Dd::from(r).mul(Dd::from(r)));
            quick_two_sum(r, d.0 / (2.0 * r))
        }

        pub fn div(self, o: Dd) -> Dd {
            let q = self.0 / o.0;
            let r = self.sub(o.mul_f(q));
            quick_two_sum(q, r.0 / o.0)
        }
    }

    /// (sin, cos) rescaled so that sin² + cos² = 1 to double-double precision.
    pub fn unit_pair(s: f64, c: f64) -> (Dd, Dd) {
        let r = Dd::from(s).mul_f(s).add(Dd::from(c).mul_f(c)).sqrt();
        (Dd::from(s).div(r), Dd::from(c).div(r))
    }
}

use dd::Dd;

fn prime_vertical_radius_dd(sin_lat: f64) -> Dd {
    let w2 = Dd::from(1.0).sub(Dd::from(sin_lat).mul_f(sin_lat).mul_f(WGS84_E2));
    Dd::from(WGS84_A).div(w2.sqrt())
}

pub fn geodetic_to_ecef(g: &GeodeticPos) -> EcefPos {
    let (sin_lat, cos_lat) = g.lat.sin_cos();
    let (sin_lon, cos_lon) = g.lon.sin_cos();
    let n = prime_vertical_radius_dd(sin_lat);
    let (sl, cl) = dd::unit_pair(sin_lat, cos_lat);
    let (so, co) = dd::unit_pair(sin_lon, cos_lon);
    let nh = n.add(Dd::from(g.height));
    EcefPos::new(
        nh.mul(cl).mul(co).0,
        nh.mul(cl).mul(so).0,
        n.mul_f(1.0 - WGS84_E2).add(Dd::from(g.height)).mul(sl).0,
    )
}

/// Iterative inverse of [`geodetic_to_ecef`].
///
/// The latitude fixed point `lat = atan2(z + e² N sin(lat), p)` contracts by
/// roughly e² per step, so ten iterations reach the 1e-12 rad tolerance from
/// the spherical start. Height is the projection of the offset from the
/// ellipsoid foot point onto the normal, which stays conditioned at the poles.
pub fn ecef_to_geodetic(p: &EcefPos) -> Result<GeodeticPos, FrameError> {
    let r = p.norm();
    if !(r > 1.0) {
        return Err(FrameError::TooCloseToCenter(r));
    }
    let rho_dd = Dd::from(p.x).mul_f(p.x).add(Dd::from(p.y).mul_f(p.y)).sqrt();
    let rho = rho_dd.0;
    let lon = if rho < 1e-6 { 0.0 } else { p.y.atan2(p.x) };

    let mut lat = p.z.atan2(rho * (1.0 - WGS84_E2));
    for _ in 0..GEODETIC_MAX_ITER {
        let n = prime_vertical_radius(lat.sin());
        let next = (p.z + WGS84_E2 * n * lat.sin()).atan2(rho);
        let done = (next - lat).abs() < GEODETIC_TOL_RAD;
        lat = next;
        if done {
            break;
        }
    }
    let (sin_lat, cos_lat) = lat.sin_cos();
    let n = prime_vertical_radius_dd(sin_lat);
    let (sl, cl) = dd::unit_pair(sin_lat, cos_lat);
    let radial = rho_dd.sub(n.mul(cl)).mul(cl);
    let axial = Dd::from(p.z).sub(n.mul_f(1.0 - WGS84_E2).mul(sl)).mul(sl);
    let height = radial.add(axial).0;

    let pos = GeodeticPos::new(lat, lon, height);
    if rho < 1e-6 {
        return Err(FrameError::NearSingularity { fallback: pos });
    }
    Ok(pos)
}

/// Like [`ecef_to_geodetic`] but accepts the polar-axis convention (lon = 0).
pub fn ecef_to_geodetic_lossy(p: &EcefPos) -> Result<GeodeticPos, FrameError> {
    ecef_to_geodetic(p).or_else(|e| e.geodetic_fallback().ok_or(e))
}

/// Rotation taking ECEF difference vectors into ENU at `reference`.
pub fn enu_rotation(reference: &GeodeticPos) -> Matrix3<f64> {
    let (sl, cl) = reference.lat.sin_cos();
    let (so, co) = reference.lon.sin_cos();
    Matrix3::new(
        -so,
        co,
        0.0,
        -sl * co,
        -sl * so,
        cl,
        cl * co,
        cl * so,
        sl,
    )
}

pub fn ecef_to_enu(p: &EcefPos, reference: &GeodeticPos) -> EnuVec {
    let origin = geodetic_to_ecef(reference);
    EnuVec::from_vec(&(enu_rotation(reference) * (p.vec() - origin.vec())))
}

pub fn enu_to_ecef(enu: &EnuVec, reference: &GeodeticPos) -> EcefPos {
    let origin = geodetic_to_ecef(reference);
    EcefPos::from_vec(&(origin.vec() + enu_rotation(reference).transpose() * enu.vec()))
}

/// Elevation `asin(U/D)` and full-circle azimuth `atan2(E, N)` of `sat` seen from `rx`.
pub fn elevation_azimuth(rx: &EcefPos, sat: &EcefPos) -> Result<LookAngles, FrameError> {
    let geo = ecef_to_geodetic_lossy(rx)?;
    elevation_azimuth_at(rx, &geo, sat)
}

/// Same as [`elevation_azimuth`] with the receiver's geodetic position precomputed.
pub fn elevation_azimuth_at(
    rx: &EcefPos,
    rx_geo: &GeodeticPos,
    sat: &EcefPos,
) -> Result<LookAngles, FrameError> {
    let diff = sat.vec() - rx.vec();
    let range = diff.norm();
    if !(range > 1.0) {
        return Err(FrameError::Coincident(range));
    }
    let enu = enu_rotation(rx_geo) * diff;
    let elevation = (enu.z / range).clamp(-1.0, 1.0).asin();
    if (FRAC_PI_2 - elevation).abs() < 1e-9 {
        return Err(FrameError::ZenithDegenerate {
            fallback: LookAngles {
                elevation,
                azimuth: 0.0,
                range,
            },
        });
    }
    let mut azimuth = enu.x.atan2(enu.y);
    if azimuth <= -std::f64::consts::PI {
        azimuth += 2.0 * std::f64::consts::PI;
    }
    Ok(LookAngles {
        elevation,
        azimuth,
        range,
    })
}

/// Look angles accepting the zenith convention (azimuth 0).
pub fn look_angles_lossy(
    rx: &EcefPos,
    rx_geo: &GeodeticPos,
    sat: &EcefPos,
) -> Result<LookAngles, FrameError> {
    elevation_azimuth_at(rx, rx_geo, sat).or_else(|e| e.look_fallback().ok_or(e))
}

/// Unit vector in ENU pointing along the given elevation and azimuth.
pub fn enu_direction(elevation: f64, azimuth: f64) -> Vector3<f64> {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vector3::new(ce * sa, ce * ca, se)
}
