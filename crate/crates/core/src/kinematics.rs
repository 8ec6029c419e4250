//! Pass trajectories and line-of-sight geometry.
//!
//! Aircraft passes are evaluated in a flat local tangent plane centred on the
//! ground station (east, north, up). Satellite passes use a spherical Earth
//! and an unperturbed circular orbit. Every sample carries the slant range,
//! azimuth/elevation, their rates and the photon time of flight.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Earth gravitational parameter, m^3/s^2.
pub const GM_EARTH: f64 = 3.986_004_418e14;
/// Mean Earth radius, m.
pub const EARTH_RADIUS: f64 = 6_371_000.0;

pub const TRAJECTORY_CSV_HEADER: &str =
    "t,lat,lon,alt,range_m,az_deg,el_deg,az_rate,el_rate,ang_speed,tof_s";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    /// Degrees, positive north.
    pub latitude: f64,
    /// Degrees, positive east.
    pub longitude: f64,
    /// Metres above sea level.
    pub altitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64, altitude: f64) -> Result<Self> {
        let p = GeoPoint {
            latitude,
            longitude,
            altitude,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latitude.abs() <= 90.0) {
            return Err(Error::Config(format!("latitude {} out of range", self.latitude)));
        }
        if !(self.longitude.abs() <= 180.0) {
            return Err(Error::Config(format!("longitude {} out of range", self.longitude)));
        }
        if !(self.altitude >= -500.0) {
            return Err(Error::Config(format!("altitude {} below -500 m", self.altitude)));
        }
        Ok(())
    }

    /// Offset this point by local east/north/up metres (flat-Earth).
    fn offset_enu(&self, east: f64, north: f64, up: f64) -> GeoPoint {
        let lat = self.latitude + (north / EARTH_RADIUS).to_degrees();
        let lon =
            self.longitude + (east / (EARTH_RADIUS * self.latitude.to_radians().cos())).to_degrees();
        GeoPoint {
            latitude: lat.clamp(-90.0, 90.0),
            longitude: ((lon + 540.0).rem_euclid(360.0)) - 180.0,
            altitude: self.altitude + up,
        }
    }
}

impl Default for GeoPoint {
    /// Smiths Falls–Montague airport, Ontario.
    fn default() -> Self {
        GeoPoint {
            latitude: 44.9458,
            longitude: -75.9406,
            altitude: 128.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Arc,
    Line,
    Satellite,
}

fn default_platform_altitude() -> f64 {
    1600.0
}
fn default_ground_altitude() -> f64 {
    128.0
}
fn default_sample_interval() -> f64 {
    1.0
}
fn default_max_elevation() -> f64 {
    90.0
}
fn default_gps_sigma() -> f64 {
    3.0
}

/// Pass parameters.
///
/// `nominal_distance` is the slant range at closest approach: the constant
/// range of an arc, or the minimum range of a line pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassConfig {
    pub kind: PassKind,
    pub nominal_distance: f64,
    #[serde(default = "default_platform_altitude")]
    pub platform_altitude: f64,
    #[serde(default = "default_ground_altitude")]
    pub ground_altitude: f64,
    /// Aircraft ground speed, m/s.
    #[serde(default)]
    pub speed: f64,
    /// Circular orbit altitude above the mean sphere, m (satellite only).
    #[serde(default)]
    pub orbit_altitude: Option<f64>,
    /// Peak elevation of a satellite pass, degrees.
    #[serde(default = "default_max_elevation")]
    pub max_elevation: f64,
    pub duration: f64,
    /// Bearing of the platform at t = 0 (arc) or of the closest-approach
    /// point (line), degrees clockwise from north.
    #[serde(default)]
    pub start_bearing: f64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval: f64,
    /// One-sigma GPS position noise per axis, m. Zero disables.
    #[serde(default = "default_gps_sigma")]
    pub gps_noise_sigma: f64,
    #[serde(default)]
    pub ground_station: GeoPoint,
}

impl PassConfig {
    pub fn arc(nominal_distance: f64, speed: f64, duration: f64) -> Self {
        PassConfig {
            kind: PassKind::Arc,
            nominal_distance,
            speed,
            duration,
            ..Self::base()
        }
    }

    pub fn line(nominal_distance: f64, speed: f64, duration: f64) -> Self {
        PassConfig {
            kind: PassKind::Line,
            nominal_distance,
            speed,
            duration,
            ..Self::base()
        }
    }

    pub fn satellite(orbit_altitude: f64, max_elevation: f64, duration: f64) -> Self {
        PassConfig {
            kind: PassKind::Satellite,
            nominal_distance: orbit_altitude,
            orbit_altitude: Some(orbit_altitude),
            max_elevation,
            duration,
            ..Self::base()
        }
    }

    fn base() -> Self {
        PassConfig {
            kind: PassKind::Arc,
            nominal_distance: 1.0,
            platform_altitude: default_platform_altitude(),
            ground_altitude: default_ground_altitude(),
            speed: 0.0,
            orbit_altitude: None,
            max_elevation: default_max_elevation(),
            duration: 1.0,
            start_bearing: 0.0,
            sample_interval: default_sample_interval(),
            gps_noise_sigma: default_gps_sigma(),
            ground_station: GeoPoint::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_distance > 0.0) {
            return Err(Error::Config("nominal_distance must be positive".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.sample_interval > 0.0) {
            return Err(Error::Config("sample_interval must be positive".into()));
        }
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return Err(Error::Config("speed must be non-negative".into()));
        }
        if !(self.gps_noise_sigma >= 0.0) {
            return Err(Error::Config("gps_noise_sigma must be non-negative".into()));
        }
        self.ground_station.validate()?;
        match self.kind {
            PassKind::Arc | PassKind::Line => {
                if self.nominal_distance < self.height_difference().abs() {
                    return Err(Error::Config(format!(
                        "slant distance {} m shorter than altitude difference {} m",
                        self.nominal_distance,
                        self.height_difference()
                    )));
                }
            }
            PassKind::Satellite => match self.orbit_altitude {
                Some(h) if h > 0.0 => {
                    if !(self.max_elevation > 0.0 && self.max_elevation <= 90.0) {
                        return Err(Error::Config("max_elevation must be in (0, 90]".into()));
                    }
                }
                _ => return Err(Error::Config("satellite pass needs orbit_altitude > 0".into())),
            },
        }
        Ok(())
    }

    fn height_difference(&self) -> f64 {
        self.platform_altitude - self.ground_altitude
    }

    /// Ground-projected distance at closest approach for aircraft passes.
    pub fn ground_distance(&self) -> f64 {
        let dh = self.height_difference();
        (self.nominal_distance.powi(2) - dh * dh).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: GeoPoint,
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    /// deg/s
    pub az_rate: f64,
    /// deg/s
    pub el_rate: f64,
    /// deg/s, quadrature sum of `az_rate * cos(el)` and `el_rate`.
    pub angular_speed: f64,
    pub tof: f64,
}

pub fn time_of_flight(range: f64) -> f64 {
    range / SPEED_OF_LIGHT
}

/// Relative position and velocity of the platform in the station's
/// east-north-up frame.
#[derive(Debug, Clone, Copy)]
struct Kinematic {
    pos: [f64; 3],
    vel: [f64; 3],
}

fn look_angles(k: &Kinematic) -> (f64, f64, f64, f64, f64, f64) {
    let [e, n, u] = k.pos;
    let [ve, vn, vu] = k.vel;
    let rho2 = e * e + n * n;
    let rho = rho2.sqrt();
    let range = (rho2 + u * u).sqrt();
    let az = e.atan2(n).to_degrees().rem_euclid(360.0);
    let el = u.atan2(rho);
    let (az_rate, el_rate) = if rho > 0.0 {
        let az_dot = (n * ve - e * vn) / rho2;
        let rho_dot = (e * ve + n * vn) / rho;
        let el_dot = (rho * vu - u * rho_dot) / (range * range);
        (az_dot, el_dot)
    } else {
        (0.0, 0.0)
    };
    let angular = if range > 0.0 {
        // |r x v| / |r|^2 is the line-of-sight angular speed; it equals the
        // quadrature sum of az_rate*cos(el) and el_rate.
        let cx = n * vu - u * vn;
        let cy = u * ve - e * vu;
        let cz = e * vn - n * ve;
        (cx * cx + cy * cy + cz * cz).sqrt() / (range * range)
    } else {
        0.0
    };
    (
        range,
        az,
        el.to_degrees(),
        az_rate.to_degrees(),
        el_rate.to_degrees(),
        angular.to_degrees(),
    )
}

fn aircraft_state(cfg: &PassConfig, t: f64) -> Kinematic {
    let up = cfg.height_difference();
    let g = cfg.ground_distance();
    let bearing = cfg.start_bearing.to_radians();
    match cfg.kind {
        PassKind::Arc => {
            let omega = if g > 0.0 { cfg.speed / g } else { 0.0 };
            let th = bearing + omega * t;
            Kinematic {
                pos: [g * th.sin(), g * th.cos(), up],
                vel: [g * omega * th.cos(), -g * omega * th.sin(), 0.0],
            }
        }
        PassKind::Line => {
            // Closest approach at mid-pass; track runs perpendicular to the
            // bearing of the closest-approach point.
            let s = cfg.speed * (t - cfg.duration / 2.0);
            let (cb, sb) = (bearing.cos(), bearing.sin());
            let (he, hn) = (cb, -sb);
            Kinematic {
                pos: [g * sb + s * he, g * cb + s * hn, up],
                vel: [cfg.speed * he, cfg.speed * hn, 0.0],
            }
        }
        PassKind::Satellite => unreachable!("satellite handled separately"),
    }
}

/// Central angle between the station and the orbit plane that gives the
/// requested peak elevation.
fn central_angle_for_elevation(station_r: f64, orbit_r: f64, el_max: f64) -> f64 {
    let el = el_max.to_radians();
    let elevation_at = |gamma: f64| ((gamma.cos() - station_r / orbit_r) / gamma.sin()).atan();
    if el >= PI / 2.0 - 1e-12 {
        return 0.0;
    }
    let horizon = (station_r / orbit_r).acos();
    let (mut lo, mut hi) = (1e-12, horizon);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if elevation_at(mid) > el {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct SatelliteGeometry {
    station: [f64; 3],
    east: [f64; 3],
    north: [f64; 3],
    up: [f64; 3],
    orbit_r: f64,
    mean_motion: f64,
    t_center: f64,
}

impl SatelliteGeometry {
    fn new(cfg: &PassConfig) -> Self {
        let h = cfg.orbit_altitude.unwrap_or(cfg.nominal_distance);
        let station_r = EARTH_RADIUS + cfg.ground_altitude;
        let orbit_r = EARTH_RADIUS + h;
        let beta = central_angle_for_elevation(station_r, orbit_r, cfg.max_elevation);
        // Orbit in the x-y plane; station tilted out of plane by beta.
        let up = [beta.cos(), 0.0, beta.sin()];
        let station = [station_r * up[0], 0.0, station_r * up[2]];
        // The orbit moves toward +y at closest approach; orient the local
        // frame so that heading sits along the start bearing.
        let along = [0.0, 1.0, 0.0];
        let cross = [-beta.sin(), 0.0, beta.cos()];
        let b = cfg.start_bearing.to_radians() + PI / 2.0;
        // Choose north/east so that `along` has bearing `start_bearing + 90`.
        let north = [
            b.cos() * cross[0] - b.sin() * along[0],
            b.cos() * cross[1] - b.sin() * along[1],
            b.cos() * cross[2] - b.sin() * along[2],
        ];
        let east = [
            b.sin() * cross[0] + b.cos() * along[0],
            b.sin() * cross[1] + b.cos() * along[1],
            b.sin() * cross[2] + b.cos() * along[2],
        ];
        SatelliteGeometry {
            station,
            east,
            north,
            up,
            orbit_r,
            mean_motion: (GM_EARTH / orbit_r.powi(3)).sqrt(),
            t_center: cfg.duration / 2.0,
        }
    }

    fn state(&self, t: f64) -> Kinematic {
        let phi = self.mean_motion * (t - self.t_center);
        let v = self.orbit_r * self.mean_motion;
        let s = [self.orbit_r * phi.cos(), self.orbit_r * phi.sin(), 0.0];
        let sv = [-v * phi.sin(), v * phi.cos(), 0.0];
        let r = [s[0] - self.station[0], s[1] - self.station[1], s[2] - self.station[2]];
        let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        Kinematic {
            pos: [dot(&r, &self.east), dot(&r, &self.north), dot(&r, &self.up)],
            vel: [dot(&sv, &self.east), dot(&sv, &self.north), dot(&sv, &self.up)],
        }
    }
}

/// Circular orbital speed at altitude `h` above the mean sphere.
pub fn orbital_speed(h: f64) -> f64 {
    (GM_EARTH / (EARTH_RADIUS + h)).sqrt()
}

fn sample_times(cfg: &PassConfig) -> Vec<f64> {
    let n = (cfg.duration / cfg.sample_interval + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 * cfg.sample_interval).collect()
}

fn sample_from(cfg: &PassConfig, t: f64, k: &Kinematic) -> TrajectorySample {
    let (range, az, el, az_rate, el_rate, ang) = look_angles(k);
    let position = match cfg.kind {
        PassKind::Satellite => {
            // Sub-satellite-ish point reported in local ENU offsets; adequate
            // for telemetry, not for geodesy.
            cfg.ground_station.offset_enu(k.pos[0], k.pos[1], k.pos[2])
        }
        _ => cfg.ground_station.offset_enu(k.pos[0], k.pos[1], k.pos[2]),
    };
    TrajectorySample {
        t,
        position,
        range,
        azimuth: az,
        elevation: el,
        az_rate,
        el_rate,
        angular_speed: ang,
        tof: time_of_flight(range),
    }
}

/// Sample a pass at `sample_interval` from 0 to `duration` inclusive.
pub fn generate_trajectory(cfg: &PassConfig) -> Result<Vec<TrajectorySample>> {
    cfg.validate()?;
    let times = sample_times(cfg);
    Ok(match cfg.kind {
        PassKind::Satellite => {
            let geo = SatelliteGeometry::new(cfg);
            times.iter().map(|&t| sample_from(cfg, t, &geo.state(t))).collect()
        }
        _ => times
            .iter()
            .map(|&t| sample_from(cfg, t, &aircraft_state(cfg, t)))
            .collect(),
    })
}

/// Evaluate the true geometry at an arbitrary time.
pub fn sample_at(cfg: &PassConfig, t: f64) -> TrajectorySample {
    match cfg.kind {
        PassKind::Satellite => sample_from(cfg, t, &SatelliteGeometry::new(cfg).state(t)),
        _ => sample_from(cfg, t, &aircraft_state(cfg, t)),
    }
}

/// Finite-difference line-of-sight rates between two samples, deg/s.
pub fn angular_rates(prev: &TrajectorySample, next: &TrajectorySample) -> Result<(f64, f64, f64)> {
    let dt = next.t - prev.t;
    if dt == 0.0 {
        return Err(Error::ZeroTimeStep(next.t));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("samples out of order".into()));
    }
    let daz = (next.azimuth - prev.azimuth + 540.0).rem_euclid(360.0) - 180.0;
    let del = next.elevation - prev.elevation;
    let el_mid = 0.5 * (next.elevation + prev.elevation);
    let az_rate = daz / dt;
    let el_rate = del / dt;
    let speed = (az_rate * el_mid.to_radians().cos()).hypot(el_rate);
    Ok((az_rate, el_rate, speed))
}

/// Time of flight as a GPS-derived estimate: the true platform position is
/// perturbed by zero-mean Gaussian noise per axis before the range is formed.
pub fn gps_tof_series(
    cfg: &PassConfig,
    samples: &[TrajectorySample],
    seed: u64,
) -> Vec<(f64, f64)> {
    let mut rng = rng::stream(seed, "gps", 0);
    let noise = Normal::new(0.0, cfg.gps_noise_sigma.max(0.0)).expect("finite sigma");
    samples
        .iter()
        .map(|s| {
            let k = match cfg.kind {
                PassKind::Satellite => SatelliteGeometry::new(cfg).state(s.t),
                _ => aircraft_state(cfg, s.t),
            };
            let mut p = k.pos;
            if cfg.gps_noise_sigma > 0.0 {
                for c in p.iter_mut() {
                    *c += noise.sample(&mut rng);
                }
            }
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            (s.t, time_of_flight(r))
        })
        .collect()
}

/// Piecewise-linear interpolation over a `(t, value)` series, clamped at the
/// ends.
pub fn interpolate(series: &[(f64, f64)], t: f64) -> f64 {
    match series.len() {
        0 => 0.0,
        1 => series[0].1,
        _ => {
            if t <= series[0].0 {
                return series[0].1;
            }
            let last = series[series.len() - 1];
            if t >= last.0 {
                return last.1;
            }
            let i = series.partition_point(|&(ti, _)| ti <= t);
            let (t0, v0) = series[i - 1];
            let (t1, v1) = series[i];
            v0 + (v1 - v0) * (t - t0) / (t1 - t0)
        }
    }
}

pub fn write_trajectory_csv<W: Write>(mut w: W, samples: &[TrajectorySample]) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_CSV_HEADER}")?;
    for s in samples {
        writeln!(
            w,
            "{},{:.7},{:.7},{:.3},{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.12e}",
            s.t,
            s.position.latitude,
            s.position.longitude,
            s.position.altitude,
            s.range,
            s.azimuth,
            s.elevation,
            s.az_rate,
            s.el_rate,
            s.angular_speed,
            s.tof
        )?;
    }
    Ok(())
}

/// Apply optional GPS position noise to emitted positions.
pub fn noisy_position<R: Rng>(p: &GeoPoint, sigma: f64, rng: &mut R) -> GeoPoint {
    if sigma <= 0.0 {
        return *p;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    p.offset_enu(n.sample(rng), n.sample(rng), n.sample(rng))
}
