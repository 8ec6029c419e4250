//! Optical link budget for the ground-to-platform quantum channel.
//!
//! Loss is the product of four factors: geometric capture of a Gaussian beam
//! broadened by diffraction, turbulence and pointing jitter; Beer–Lambert
//! extinction; receiver optics; detector efficiency. Turbulence strength
//! follows the Hufnagel–Valley profile.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::TrajectorySample;

pub const LINK_CSV_HEADER: &str = "t,loss_db,background_hz,eta";

/// Long-term beam spread coefficient for the turbulence term.
pub const TURBULENCE_SPREAD_COEFFICIENT: f64 = 2.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkBudgetParams {
    pub wavelength: f64,
    pub tx_aperture_diameter: f64,
    pub rx_aperture_diameter: f64,
    /// Half-angle divergence override (defocus). `None` means diffraction
    /// limited, `1.22 λ / D_tx`.
    pub beam_divergence_half_angle: Option<f64>,
    pub rx_optics_transmittance: f64,
    pub detector_efficiency: f64,
    /// Ground-level C_n², m^(-2/3).
    pub cn2_ground: f64,
    /// High-altitude wind speed for the HV profile, m/s.
    pub wind_speed: f64,
    /// Multiplies the whole C_n² profile; zero switches turbulence off.
    pub cn2_scale: f64,
    pub visibility: f64,
    pub ground_altitude: f64,
    /// One-axis RMS transmitter pointing jitter, radians.
    pub pointing_sigma: f64,
    pub turbulence_spread: f64,
    /// Total dark-count rate over all four detectors, Hz.
    pub dark_rate_total: f64,
    /// Additive stray-light rate, Hz.
    pub stray_light_rate: f64,
    /// Per-second log-normal fading, dB one-sigma.
    pub scintillation_sigma_db: f64,
    /// Fixed extra loss (fault injection / loss pinning), dB.
    pub extra_loss_db: f64,
}

impl Default for LinkBudgetParams {
    fn default() -> Self {
        LinkBudgetParams {
            wavelength: 785e-9,
            tx_aperture_diameter: 0.12,
            rx_aperture_diameter: 0.10,
            beam_divergence_half_angle: None,
            rx_optics_transmittance: 0.597,
            detector_efficiency: 0.43,
            cn2_ground: 1.7e-14,
            wind_speed: 21.0,
            cn2_scale: 1.0,
            visibility: 5000.0,
            ground_altitude: 128.0,
            pointing_sigma: 0.00133_f64.to_radians(),
            turbulence_spread: TURBULENCE_SPREAD_COEFFICIENT,
            dark_rate_total: 285.0,
            stray_light_rate: 0.0,
            scintillation_sigma_db: 1.0,
            extra_loss_db: 0.0,
        }
    }
}

impl LinkBudgetParams {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("rx_optics_transmittance", self.rx_optics_transmittance),
            ("detector_efficiency", self.detector_efficiency),
        ];
        for (name, f) in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {f}")));
            }
        }
        let positives = [
            ("wavelength", self.wavelength),
            ("tx_aperture_diameter", self.tx_aperture_diameter),
            ("rx_aperture_diameter", self.rx_aperture_diameter),
            ("visibility", self.visibility),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("cn2_ground", self.cn2_ground),
            ("cn2_scale", self.cn2_scale),
            ("wind_speed", self.wind_speed),
            ("pointing_sigma", self.pointing_sigma),
            ("dark_rate_total", self.dark_rate_total),
            ("stray_light_rate", self.stray_light_rate),
            ("scintillation_sigma_db", self.scintillation_sigma_db),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if let Some(d) = self.beam_divergence_half_angle {
            if !(d > 0.0) {
                return Err(Error::Config("divergence override must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn divergence(&self) -> f64 {
        self.beam_divergence_half_angle
            .unwrap_or(1.22 * self.wavelength / self.tx_aperture_diameter)
    }

    pub fn background_rate(&self) -> f64 {
        self.dark_rate_total + self.stray_light_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub t: f64,
    pub loss_db: f64,
    pub background_rate: f64,
    pub signal_detection_prob: f64,
}

impl LinkSample {
    pub fn from_loss(t: f64, loss_db: f64, background_rate: f64) -> Self {
        let loss_db = loss_db.max(0.0);
        LinkSample {
            t,
            loss_db,
            background_rate,
            signal_detection_prob: 10f64.powf(-loss_db / 10.0),
        }
    }
}

/// Hufnagel–Valley C_n²(h), `h` in metres above sea level.
pub fn hv_cn2_profile(h: f64, params: &LinkBudgetParams) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(Error::InvalidArgument(format!("altitude {h} must be non-negative")));
    }
    Ok(params.cn2_scale * hv_unchecked(h, params.cn2_ground, params.wind_speed))
}

fn hv_unchecked(h: f64, a: f64, v: f64) -> f64 {
    0.00594 * (v / 27.0).powi(2) * (1e-5 * h).powi(10) * (-h / 1000.0).exp()
        + 2.7e-16 * (-h / 1500.0).exp()
        + a * (-h / 100.0).exp()
}

/// Slant path between the ground station and the platform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlantPath {
    pub elevation_deg: f64,
    pub ground_altitude: f64,
    pub platform_altitude: f64,
}

pub const FRIED_QUADRATURE_PANELS: usize = 2000;

/// Composite Simpson integral of the HV profile between two altitudes.
pub fn integrated_cn2(h0: f64, h1: f64, params: &LinkBudgetParams, panels: usize) -> f64 {
    let (lo, hi) = if h0 <= h1 { (h0, h1) } else { (h1, h0) };
    let n = panels + panels % 2;
    let step = (hi - lo) / n as f64;
    if step == 0.0 {
        return 0.0;
    }
    let f = |h: f64| params.cn2_scale * hv_unchecked(h.max(0.0), params.cn2_ground, params.wind_speed);
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * step);
    }
    acc * step / 3.0
}

/// Plane-wave Fried parameter along the slant path. `None` when the path has
/// no turbulence.
pub fn fried_parameter(path: &SlantPath, params: &LinkBudgetParams) -> Result<Option<f64>> {
    if !(path.elevation_deg > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "elevation {} must be positive",
            path.elevation_deg
        )));
    }
    let integral = integrated_cn2(
        path.ground_altitude.max(0.0),
        path.platform_altitude.max(0.0),
        params,
        FRIED_QUADRATURE_PANELS,
    );
    if integral <= 0.0 {
        return Ok(None);
    }
    let k = 2.0 * PI / params.wavelength;
    let zenith = (90.0 - path.elevation_deg).to_radians();
    let base = 0.423 * k * k * integral / zenith.cos();
    Ok(Some(base.powf(-3.0 / 5.0)))
}

/// Long-term 1/e² beam radius at range `range`.
pub fn longterm_spot_radius(range: f64, params: &LinkBudgetParams, r0: Option<f64>) -> f64 {
    let diffraction = params.divergence() * range;
    let turbulence = match r0 {
        Some(r0) if r0.is_finite() && r0 > 0.0 => {
            params.turbulence_spread * params.wavelength * range / (PI * r0)
        }
        _ => 0.0,
    };
    diffraction.hypot(turbulence)
}

/// Mean fraction of a Gaussian beam captured by a circular aperture when the
/// beam centre jitters with one-axis angular RMS `pointing_sigma`.
pub fn capture_fraction(w_lt: f64, pointing_sigma: f64, range: f64, rx_radius: f64) -> f64 {
    let sigma_j = pointing_sigma * range;
    let w_eff2 = w_lt * w_lt + 4.0 * sigma_j * sigma_j;
    if w_eff2 <= 0.0 {
        return 1.0;
    }
    -(-2.0 * rx_radius * rx_radius / w_eff2).exp_m1()
}

/// Extinction exponent per metre from visibility (Kruse).
pub fn extinction_coefficient(params: &LinkBudgetParams) -> f64 {
    let v_km = params.visibility / 1000.0;
    let q = 0.585 * v_km.cbrt();
    (3.912 / params.visibility) * (params.wavelength / 550e-9).powf(-q)
}

/// Beer–Lambert transmittance along a straight path of length `range`.
pub fn atmospheric_transmittance(range: f64, _elevation_deg: f64, params: &LinkBudgetParams) -> f64 {
    (-extinction_coefficient(params) * range).exp()
}

/// Deterministic loss for one trajectory sample (no fading).
pub fn total_loss(sample: &TrajectorySample, platform_altitude: f64, params: &LinkBudgetParams) -> LinkSample {
    let transmittance = link_transmittance(sample, platform_altitude, params);
    let loss_db = -10.0 * transmittance.log10() + params.extra_loss_db;
    LinkSample::from_loss(sample.t, loss_db, params.background_rate())
}

/// Product of every loss factor, excluding `extra_loss_db`.
pub fn link_transmittance(sample: &TrajectorySample, platform_altitude: f64, params: &LinkBudgetParams) -> f64 {
    let r0 = if sample.elevation > 0.0 {
        fried_parameter(
            &SlantPath {
                elevation_deg: sample.elevation,
                ground_altitude: params.ground_altitude,
                platform_altitude,
            },
            params,
        )
        .ok()
        .flatten()
    } else {
        None
    };
    let w = longterm_spot_radius(sample.range, params, r0);
    let capture = capture_fraction(w, params.pointing_sigma, sample.range, params.rx_aperture_diameter / 2.0);
    let atm = atmospheric_transmittance(sample.range, sample.elevation, params);
    capture * atm * params.rx_optics_transmittance * params.detector_efficiency
}

/// Add zero-mean Gaussian fading in dB (log-normal in transmittance).
pub fn apply_scintillation<R: Rng>(sample: &LinkSample, sigma_db: f64, rng: &mut R) -> LinkSample {
    if sigma_db <= 0.0 {
        return *sample;
    }
    let n = Normal::new(0.0, sigma_db).expect("finite sigma");
    LinkSample::from_loss(sample.t, sample.loss_db + n.sample(rng), sample.background_rate)
}

pub fn write_link_csv<W: Write>(mut w: W, samples: &[LinkSample]) -> std::io::Result<()> {
    writeln!(w, "{LINK_CSV_HEADER}")?;
    for s in samples {
        writeln!(
            w,
            "{},{:.6},{:.3},{:.9e}",
            s.t, s.loss_db, s.background_rate, s.signal_detection_prob
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{generate_trajectory, PassConfig};

    fn p() -> LinkBudgetParams {
        LinkBudgetParams::default()
    }

    #[test]
    fn hv_at_ground_and_infinity() {
        let v = hv_cn2_profile(0.0, &p()).unwrap();
        assert!((v - (1.7e-14 + 2.7e-16)).abs() < 1e-20);
        assert!(hv_cn2_profile(1e6, &p()).unwrap() < 1e-30);
        assert!(hv_cn2_profile(-1.0, &p()).is_err());
    }

    #[test]
    fn hv_regression_at_1km() {
        // 0.00594*(21/27)^2*(0.01)^10*e^-1 + 2.7e-16*e^(-2/3) + 1.7e-14*e^-10
        let v = hv_cn2_profile(1000.0, &p()).unwrap();
        assert!((v / 1.393_944_341_6e-16 - 1.0).abs() < 1e-8, "{v:e}");
    }

    #[test]
    fn fried_parameter_edge_cases() {
        let path = SlantPath {
            elevation_deg: 90.0,
            ground_altitude: 128.0,
            platform_altitude: 1600.0,
        };
        let mut quiet = p();
        quiet.cn2_scale = 0.0;
        assert_eq!(fried_parameter(&path, &quiet).unwrap(), None);
        let bad = SlantPath {
            elevation_deg: 0.0,
            ..path
        };
        assert!(fried_parameter(&bad, &p()).is_err());

        let r_long = fried_parameter(&path, &p()).unwrap().unwrap();
        let mut half = p();
        half.wavelength /= 2.0;
        let r_short = fried_parameter(&path, &half).unwrap().unwrap();
        assert!((r_long / r_short - 2f64.powf(6.0 / 5.0)).abs() < 1e-9);
    }

    #[test]
    fn longterm_spot_examples() {
        let params = p();
        assert!((params.divergence() - 7.98e-6).abs() < 1e-8);
        let w = longterm_spot_radius(5000.0, &params, None);
        assert!((w - 0.0399).abs() < 5e-4, "{w}");
        assert!(longterm_spot_radius(1e-9, &params, None) < 1e-12);
        let turb = longterm_spot_radius(5000.0, &params, Some(0.02));
        // turbulence term 2.1*λ*L/(π*r0) = 0.1312 m dominates the 0.0399 m diffraction term
        assert!((turb - 0.1371).abs() < 1e-3 && turb > 3.0 * w, "{turb}");
    }

    #[test]
    fn capture_examples() {
        assert!(capture_fraction(0.01, 0.0, 1000.0, 1.0) > 1.0 - 1e-12);
        let a = 0.05;
        let c = capture_fraction(a * 2f64.sqrt(), 0.0, 1000.0, a);
        assert!((c - (1.0 - (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn transmittance_examples() {
        let mut clear = p();
        clear.visibility = 1e12;
        assert!(atmospheric_transmittance(5000.0, 10.0, &clear) > 0.999_999);
        let t = atmospheric_transmittance(5000.0, 10.0, &p());
        assert!((t / 0.064_533_928_5 - 1.0).abs() < 1e-8, "{t}");
        assert!(atmospheric_transmittance(6000.0, 10.0, &p()) < t);
    }

    #[test]
    fn all_unity_is_zero_db() {
        let s = LinkSample::from_loss(0.0, -10.0 * 1f64.log10(), 0.0);
        assert_eq!(s.loss_db, 0.0);
        assert_eq!(s.signal_detection_prob, 1.0);
    }

    #[test]
    fn loss_monotone_in_range() {
        let params = p();
        let mut last = 0.0;
        for d in [2000.0, 3000.0, 5000.0, 8000.0, 12000.0] {
            let s = generate_trajectory(&PassConfig::arc(d, 50.0, 1.0)).unwrap();
            let l = total_loss(&s[0], 1600.0, &params).loss_db;
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn far_field_geometric_loss_is_20db_per_decade() {
        let mut params = p();
        params.cn2_scale = 0.0;
        params.pointing_sigma = 0.0;
        let a = params.rx_aperture_diameter / 2.0;
        let c1 = capture_fraction(longterm_spot_radius(1e6, &params, None), 0.0, 1e6, a);
        let c2 = capture_fraction(longterm_spot_radius(1e7, &params, None), 0.0, 1e7, a);
        let db = 10.0 * (c1 / c2).log10();
        assert!((db - 20.0).abs() < 0.05, "{db}");
    }

    #[test]
    fn scintillation_preserves_eta_identity() {
        let mut rng = crate::rng::stream(1, "t", 0);
        let s = apply_scintillation(&LinkSample::from_loss(1.0, 30.0, 285.0), 1.0, &mut rng);
        assert_eq!(s.signal_detection_prob, 10f64.powf(-s.loss_db / 10.0));
    }
}
