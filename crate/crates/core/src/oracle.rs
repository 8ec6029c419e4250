//! Independent reference computations used by the self-test and the
//! acceptance suite. None of these share code with the functions they
//! check.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::distill::decoy::{DecoyObservables, E0};

/// Gain and error rate of a Poisson source of mean `mean` through a channel
/// of transmittance `eta`, summed photon number by photon number up to 50.
pub fn poisson_mixture(mean: f64, eta: f64, y0: f64, e_det: f64) -> (f64, f64) {
    let (mut q, mut eq) = (0.0, 0.0);
    let mut p = (-mean).exp();
    for n in 0..=50 {
        if n > 0 {
            p *= mean / n as f64;
        }
        let yn = 1.0 - (1.0 - y0) * (1.0 - eta).powi(n);
        q += p * yn;
        eq += p * (E0 * y0 + e_det * (yn - y0));
    }
    (q, eq / q)
}

/// True single-photon yield and error rate of the same channel model.
pub fn single_photon_truth(eta: f64, y0: f64, e_det: f64) -> (f64, f64) {
    let y1 = 1.0 - (1.0 - y0) * (1.0 - eta);
    (y1, (E0 * y0 + e_det * (y1 - y0)) / y1)
}

/// Observables with no sampling noise: every count is its expectation over
/// 10¹² pulses per class, and half of the detections are sifted.
pub fn exact_observables(mu: f64, nu: f64, eta: f64, y0: f64, e_det: f64) -> DecoyObservables {
    let big = 1e12;
    let (qm, em) = poisson_mixture(mu, eta, y0, e_det);
    let (qn, en) = poisson_mixture(nu, eta, y0, e_det);
    DecoyObservables {
        pulses_mu: big,
        pulses_nu: big,
        pulses_vac: big,
        detections_mu: qm * big,
        detections_nu: qn * big,
        detections_vac: y0 * big,
        sifted_mu: qm * big / 2.0,
        errors_mu: em * qm * big / 2.0,
        sifted_nu: qn * big / 2.0,
        errors_nu: en * qn * big / 2.0,
    }
}

/// Monte-Carlo capture fraction: draw a jitter offset, then a photon from
/// the Gaussian beam around it (per-axis σ = w/2 for a 1/e² radius w), and
/// count photons landing inside the aperture.
pub fn capture_fraction_monte_carlo<R: Rng>(
    w_lt: f64,
    pointing_sigma: f64,
    range: f64,
    rx_radius: f64,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let sj = pointing_sigma * range;
    let sb = w_lt / 2.0;
    let mut inside = 0usize;
    for _ in 0..samples {
        let x = sj * unit.sample(rng) + sb * unit.sample(rng);
        let y = sj * unit.sample(rng) + sb * unit.sample(rng);
        if x * x + y * y < rx_radius * rx_radius {
            inside += 1;
        }
    }
    inside as f64 / samples as f64
}

/// Zenith angular rate of a circular orbit seen from the ground, deg/s:
/// orbital speed over altitude.
pub fn zenith_rate(orbit_altitude: f64) -> f64 {
    use crate::kinematics::{EARTH_RADIUS, GM_EARTH};
    let v = (GM_EARTH / (EARTH_RADIUS + orbit_altitude)).sqrt();
    (v / orbit_altitude).to_degrees()
}
