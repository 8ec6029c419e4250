//! Reduced oracle suite for the `selftest` command. Each check compares a
//! production routine against an independent reference at a smaller scale
//! than the acceptance suite.

use rand::Rng;

use crate::channel;
use crate::distill::decoy;
use crate::distill::ldpc::{self, EcConfig, LdpcFamily};
use crate::distill::toeplitz;
use crate::kinematics::{self, PassConfig};
use crate::oracle;
use crate::pointing::{state_transition, PointingEvent, PointingState};
use crate::rng;
use crate::runner;
use crate::transmitter::SourceConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> SelfCheck {
    SelfCheck { name, passed, detail }
}

fn zenith_rate() -> SelfCheck {
    let s = kinematics::generate_trajectory(&PassConfig::satellite(600e3, 90.0, 600.0)).expect("valid pass");
    let peak = s.iter().map(|x| x.angular_speed).fold(0.0, f64::max);
    let want = oracle::zenith_rate(600e3);
    check("zenith angular rate, 600 km", (peak / want - 1.0).abs() < 0.03, format!("{peak:.4} vs v/h {want:.4} deg/s"))
}

fn time_of_flight() -> SelfCheck {
    let t = kinematics::time_of_flight(10_000.0) * 1e6;
    check("time of flight, 10 km", (t - 33.356).abs() < 0.01, format!("{t:.4} us"))
}

fn capture() -> SelfCheck {
    let mut r = rng::stream(11, "selftest-capture", 0);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let w = r.random_range(0.05..0.5);
        let sigma = r.random_range(0.0..20e-6);
        let range = r.random_range(2000.0..10_000.0);
        let a = r.random_range(0.03..0.2);
        let exact = channel::capture_fraction(w, sigma, range, a);
        let mc = oracle::capture_fraction_monte_carlo(w, sigma, range, a, 100_000, &mut r);
        worst = worst.max((exact - mc).abs() / exact);
    }
    check("capture fraction vs Monte Carlo", worst < 0.03, format!("worst relative deviation {worst:.4}"))
}

fn decoy_bounds() -> SelfCheck {
    let mut r = rng::stream(12, "selftest-decoy", 0);
    let mut violations = 0;
    for _ in 0..200 {
        let eta = 10f64.powf(r.random_range(-4.0..-0.5));
        let y0 = 10f64.powf(r.random_range(-7.0..-4.0));
        let mu = r.random_range(0.3..0.9);
        let nu = r.random_range(0.02..0.25);
        let obs = oracle::exact_observables(mu, nu, eta, y0, 0.01);
        let (y1, e1) = oracle::single_photon_truth(eta, y0, 0.01);
        match decoy::decoy_bounds(&obs, mu, nu, 0.0) {
            Ok(est) if est.y1_lower <= y1 * (1.0 + 1e-9) && est.e1_upper >= e1 * (1.0 - 1e-9) => {}
            Err(_) => {}
            Ok(_) => violations += 1,
        }
    }
    check("decoy bounds never anti-conservative", violations == 0, format!("{violations} violations in 200"))
}

fn toeplitz_linearity() -> SelfCheck {
    let mut r = rng::stream(13, "selftest-toeplitz", 0);
    let (n, m) = (256, 64);
    let mut bad = 0;
    for _ in 0..200 {
        let seed: Vec<u8> = (0..n + m - 1).map(|_| r.random_range(0..2u8)).collect();
        let a: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
        let b: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
        let ab: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x ^ y).collect();
        let ta = toeplitz::privacy_amplify(&a, m, &seed).expect("sizes match");
        let tb = toeplitz::privacy_amplify(&b, m, &seed).expect("sizes match");
        let tab = toeplitz::privacy_amplify(&ab, m, &seed).expect("sizes match");
        if ta.iter().zip(&tb).map(|(x, y)| x ^ y).ne(tab.iter().copied()) {
            bad += 1;
        }
    }
    check("Toeplitz linearity", bad == 0, format!("{bad} of 200 pairs nonlinear"))
}

fn reconciliation() -> SelfCheck {
    let n = 1024;
    let family = match LdpcFamily::new(n, 5) {
        Ok(f) => f,
        Err(e) => return check("LDPC reconciliation", false, e.to_string()),
    };
    let cfg = EcConfig { block_length: n, ..EcConfig::default() };
    let mut r = rng::stream(14, "selftest-ldpc", 0);
    let (mut verified, mut wrong) = (0, 0);
    for b in 0..20 {
        let a: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
        let o: Vec<u8> = a.iter().map(|&x| x ^ u8::from(r.random::<f64>() < 0.02)).collect();
        match ldpc::ec_reconcile(&family, &a, &o, 0.02, &cfg, b) {
            Ok(out) if out.verified => {
                verified += 1;
                if out.corrected.as_deref() != Some(&a[..]) {
                    wrong += 1;
                }
            }
            _ => {}
        }
    }
    check("LDPC reconciliation at 2%", verified >= 19 && wrong == 0, format!("{verified}/20 verified, {wrong} wrong"))
}

fn sparse_sampling() -> SelfCheck {
    let c = runner::compare_sparse_sampling(&SourceConfig::default(), 1e-3, 40_000_000, 15);
    let worst = c.z.iter().map(|z| z.abs()).fold(0.0, f64::max);
    check("sparse slot sampling vs per-slot draw", worst < 4.0, format!("z = {:?}", c.z.map(|z| (z * 100.0).round() / 100.0)))
}

fn state_machine() -> SelfCheck {
    use PointingEvent as E;
    use PointingState as S;
    let ok = state_transition(S::Tracking, E::SpotLost) == S::Coasting
        && state_transition(S::Coasting, E::SpotFound) == S::Tracking
        && state_transition(S::Coasting, E::Timeout) == S::Searching
        && state_transition(S::Idle, E::SpotFound) == S::Idle;
    check("pointing state machine", ok, String::new())
}

pub fn run_all() -> Vec<SelfCheck> {
    vec![
        zenith_rate(),
        time_of_flight(),
        capture(),
        decoy_bounds(),
        toeplitz_linearity(),
        reconciliation(),
        sparse_sampling(),
        state_machine(),
    ]
}
