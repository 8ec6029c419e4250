use proptest::prelude::*;

use uplink_qkd::channel::{self, LinkBudgetParams};
use uplink_qkd::distill::decoy;
use uplink_qkd::distill::entropy::binary_entropy;
use uplink_qkd::distill::sift::{self, ClassTally, FrameData};
use uplink_qkd::distill::toeplitz;
use uplink_qkd::kinematics::{self, PassConfig};
use uplink_qkd::oracle;
use uplink_qkd::pointing::{state_transition, PointingEvent, PointingState};
use uplink_qkd::transmitter::{self, BlochRotation, SourceConfig, StokesVector};

fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, n)
}

fn state() -> impl Strategy<Value = PointingState> {
    prop_oneof![
        Just(PointingState::Idle),
        Just(PointingState::Searching),
        Just(PointingState::Acquiring),
        Just(PointingState::Tracking),
        Just(PointingState::Coasting),
    ]
}

fn event() -> impl Strategy<Value = PointingEvent> {
    prop_oneof![
        Just(PointingEvent::PositionDataReceived),
        Just(PointingEvent::SpotFound),
        Just(PointingEvent::SpotLost),
        Just(PointingEvent::LockAchieved),
        Just(PointingEvent::Timeout),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_symmetric_and_bounded(x in 0.0f64..=1.0) {
        let h = binary_entropy(x).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
        prop_assert!((h - binary_entropy(1.0 - x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn time_of_flight_is_linear(a in 0.0f64..1e6, b in 0.0f64..1e6) {
        let lhs = kinematics::time_of_flight(a + b);
        let rhs = kinematics::time_of_flight(a) + kinematics::time_of_flight(b);
        prop_assert!((lhs - rhs).abs() <= 1e-15 * lhs.max(1e-9));
    }

    #[test]
    fn trajectory_is_physical(d in 2000.0f64..12_000.0, v in 10.0f64..80.0, line in any::<bool>()) {
        let cfg = if line { PassConfig::line(d, v, 60.0) } else { PassConfig::arc(d, v, 60.0) };
        for s in kinematics::generate_trajectory(&cfg).unwrap() {
            prop_assert!(s.range > 0.0);
            prop_assert!((-90.0..=90.0).contains(&s.elevation));
            prop_assert!((0.0..360.0).contains(&s.azimuth));
            prop_assert!(s.angular_speed >= 0.0);
            // Nothing moving at v can sweep faster than v over the range.
            prop_assert!(s.angular_speed <= (v / s.range).to_degrees() * 1.01);
        }
    }

    #[test]
    fn capture_fraction_is_a_probability_and_falls_with_jitter(
        w in 0.02f64..1.0, s1 in 0.0f64..2e-5, s2 in 0.0f64..2e-5, range in 1000.0f64..20_000.0, a in 0.01f64..0.3,
    ) {
        let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
        let c_lo = channel::capture_fraction(w, lo, range, a);
        let c_hi = channel::capture_fraction(w, hi, range, a);
        prop_assert!((0.0..=1.0).contains(&c_lo));
        prop_assert!(c_hi <= c_lo + 1e-12);
    }

    #[test]
    fn loss_grows_with_distance(d in 2000.0f64..9000.0, extra in 500.0f64..3000.0) {
        let loss = |d: f64| {
            let pass = PassConfig::arc(d, 50.0, 10.0);
            let s = kinematics::sample_at(&pass, 5.0);
            channel::total_loss(&s, pass.platform_altitude, &LinkBudgetParams::default()).loss_db
        };
        prop_assert!(loss(d) > 0.0);
        prop_assert!(loss(d + extra) > loss(d));
    }

    #[test]
    fn rotations_preserve_norm_and_invert(v in prop::array::uniform3(-3.0f64..3.0), s in prop::array::uniform3(-1.0f64..1.0)) {
        let r = BlochRotation::from_rotation_vector(v);
        let x = StokesVector::from_array(s);
        let y = r.apply(&x);
        prop_assert!((y.norm() - x.norm()).abs() < 1e-12);
        let back = r.inverse().apply(&y).as_array();
        for i in 0..3 {
            prop_assert!((back[i] - s[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn compensated_qber_never_negative(v in prop::array::uniform3(-2.0f64..2.0), eps in 0.0f64..0.3) {
        let targets = StokesVector::BB84;
        let drift = BlochRotation::from_rotation_vector(v);
        let recon = targets.map(|s| drift.apply(&s.depolarized(eps)));
        let fit = transmitter::optimize_triplet(&recon, &targets);
        let comp = recon.map(|s| fit.triplet.rotation().apply(&s));
        let q = transmitter::predicted_source_qber(&comp, &targets);
        prop_assert!(q >= -1e-12);
        prop_assert!(q <= eps / 2.0 + 1e-6);
    }

    #[test]
    fn sequence_is_deterministic(seed in any::<u64>()) {
        let cfg = SourceConfig::default();
        prop_assert_eq!(transmitter::sequence_table(&cfg, seed), transmitter::sequence_table(&cfg, seed));
    }

    #[test]
    fn toeplitz_is_linear(a in bits(200), b in bits(200), seed in bits(200 + 48 - 1)) {
        let ab: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x ^ y).collect();
        let ha = toeplitz::privacy_amplify(&a, 48, &seed).unwrap();
        let hb = toeplitz::privacy_amplify(&b, 48, &seed).unwrap();
        let hab = toeplitz::privacy_amplify(&ab, 48, &seed).unwrap();
        prop_assert_eq!(hab.len(), 48);
        let xor: Vec<u8> = ha.iter().zip(&hb).map(|(x, y)| x ^ y).collect();
        prop_assert_eq!(xor, hab);
    }

    #[test]
    fn toeplitz_paths_agree(key in bits(700), seed in bits(700 + 300 - 1), chunk in 64usize..512) {
        prop_assert_eq!(
            toeplitz::toeplitz_direct(&key, 300, &seed).unwrap(),
            toeplitz::toeplitz_fft(&key, 300, &seed, chunk)
        );
    }

    #[test]
    fn decoy_bounds_are_conservative(
        log_eta in -4.0f64..-0.3, log_y0 in -7.0f64..-4.0, mu in 0.3f64..0.9, frac in 0.05f64..0.5, e_det in 0.0f64..0.05,
    ) {
        let (eta, y0, nu) = (10f64.powf(log_eta), 10f64.powf(log_y0), mu * frac);
        let obs = oracle::exact_observables(mu, nu, eta, y0, e_det);
        let (y1, e1) = oracle::single_photon_truth(eta, y0, e_det);
        if let Ok(est) = decoy::decoy_bounds(&obs, mu, nu, 0.0) {
            prop_assert!(est.y1_lower <= y1 * (1.0 + 1e-9));
            prop_assert!(est.e1_upper >= e1 * (1.0 - 1e-9));
        }
    }

    #[test]
    fn idle_waits_for_position_data(e in event()) {
        let next = state_transition(PointingState::Idle, e);
        if e == PointingEvent::PositionDataReceived {
            prop_assert_eq!(next, PointingState::Searching);
        } else {
            prop_assert_eq!(next, PointingState::Idle);
        }
    }

    #[test]
    fn only_tracking_coasts(s in state(), e in event()) {
        let next = state_transition(s, e);
        if next == PointingState::Coasting && s != PointingState::Coasting {
            prop_assert_eq!(s, PointingState::Tracking);
        }
    }

    #[test]
    fn snr_filter_is_monotone(counts in prop::collection::vec(0u64..5000, 1..60), t1 in 0u64..5000, t2 in 0u64..5000) {
        let mut frames: Vec<FrameData> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| FrameData {
                frame_index: i as u64,
                total_counts: c,
                tally: ClassTally { detections: [c, 0, 0], sifted: [c / 2, 0, 0], errors: [c / 50, 0, 0] },
                ..Default::default()
            })
            .collect();
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let k_lo = sift::snr_filter(&mut frames, lo);
        let s_lo = sift::kept_tally(&frames).sifted[0];
        let k_hi = sift::snr_filter(&mut frames, hi);
        let s_hi = sift::kept_tally(&frames).sifted[0];
        prop_assert!(k_hi <= k_lo);
        prop_assert!(s_hi <= s_lo);
        prop_assert_eq!(sift::snr_filter(&mut frames, 0), frames.len());
    }
}
