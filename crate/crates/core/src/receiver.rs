//! Passive-basis polarization analyzer, single-photon detectors and time
//! tagging, plus the loss-aware sampler that decides which source slots
//! produce a click.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transmitter::{Basis, Intensity, PulseSchedule, SourceConfig, StokesVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Channel {
    H = 0,
    V = 1,
    D = 2,
    A = 3,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::H, Channel::V, Channel::D, Channel::A];

    pub fn from_u8(c: u8) -> Option<Channel> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn basis(self) -> Basis {
        match self {
            Channel::H | Channel::V => Basis::HV,
            Channel::D | Channel::A => Basis::DA,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Channel::H | Channel::D => 0,
            Channel::V | Channel::A => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzerConfig {
    /// Probability a photon takes the H/V arm.
    pub basis_split: f64,
    /// Extinction of each output port (H, V, D, A): a photon prepared in
    /// that port's state leaks to the partner port with probability
    /// `1/(1 + contrast)`.
    pub contrast: [f64; 4],
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            basis_split: 0.5,
            contrast: [2577.0, 1204.0, 532.0, 871.0],
        }
    }
}

impl AnalyzerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.basis_split) {
            return Err(Error::Config("basis_split must lie in [0,1]".into()));
        }
        if self.contrast.iter().any(|&c| !(c > 1.0)) {
            return Err(Error::Config("analyzer contrasts must exceed 1".into()));
        }
        Ok(())
    }

    fn floor(&self, c: Channel) -> f64 {
        1.0 / (1.0 + self.contrast[c as usize])
    }
}

/// Click probabilities for the four ports, summing to one.
pub fn channel_probabilities(state: &StokesVector, analyzer: &AnalyzerConfig) -> [f64; 4] {
    let pair = |plus: Channel, minus: Channel, s: f64| {
        let bp = 0.5 * (1.0 + s.clamp(-1.0, 1.0));
        let bm = 1.0 - bp;
        let p_plus = bp * (1.0 - analyzer.floor(plus)) + bm * analyzer.floor(minus);
        (p_plus, 1.0 - p_plus)
    };
    let (h, v) = pair(Channel::H, Channel::V, state.s1);
    let (d, a) = pair(Channel::D, Channel::A, state.s2);
    let b = analyzer.basis_split;
    [b * h, b * v, (1.0 - b) * d, (1.0 - b) * a]
}

pub fn measure_polarization<R: Rng>(state: &StokesVector, analyzer: &AnalyzerConfig, rng: &mut R) -> Channel {
    let p = channel_probabilities(state, analyzer);
    let mut u: f64 = rng.random();
    for c in Channel::ALL {
        u -= p[c as usize];
        if u < 0.0 {
            return c;
        }
    }
    Channel::A
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub efficiency: f64,
    pub dark_rate_per_detector: f64,
    pub dead_time: f64,
    pub timing_jitter_sigma: f64,
    pub tag_resolution: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            efficiency: 0.45,
            dark_rate_per_detector: 285.0 / 4.0,
            dead_time: 1e-6,
            timing_jitter_sigma: 0.5e-9,
            tag_resolution: 78.125e-12,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Config("detector efficiency must lie in (0,1]".into()));
        }
        if !(self.tag_resolution > 0.0) || self.dead_time < 0.0 || self.timing_jitter_sigma < 0.0 {
            return Err(Error::Config("detector timing parameters out of range".into()));
        }
        if self.dark_rate_per_detector < 0.0 {
            return Err(Error::Config("dark rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_tag(&self, t: f64) -> u64 {
        (t / self.tag_resolution).round().max(0.0) as u64
    }

    pub fn to_time(&self, tag: u64) -> f64 {
        tag as f64 * self.tag_resolution
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub tag: u64,
    pub channel: Channel,
}

/// A photon reaching the analyzer, on the receiver clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub state: StokesVector,
}

/// Turn arrivals into tagged clicks over `[start, end)`.
///
/// Each arrival survives with `path_efficiency`, is analyzed, and is
/// jittered. Background clicks are Poisson per detector with
/// `background_rate / 4` each. Dead time is non-paralyzable per detector.
pub fn detect_stream<R: Rng>(
    arrivals: &[Arrival],
    window: (f64, f64),
    path_efficiency: f64,
    background_rate: f64,
    analyzer: &AnalyzerConfig,
    detector: &DetectorConfig,
    rng: &mut R,
) -> Vec<DetectionEvent> {
    let (start, end) = window;
    let mut raw: Vec<(f64, Channel)> = Vec::with_capacity(arrivals.len() + 16);
    let jitter = (detector.timing_jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, detector.timing_jitter_sigma).expect("finite sigma"));
    for a in arrivals {
        if path_efficiency < 1.0 && rng.random::<f64>() >= path_efficiency {
            continue;
        }
        let c = measure_polarization(&a.state, analyzer, rng);
        let t = a.time + jitter.as_ref().map_or(0.0, |j| j.sample(rng));
        raw.push((t, c));
    }
    let per_detector = background_rate.max(0.0) / 4.0;
    if per_detector > 0.0 && end > start {
        for c in Channel::ALL {
            let n = Poisson::new(per_detector * (end - start)).expect("positive mean").sample(rng) as usize;
            for _ in 0..n {
                raw.push((start + rng.random::<f64>() * (end - start), c));
            }
        }
    }
    raw.retain(|(t, _)| *t >= start && *t < end);
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut last = [f64::NEG_INFINITY; 4];
    let mut out = Vec::with_capacity(raw.len());
    for (t, c) in raw {
        if t - last[c as usize] < detector.dead_time {
            continue;
        }
        last[c as usize] = t;
        out.push(DetectionEvent {
            tag: detector.to_tag(t),
            channel: c,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Loss-aware slot sampling
// ---------------------------------------------------------------------------

/// Click probability of a pulse with mean photon number `mean` through a
/// channel of transmittance `eta` (detector included).
pub fn click_probability(mean: f64, eta: f64) -> f64 {
    -(-mean * eta).exp_m1()
}

/// A source slot that produced at least one photon at the detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotHit {
    pub global_slot: u64,
    pub intensity: Intensity,
    pub label: usize,
}

/// Draw the slots in `[first, first + count)` that click, each independently
/// with `1 − exp(−m·η)` for its class.
///
/// Candidates are drawn as a Bernoulli process at the signal-class
/// probability by geometric gap skipping, then thinned to each slot's own
/// class probability. The cost scales with the number of clicks rather than
/// the number of slots.
pub fn sample_hits<R: Rng>(
    schedule: &PulseSchedule,
    source: &SourceConfig,
    first: u64,
    count: u64,
    eta: f64,
    rng: &mut R,
    out: &mut Vec<SlotHit>,
) {
    if count == 0 || !(eta > 0.0) {
        return;
    }
    let p_class = Intensity::ALL.map(|i| click_probability(source.mean_photons(i), eta.min(1.0)));
    let p_max = p_class.iter().cloned().fold(0.0, f64::max);
    if p_max <= 0.0 {
        return;
    }
    let log_q = (-p_max).ln_1p();
    let mut pos: u64 = 0;
    loop {
        let gap = if p_max >= 1.0 {
            0
        } else {
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / log_q).floor() as u64
        };
        pos = pos.saturating_add(gap);
        if pos >= count {
            break;
        }
        let g = first + pos;
        let spec = schedule.slot(g);
        let p = p_class[spec.intensity.index()];
        if p >= p_max || rng.random::<f64>() * p_max < p {
            out.push(SlotHit {
                global_slot: g,
                intensity: spec.intensity,
                label: spec.label(),
            });
        }
        pos += 1;
    }
}

/// Full-rate reference for `sample_hits`: every slot gets a Poisson photon
/// number and every photon survives independently with `eta`. Returns click
/// counts per intensity class.
pub fn brute_force_hits<R: Rng>(
    schedule: &PulseSchedule,
    source: &SourceConfig,
    first: u64,
    count: u64,
    eta: f64,
    rng: &mut R,
) -> [u64; 3] {
    // Photon-number CDFs truncated where the tail is below 1e-16.
    let cdfs = Intensity::ALL.map(|i| {
        let m = source.mean_photons(i);
        let mut cdf = Vec::new();
        let mut p = (-m).exp();
        let mut acc = 0.0;
        for n in 0..64 {
            if n > 0 {
                p *= m / n as f64;
            }
            acc += p;
            cdf.push(acc);
            if 1.0 - acc < 1e-16 {
                break;
            }
        }
        cdf
    });
    let mut counts = [0u64; 3];
    for g in first..first + count {
        let spec = schedule.slot(g);
        let cdf = &cdfs[spec.intensity.index()];
        let u: f64 = rng.random();
        let n = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len());
        if n == 0 {
            continue;
        }
        if (0..n).any(|_| rng.random::<f64>() < eta) {
            counts[spec.intensity.index()] += 1;
        }
    }
    counts
}
