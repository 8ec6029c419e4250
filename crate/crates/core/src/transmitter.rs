//! Decoy-state BB84 source and polarization compensation.
//!
//! The source emits one of three intensities (signal, decoy, vacuum) and one of
//! four BB84 polarizations per 2.5 ns slot, following a pseudorandom table that
//! repeats every `sequence_length` slots. Between the source and the telescope
//! the single-mode fiber applies a slowly drifting rotation of the Poincaré
//! sphere; a tomography arm reconstructs the four states once per second and a
//! quarter/half/quarter wave-plate triplet is re-optimized to undo the drift.
//!
//! Stokes convention: `s1 = +1` is H, `s2 = +1` is D, `s3 = +1` is R. A wave
//! plate with fast axis at `θ` and retardance `δ` uses the textbook Mueller
//! matrix, so a quarter-wave plate at 45° maps H to R.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// Fixed table of `sequence_length` slots, repeated.
    Repeating,
    /// Every slot drawn independently from a counter-based generator.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub clock_rate: f64,
    pub mu: f64,
    pub nu: f64,
    pub p_signal: f64,
    pub p_decoy: f64,
    pub p_vacuum: f64,
    pub sequence_length: usize,
    pub mode: SequenceMode,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            clock_rate: 4e8,
            mu: 0.5,
            nu: 0.1,
            p_signal: 0.80,
            p_decoy: 0.14,
            p_vacuum: 0.06,
            sequence_length: 1000,
            mode: SequenceMode::Repeating,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        let sum = self.p_signal + self.p_decoy + self.p_vacuum;
        if (sum - 1.0).abs() > 1e-9 || self.p_signal < 0.0 || self.p_decoy < 0.0 || self.p_vacuum < 0.0 {
            return Err(Error::Config(format!("intensity probabilities must sum to 1, got {sum}")));
        }
        if !(0.0 < self.nu && self.nu < self.mu) {
            return Err(Error::Config(format!("need 0 < nu < mu, got nu={} mu={}", self.nu, self.mu)));
        }
        if !(self.clock_rate > 0.0) {
            return Err(Error::Config("clock_rate must be positive".into()));
        }
        if self.sequence_length == 0 {
            return Err(Error::Config("sequence_length must be positive".into()));
        }
        Ok(())
    }

    pub fn slot_period(&self) -> f64 {
        1.0 / self.clock_rate
    }

    pub fn mean_photons(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Signal => self.mu,
            Intensity::Decoy => self.nu,
            Intensity::Vacuum => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Signal,
    Decoy,
    Vacuum,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Signal, Intensity::Decoy, Intensity::Vacuum];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
}

impl Basis {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// The four BB84 states in label order H, V, D, A.
pub const BB84_LABELS: [(Basis, u8); 4] = [(Basis::HV, 0), (Basis::HV, 1), (Basis::DA, 0), (Basis::DA, 1)];

pub fn bb84_label(basis: Basis, bit: u8) -> usize {
    basis.index() * 2 + bit as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StokesVector {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl StokesVector {
    pub const H: StokesVector = StokesVector { s1: 1.0, s2: 0.0, s3: 0.0 };
    pub const V: StokesVector = StokesVector { s1: -1.0, s2: 0.0, s3: 0.0 };
    pub const D: StokesVector = StokesVector { s1: 0.0, s2: 1.0, s3: 0.0 };
    pub const A: StokesVector = StokesVector { s1: 0.0, s2: -1.0, s3: 0.0 };
    pub const R: StokesVector = StokesVector { s1: 0.0, s2: 0.0, s3: 1.0 };
    pub const L: StokesVector = StokesVector { s1: 0.0, s2: 0.0, s3: -1.0 };
    pub const BB84: [StokesVector; 4] = [Self::H, Self::V, Self::D, Self::A];

    pub fn new(s1: f64, s2: f64, s3: f64) -> Self {
        StokesVector { s1, s2, s3 }
    }

    pub fn for_label(basis: Basis, bit: u8) -> Self {
        Self::BB84[bb84_label(basis, bit)]
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        StokesVector::new(a[0], a[1], a[2])
    }

    pub fn norm(&self) -> f64 {
        (self.s1 * self.s1 + self.s2 * self.s2 + self.s3 * self.s3).sqrt()
    }

    pub fn dot(&self, o: &StokesVector) -> f64 {
        self.s1 * o.s1 + self.s2 * o.s2 + self.s3 * o.s3
    }

    /// Shrink toward the maximally mixed state by `epsilon`.
    pub fn depolarized(&self, epsilon: f64) -> Self {
        self.scaled(1.0 - epsilon)
    }

    pub fn scaled(&self, k: f64) -> Self {
        StokesVector::new(self.s1 * k, self.s2 * k, self.s3 * k)
    }

    /// Project back into the unit ball.
    pub fn clipped(&self) -> Self {
        let n = self.norm();
        if n > 1.0 {
            self.scaled(1.0 / n)
        } else {
            *self
        }
    }

    /// Overlap with a pure target state, `(1 + r·t) / 2`.
    pub fn fidelity(&self, target: &StokesVector) -> f64 {
        0.5 * (1.0 + self.dot(target))
    }
}

/// Proper rotation of the Poincaré sphere, stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochRotation(pub [[f64; 3]; 3]);

impl BlochRotation {
    pub const IDENTITY: BlochRotation = BlochRotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rodrigues rotation from a rotation vector (axis times angle, radians).
    pub fn from_rotation_vector(v: [f64; 3]) -> Self {
        let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if angle < 1e-15 {
            return Self::IDENTITY;
        }
        let (x, y, z) = (v[0] / angle, v[1] / angle, v[2] / angle);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        BlochRotation([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    pub fn apply(&self, v: &StokesVector) -> StokesVector {
        let m = &self.0;
        let a = v.as_array();
        StokesVector::from_array([
            m[0][0] * a[0] + m[0][1] * a[1] + m[0][2] * a[2],
            m[1][0] * a[0] + m[1][1] * a[1] + m[1][2] * a[2],
            m[2][0] * a[0] + m[2][1] * a[1] + m[2][2] * a[2],
        ])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &BlochRotation) -> BlochRotation {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        BlochRotation(out)
    }

    pub fn inverse(&self) -> BlochRotation {
        let m = &self.0;
        BlochRotation([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }
}

/// Mueller rotation of a linear retarder (retardance and fast-axis angle in
/// degrees).
pub fn waveplate_rotation(retardance_deg: f64, angle_deg: f64) -> BlochRotation {
    let (s, c) = (2.0 * angle_deg.to_radians()).sin_cos();
    let (sd, cd) = retardance_deg.to_radians().sin_cos();
    BlochRotation([
        [c * c + s * s * cd, c * s * (1.0 - cd), -s * sd],
        [c * s * (1.0 - cd), s * s + c * c * cd, c * sd],
        [s * sd, -c * sd, cd],
    ])
}

pub fn apply_waveplate(state: &StokesVector, retardance_deg: f64, angle_deg: f64) -> StokesVector {
    waveplate_rotation(retardance_deg, angle_deg).apply(state)
}

/// Quarter, half, quarter wave plate fast-axis angles in degrees, in the order
/// light traverses them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WaveplateTriplet {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl WaveplateTriplet {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        WaveplateTriplet {
            alpha: alpha.rem_euclid(180.0),
            beta: beta.rem_euclid(180.0),
            gamma: gamma.rem_euclid(180.0),
        }
    }

    pub fn rotation(&self) -> BlochRotation {
        waveplate_rotation(90.0, self.gamma)
            .compose(&waveplate_rotation(180.0, self.beta))
            .compose(&waveplate_rotation(90.0, self.alpha))
    }
}

// ---------------------------------------------------------------------------
// Pulse sequence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub intensity: Intensity,
    pub basis: Basis,
    pub bit: u8,
}

impl SlotSpec {
    pub fn label(&self) -> usize {
        bb84_label(self.basis, self.bit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSlot {
    pub slot_index: u64,
    pub intensity: Intensity,
    pub basis: Basis,
    pub bit: u8,
    pub polarization: StokesVector,
}

/// Build the repeating table: exact intensity proportions and balanced
/// basis/bit within each intensity class, then shuffled by `seed`.
pub fn sequence_table(config: &SourceConfig, seed: u64) -> Vec<SlotSpec> {
    let n = config.sequence_length;
    let n_sig = (config.p_signal * n as f64).round() as usize;
    let n_dec = ((config.p_decoy * n as f64).round() as usize).min(n - n_sig.min(n));
    let n_vac = n - n_sig.min(n) - n_dec;
    let mut rng = rng::stream(seed, "sequence", 0);
    let mut slots = Vec::with_capacity(n);
    for (intensity, count) in [
        (Intensity::Signal, n_sig.min(n)),
        (Intensity::Decoy, n_dec),
        (Intensity::Vacuum, n_vac),
    ] {
        // Start the label cycle at a random offset so remainders do not
        // always favour H.
        let start: usize = rng.random_range(0..4);
        let mut labels: Vec<usize> = (0..count).map(|i| (i + start) % 4).collect();
        labels.shuffle(&mut rng);
        for l in labels {
            let (basis, bit) = BB84_LABELS[l];
            slots.push(SlotSpec { intensity, basis, bit });
        }
    }
    slots.shuffle(&mut rng);
    slots
}

/// Counter-based draw for a single slot in random mode.
pub fn random_slot(config: &SourceConfig, seed: u64, global_index: u64) -> SlotSpec {
    let h = rng::derive_seed(seed, "slot", global_index);
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    let intensity = if u < config.p_signal {
        Intensity::Signal
    } else if u < config.p_signal + config.p_decoy {
        Intensity::Decoy
    } else {
        Intensity::Vacuum
    };
    let (basis, bit) = BB84_LABELS[(h & 3) as usize];
    SlotSpec { intensity, basis, bit }
}

/// Slot assignment for any global slot index.
#[derive(Debug, Clone, PartialEq)]
pub enum PulseSchedule {
    Repeating(Vec<SlotSpec>),
    Random { config: SourceConfig, seed: u64 },
}

impl PulseSchedule {
    pub fn new(config: &SourceConfig, seed: u64) -> Self {
        match config.mode {
            SequenceMode::Repeating => PulseSchedule::Repeating(sequence_table(config, seed)),
            SequenceMode::Random => PulseSchedule::Random {
                config: config.clone(),
                seed,
            },
        }
    }

    pub fn slot(&self, global_index: u64) -> SlotSpec {
        match self {
            PulseSchedule::Repeating(t) => t[(global_index % t.len() as u64) as usize],
            PulseSchedule::Random { config, seed } => random_slot(config, *seed, global_index),
        }
    }

    /// Ambiguity period in slots; `None` when the schedule never repeats.
    pub fn period(&self) -> Option<u64> {
        match self {
            PulseSchedule::Repeating(t) => Some(t.len() as u64),
            PulseSchedule::Random { .. } => None,
        }
    }
}

/// The first `sequence_length` slots with their ideal polarizations.
pub fn generate_sequence(config: &SourceConfig, seed: u64) -> Vec<PulseSlot> {
    let schedule = PulseSchedule::new(config, seed);
    (0..config.sequence_length as u64)
        .map(|i| {
            let s = schedule.slot(i);
            PulseSlot {
                slot_index: i,
                intensity: s.intensity,
                basis: s.basis,
                bit: s.bit,
                polarization: StokesVector::for_label(s.basis, s.bit),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fiber drift
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    /// Correlation time of the rotation-vector random walk, s.
    pub correlation_time: f64,
    /// Stationary RMS of each rotation-vector component, degrees.
    pub sigma_deg: f64,
    /// Integration step, s.
    pub step: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            correlation_time: 300.0,
            sigma_deg: 30.0,
            step: 1.0,
        }
    }
}

/// Rotation-vector path of the fiber: an Ornstein–Uhlenbeck walk started at
/// the identity (calibration epoch at t = 0).
#[derive(Debug, Clone)]
pub struct FiberDrift {
    config: DriftConfig,
    path: Vec<[f64; 3]>,
}

impl FiberDrift {
    pub fn new(config: DriftConfig, seed: u64, horizon: f64) -> Self {
        let steps = (horizon.max(0.0) / config.step).ceil() as usize + 2;
        let mut rng = rng::stream(seed, "fiber", 0);
        let tau = config.correlation_time;
        let (decay, kick) = if tau.is_finite() && tau > 0.0 {
            let d = (-config.step / tau).exp();
            (d, config.sigma_deg.to_radians() * (1.0 - d * d).sqrt())
        } else {
            (1.0, 0.0)
        };
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut path = Vec::with_capacity(steps);
        let mut x = [0.0; 3];
        path.push(x);
        for _ in 1..steps {
            for c in x.iter_mut() {
                *c = *c * decay + kick * normal.sample(&mut rng);
            }
            path.push(x);
        }
        FiberDrift { config, path }
    }

    pub fn rotation_at(&self, t: f64) -> BlochRotation {
        let pos = (t.max(0.0) / self.config.step).min((self.path.len() - 1) as f64);
        let i = pos.floor() as usize;
        let j = (i + 1).min(self.path.len() - 1);
        let f = pos - i as f64;
        let (a, b) = (self.path[i], self.path[j]);
        BlochRotation::from_rotation_vector([
            a[0] + (b[0] - a[0]) * f,
            a[1] + (b[1] - a[1]) * f,
            a[2] + (b[2] - a[2]) * f,
        ])
    }
}

pub fn fiber_unitary_drift(t: f64, seed: u64, config: &DriftConfig) -> BlochRotation {
    FiberDrift::new(config.clone(), seed, t).rotation_at(t)
}

// ---------------------------------------------------------------------------
// Tomography
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TomographyCounts {
    pub h: f64,
    pub v: f64,
    pub d: f64,
    pub a: f64,
    pub r: f64,
    pub l: f64,
}

pub fn tomography(counts: &TomographyCounts) -> Result<StokesVector> {
    let pairs = [
        ("H/V", counts.h, counts.v),
        ("D/A", counts.d, counts.a),
        ("R/L", counts.r, counts.l),
    ];
    let mut s = [0.0; 3];
    for (i, (basis, plus, minus)) in pairs.into_iter().enumerate() {
        if plus < 0.0 || minus < 0.0 {
            return Err(Error::InvalidArgument(format!("negative counts in {basis}")));
        }
        let total = plus + minus;
        if total <= 0.0 {
            return Err(Error::EmptyTomographyBasis { basis });
        }
        s[i] = (plus - minus) / total;
    }
    Ok(StokesVector::from_array(s).clipped())
}

/// Poisson-sampled projector counts with `mean_per_basis` expected counts in
/// each of the three bases.
pub fn simulate_tomography_counts<R: Rng>(state: &StokesVector, mean_per_basis: f64, rng: &mut R) -> TomographyCounts {
    let mut draw = |p: f64| {
        let m = (mean_per_basis * p).max(0.0);
        if m == 0.0 {
            0.0
        } else {
            Poisson::new(m).expect("positive mean").sample(rng)
        }
    };
    let a = state.as_array();
    TomographyCounts {
        h: draw(0.5 * (1.0 + a[0])),
        v: draw(0.5 * (1.0 - a[0])),
        d: draw(0.5 * (1.0 + a[1])),
        a: draw(0.5 * (1.0 - a[1])),
        r: draw(0.5 * (1.0 + a[2])),
        l: draw(0.5 * (1.0 - a[2])),
    }
}

// ---------------------------------------------------------------------------
// Wave-plate optimization
// ---------------------------------------------------------------------------

pub const GRID_PITCH_DEG: f64 = 10.0;
pub const REFINE_TOLERANCE_DEG: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletFit {
    pub triplet: WaveplateTriplet,
    pub mean_fidelity: f64,
    pub converged: bool,
}

/// Mean fidelity objective, reduced to a 3x3 correlation so each evaluation is
/// nine multiply-adds.
struct Objective {
    k: [[f64; 3]; 3],
    n: f64,
}

impl Objective {
    fn new(reconstructed: &[StokesVector], targets: &[StokesVector]) -> Self {
        let mut k = [[0.0; 3]; 3];
        for (r, t) in reconstructed.iter().zip(targets) {
            let (ra, ta) = (r.as_array(), t.as_array());
            for i in 0..3 {
                for j in 0..3 {
                    k[i][j] += ta[i] * ra[j];
                }
            }
        }
        Objective {
            k,
            n: reconstructed.len().max(1) as f64,
        }
    }

    fn fidelity_of(&self, m: &BlochRotation) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += m.0[i][j] * self.k[i][j];
            }
        }
        0.5 * (1.0 + acc / self.n)
    }

    fn eval(&self, t: &WaveplateTriplet) -> f64 {
        self.fidelity_of(&t.rotation())
    }
}

pub fn mean_fidelity(states: &[StokesVector], targets: &[StokesVector]) -> f64 {
    let n = states.len().max(1) as f64;
    states.iter().zip(targets).map(|(s, t)| s.fidelity(t)).sum::<f64>() / n
}

/// Pattern search from `start`: poll the 26 neighbours of the current point
/// at the current step, follow a successful direction while it keeps
/// improving, halve the step when nothing improves.
fn refine(obj: &Objective, start: WaveplateTriplet, initial_step: f64) -> (WaveplateTriplet, f64, bool) {
    let mut dirs = Vec::with_capacity(26);
    for a in -1..=1 {
        for b in -1..=1 {
            for c in -1..=1 {
                if (a, b, c) != (0, 0, 0) {
                    dirs.push([a as f64, b as f64, c as f64]);
                }
            }
        }
    }
    let shifted = |t: &WaveplateTriplet, d: &[f64; 3], h: f64| {
        WaveplateTriplet::new(t.alpha + d[0] * h, t.beta + d[1] * h, t.gamma + d[2] * h)
    };
    let mut best = start;
    let mut best_f = obj.eval(&best);
    let mut step = initial_step;
    let mut polls = 0;
    while step >= REFINE_TOLERANCE_DEG {
        polls += 1;
        if polls > 5_000 {
            return (best, best_f, false);
        }
        let mut winner: Option<(usize, f64)> = None;
        for (i, d) in dirs.iter().enumerate() {
            let f = obj.eval(&shifted(&best, d, step));
            if f > best_f + 1e-15 && winner.is_none_or(|(_, wf)| f > wf) {
                winner = Some((i, f));
            }
        }
        match winner {
            Some((i, f)) => {
                best = shifted(&best, &dirs[i], step);
                best_f = f;
                loop {
                    let next = shifted(&best, &dirs[i], step);
                    let nf = obj.eval(&next);
                    if nf > best_f + 1e-15 {
                        best = next;
                        best_f = nf;
                    } else {
                        break;
                    }
                }
            }
            None => step *= 0.5,
        }
    }
    (best, best_f, true)
}

/// Maximize the mean fidelity of the compensated states: 10° grid over all
/// three angles, then coordinate refinement to 0.01° from the best few grid
/// points.
pub fn optimize_triplet(reconstructed: &[StokesVector; 4], targets: &[StokesVector; 4]) -> TripletFit {
    let obj = Objective::new(reconstructed, targets);
    let n = (180.0 / GRID_PITCH_DEG).round() as usize;
    let angles: Vec<f64> = (0..n).map(|i| i as f64 * GRID_PITCH_DEG).collect();
    let quarter: Vec<BlochRotation> = angles.iter().map(|&a| waveplate_rotation(90.0, a)).collect();
    let half: Vec<BlochRotation> = angles.iter().map(|&a| waveplate_rotation(180.0, a)).collect();

    let mut scored: Vec<(f64, WaveplateTriplet)> = Vec::with_capacity(n * n * n);
    for (gi, qg) in quarter.iter().enumerate() {
        for (bi, hb) in half.iter().enumerate() {
            let gh = qg.compose(hb);
            for (ai, qa) in quarter.iter().enumerate() {
                let f = obj.fidelity_of(&gh.compose(qa));
                scored.push((f, WaveplateTriplet::new(angles[ai], angles[bi], angles[gi])));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let identity_f = obj.eval(&WaveplateTriplet::default());
    let mut best = TripletFit {
        triplet: WaveplateTriplet::default(),
        mean_fidelity: identity_f,
        converged: false,
    };
    for (_, start) in scored.iter().take(4) {
        let (t, f, ok) = refine(&obj, *start, GRID_PITCH_DEG / 2.0);
        if f > best.mean_fidelity || (!best.converged && ok && f >= best.mean_fidelity) {
            best = TripletFit {
                triplet: t,
                mean_fidelity: f,
                converged: ok,
            };
        }
    }
    best
}

/// Local refinement only, for tracking a slowly moving optimum.
pub fn refine_triplet(
    reconstructed: &[StokesVector; 4],
    targets: &[StokesVector; 4],
    start: WaveplateTriplet,
) -> TripletFit {
    let obj = Objective::new(reconstructed, targets);
    let (triplet, mean_fidelity, converged) = refine(&obj, start, 2.0);
    TripletFit {
        triplet,
        mean_fidelity,
        converged,
    }
}

pub fn predicted_source_qber(compensated: &[StokesVector], targets: &[StokesVector]) -> f64 {
    1.0 - mean_fidelity(compensated, targets)
}

// ---------------------------------------------------------------------------
// Per-second compensation loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompensationConfig {
    pub drift: DriftConfig,
    /// Intrinsic depolarization of the emitted states (error floor).
    pub depolarization: f64,
    /// Expected tomography counts per basis per state per update.
    pub tomography_counts: f64,
    /// Fidelity below which a full grid search replaces local refinement.
    pub regrid_threshold: f64,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        CompensationConfig {
            drift: DriftConfig::default(),
            depolarization: 0.06,
            tomography_counts: 1e5,
            regrid_threshold: 0.98,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationSnapshot {
    pub second: u64,
    pub triplet: WaveplateTriplet,
    /// True states leaving the telescope for labels H, V, D, A.
    pub emitted: [StokesVector; 4],
    pub predicted_qber: f64,
}

/// Runs tomography and triplet optimization once per second. Each second's
/// pulses go through the triplet computed from the previous second.
#[derive(Debug, Clone)]
pub struct PolarizationCompensator {
    config: CompensationConfig,
    drift: FiberDrift,
    seed: u64,
    triplet: WaveplateTriplet,
}

impl PolarizationCompensator {
    pub fn new(config: CompensationConfig, seed: u64, horizon: f64) -> Self {
        let drift = FiberDrift::new(config.drift.clone(), seed, horizon + 2.0);
        PolarizationCompensator {
            config,
            drift,
            seed,
            triplet: WaveplateTriplet::default(),
        }
    }

    fn prepared(&self, t: f64) -> [StokesVector; 4] {
        let rot = self.drift.rotation_at(t);
        StokesVector::BB84.map(|s| rot.apply(&s.depolarized(self.config.depolarization)))
    }

    pub fn step(&mut self, second: u64) -> CompensationSnapshot {
        let t = second as f64;
        let before = self.prepared(t);
        let applied = self.triplet.rotation();
        let emitted = before.map(|s| applied.apply(&s));

        let mut rng = rng::stream(self.seed, "tomography", second);
        let recon = before.map(|s| {
            tomography(&simulate_tomography_counts(&s, self.config.tomography_counts, &mut rng))
                .unwrap_or_default()
        });
        let targets = StokesVector::BB84;
        let local = refine_triplet(&recon, &targets, self.triplet);
        let fit = if local.mean_fidelity < self.config.regrid_threshold {
            let global = optimize_triplet(&recon, &targets);
            if global.mean_fidelity > local.mean_fidelity {
                global
            } else {
                local
            }
        } else {
            local
        };
        self.triplet = fit.triplet;
        let rot = fit.triplet.rotation();
        let compensated = recon.map(|s| rot.apply(&s));
        CompensationSnapshot {
            second,
            triplet: fit.triplet,
            emitted,
            predicted_qber: predicted_source_qber(&compensated, &targets),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &StokesVector, b: &StokesVector, tol: f64) -> bool {
        (a.s1 - b.s1).abs() < tol && (a.s2 - b.s2).abs() < tol && (a.s3 - b.s3).abs() < tol
    }

    #[test]
    fn textbook_waveplates() {
        assert!(close(&apply_waveplate(&StokesVector::H, 180.0, 22.5), &StokesVector::D, 1e-12));
        assert!(close(&apply_waveplate(&StokesVector::H, 90.0, 45.0), &StokesVector::R, 1e-12));
        assert_eq!(WaveplateTriplet::default().rotation().apply(&StokesVector::D).s2.round(), 1.0);
    }

    #[test]
    fn plates_preserve_norm() {
        let s = StokesVector::new(0.3, -0.5, 0.81).clipped();
        for (r, a) in [(90.0, 13.0), (180.0, 77.7), (37.0, 120.0)] {
            let o = apply_waveplate(&s, r, a);
            assert!((o.norm() - s.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_is_deterministic_and_balanced() {
        let cfg = SourceConfig::default();
        let a = generate_sequence(&cfg, 42);
        assert_eq!(a, generate_sequence(&cfg, 42));
        assert_ne!(a, generate_sequence(&cfg, 43));
        assert_eq!(a.len(), 1000);
        let frac = |i: Intensity| a.iter().filter(|s| s.intensity == i).count() as f64 / 1000.0;
        assert!((frac(Intensity::Signal) - 0.80).abs() <= 0.03);
        assert!((frac(Intensity::Decoy) - 0.14).abs() <= 0.03);
        assert!((frac(Intensity::Vacuum) - 0.06).abs() <= 0.03);
        let hv = a.iter().filter(|s| s.basis == Basis::HV).count() as f64 / 1000.0;
        assert!((hv - 0.5).abs() <= 0.05);
    }

    #[test]
    fn random_mode_is_counter_based() {
        let cfg = SourceConfig {
            mode: SequenceMode::Random,
            ..SourceConfig::default()
        };
        let s = PulseSchedule::new(&cfg, 9);
        assert_eq!(s.slot(123_456_789), s.slot(123_456_789));
        assert_eq!(s.period(), None);
        let n = 100_000u64;
        let sig = (0..n).filter(|&i| s.slot(i).intensity == Intensity::Signal).count() as f64;
        assert!((sig / n as f64 - 0.8).abs() < 0.01);
    }

    #[test]
    fn config_validation() {
        let mut c = SourceConfig::default();
        assert!(c.validate().is_ok());
        c.p_vacuum = 0.1;
        assert!(c.validate().is_err());
        let c = SourceConfig {
            nu: 0.6,
            ..SourceConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn drift_starts_at_identity_and_freezes_without_decorrelation() {
        let cfg = DriftConfig::default();
        assert_eq!(fiber_unitary_drift(0.0, 5, &cfg), BlochRotation::IDENTITY);
        let frozen = DriftConfig {
            correlation_time: f64::INFINITY,
            ..cfg
        };
        let d = FiberDrift::new(frozen, 5, 100.0);
        assert_eq!(d.rotation_at(10.0), d.rotation_at(90.0));
    }

    #[test]
    fn drift_is_an_isometry() {
        let d = FiberDrift::new(DriftConfig::default(), 3, 600.0);
        let r = d.rotation_at(437.5);
        let out = StokesVector::BB84.map(|s| r.apply(&s));
        for i in 0..4 {
            for j in 0..4 {
                let before = StokesVector::BB84[i].dot(&StokesVector::BB84[j]);
                assert!((out[i].dot(&out[j]) - before).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tomography_examples() {
        let perfect_h = TomographyCounts {
            h: 1000.0,
            v: 0.0,
            d: 500.0,
            a: 500.0,
            r: 500.0,
            l: 500.0,
        };
        assert_eq!(tomography(&perfect_h).unwrap(), StokesVector::H);
        let mixed = TomographyCounts {
            h: 7.0,
            v: 7.0,
            d: 7.0,
            a: 7.0,
            r: 7.0,
            l: 7.0,
        };
        assert_eq!(tomography(&mixed).unwrap(), StokesVector::default());
        let empty = TomographyCounts { d: 0.0, a: 0.0, ..perfect_h };
        assert!(matches!(tomography(&empty), Err(Error::EmptyTomographyBasis { basis: "D/A" })));
    }

    #[test]
    fn tomography_statistical_accuracy() {
        let mut rng = rng::stream(17, "test", 0);
        for _ in 0..50 {
            let v = StokesVector::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = v.scaled(1.0 / v.norm());
            let r = tomography(&simulate_tomography_counts(&s, 1e5, &mut rng)).unwrap();
            let err = StokesVector::new(r.s1 - s.s1, r.s2 - s.s2, r.s3 - s.s3).norm();
            assert!(err < 0.02, "{err}");
        }
    }

    /// Closed-form triplet from a ZYZ Euler decomposition: with Rz(a)Ry(b)Rz(c)
    /// equal to the target, QWP(α)·HWP(β)·QWP(γ) realizes it for γ = a/2,
    /// α = −c/2, β = (a + b − c)/4.
    fn analytic_triplet(target: &BlochRotation) -> WaveplateTriplet {
        let m = &target.0;
        let b = m[2][2].clamp(-1.0, 1.0).acos();
        let (a, c) = if b.sin().abs() > 1e-9 {
            (m[1][2].atan2(m[0][2]), m[2][1].atan2(-m[2][0]))
        } else {
            (m[1][0].atan2(m[0][0]), 0.0)
        };
        let (a, b, c) = (a.to_degrees(), b.to_degrees(), c.to_degrees());
        WaveplateTriplet::new(-c / 2.0, (a + b - c) / 4.0, a / 2.0)
    }

    fn random_rotation<R: Rng>(rng: &mut R) -> BlochRotation {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        BlochRotation::from_rotation_vector(v.map(|x| x / n * angle))
    }

    #[test]
    fn analytic_oracle_matches_optimizer() {
        let mut rng = rng::stream(99, "oracle", 0);
        for _ in 0..100 {
            let drift = random_rotation(&mut rng);
            let recon = StokesVector::BB84.map(|s| drift.apply(&s));
            let exact = analytic_triplet(&drift.inverse());
            let back = exact.rotation().compose(&drift);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((back.0[i][j] - want).abs() < 1e-9);
                }
            }
            let fit = optimize_triplet(&recon, &StokesVector::BB84);
            assert!(fit.converged);
            assert!(fit.mean_fidelity >= 0.9999, "{}", fit.mean_fidelity);
        }
    }

    #[test]
    fn identity_drift_gives_identity_triplet() {
        let fit = optimize_triplet(&StokesVector::BB84, &StokesVector::BB84);
        assert!((fit.mean_fidelity - 1.0).abs() < 1e-12);
        let r = fit.triplet.rotation();
        for s in StokesVector::BB84 {
            assert!(close(&r.apply(&s), &s, 1e-6));
        }
    }

    #[test]
    fn depolarized_fidelity_and_qber() {
        let drift = fiber_unitary_drift(250.0, 8, &DriftConfig::default());
        let recon = StokesVector::BB84.map(|s| drift.apply(&s.depolarized(0.02)));
        let fit = optimize_triplet(&recon, &StokesVector::BB84);
        assert!((fit.mean_fidelity - 0.99).abs() < 1e-4);
        let comp = recon.map(|s| fit.triplet.rotation().apply(&s));
        let q = predicted_source_qber(&comp, &StokesVector::BB84);
        assert!((q - (1.0 - fit.mean_fidelity)).abs() < 1e-12);
        assert!((q - 0.01).abs() < 1e-4);
    }

    #[test]
    fn qber_from_configured_infidelity() {
        assert_eq!(predicted_source_qber(&StokesVector::BB84, &StokesVector::BB84), 0.0);
        let worse = StokesVector::BB84.map(|s| s.depolarized(0.06));
        assert!((predicted_source_qber(&worse, &StokesVector::BB84) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn compensator_tracks_drift() {
        let mut c = PolarizationCompensator::new(CompensationConfig::default(), 21, 120.0);
        let mut worst: f64 = 0.0;
        for s in 0..120 {
            let snap = c.step(s);
            if s > 0 {
                let q = predicted_source_qber(&snap.emitted, &StokesVector::BB84);
                worst = worst.max(q);
                assert!(snap.predicted_qber > 0.025 && snap.predicted_qber < 0.04, "{}", snap.predicted_qber);
            }
        }
        assert!(worst < 0.05, "{worst}");
    }
}
