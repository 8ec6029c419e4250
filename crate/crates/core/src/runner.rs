//! Whole-pass orchestration, run summaries and comparison with the bundled
//! reference passes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{self, LinkBudgetParams, LinkSample};
use crate::distill::pipeline::{self, DistillConfig, DistillInputs, DistillReport};
use crate::error::{Error, Result};
use crate::io::{self, EpochMarker, SourceLogWriter, SourceSidecar, TimeTagWriter};
use crate::kinematics::{self, PassConfig, PassKind};
use crate::pointing::{self, AcquisitionConfig, AcquisitionResult};
use crate::receiver::{self, AnalyzerConfig, Arrival, DetectorConfig};
use crate::rng;
use crate::transmitter::{CompensationConfig, Intensity, PolarizationCompensator, PulseSchedule, SequenceMode, SourceConfig};

pub const CONFIG_VERSION: u32 = 1;

/// The reference passes, transcribed from the paper's pass table.
pub const TABLE1_JSON: &str = include_str!("../reference/table1.json");

/// One seed per stochastic subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// GPS noise on the exchanged positions.
    pub trajectory: u64,
    pub pointing: u64,
    /// Scintillation.
    pub channel: u64,
    /// Pulse sequence.
    pub source: u64,
    /// Fiber drift and tomography.
    pub compensation: u64,
    /// Photon and background detection.
    pub detection: u64,
    /// LDPC construction, hashing and privacy amplification.
    pub distill: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let d = |tag| rng::derive_seed(master, tag, 0);
        Seeds {
            trajectory: d("seed/trajectory"),
            pointing: d("seed/pointing"),
            channel: d("seed/channel"),
            source: d("seed/source"),
            compensation: d("seed/compensation"),
            detection: d("seed/detection"),
            distill: d("seed/distill"),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_master(0)
    }
}

/// Receiver clock relative to the source clock: `t_rx = t + offset + drift·t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockConfig {
    pub offset: f64,
    pub drift: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig { offset: 0.4e-6, drift: 3e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub pass_id: String,
    /// Free-text start time carried into the summary.
    pub utc_start: Option<String>,
    pub pass: PassConfig,
    pub link: LinkBudgetParams,
    pub source: SourceConfig,
    pub compensation: CompensationConfig,
    pub analyzer: AnalyzerConfig,
    pub detector: DetectorConfig,
    pub clock: ClockConfig,
    pub pointing: AcquisitionConfig,
    pub distill: DistillConfig,
    /// Replaces `distill.snr_threshold`. When unset the rule
    /// `max(1000, 5 × background counts per frame)` applies.
    pub snr_threshold: Option<u64>,
    /// `[start, end)` in pass time during which beacons can be seen. The
    /// position exchange happens at `start`; `None` means the whole pass.
    pub quantum_window: Option<[f64; 2]>,
    /// Add a constant loss so the mean over link-up seconds equals this.
    pub pin_mean_loss_db: Option<f64>,
    /// Extra depolarization applied to the emitted states after
    /// compensation (fault injection).
    pub extra_depolarization: f64,
    /// Block the quantum signal; beacons and detectors keep running.
    pub quantum_link_off: bool,
    pub seeds: Seeds,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            pass_id: "custom".into(),
            utc_start: None,
            pass: PassConfig::arc(5000.0, 200.0 / 3.6, 60.0),
            link: LinkBudgetParams::default(),
            source: SourceConfig::default(),
            compensation: CompensationConfig::default(),
            analyzer: AnalyzerConfig::default(),
            detector: DetectorConfig::default(),
            clock: ClockConfig::default(),
            pointing: AcquisitionConfig::default(),
            distill: DistillConfig::default(),
            snr_threshold: None,
            quantum_window: None,
            pin_mean_loss_db: None,
            extra_depolarization: 0.0,
            quantum_link_off: false,
            seeds: Seeds::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.pass.validate()?;
        if self.pass.kind == PassKind::Satellite {
            return Err(Error::Config("full-pass runs support aircraft passes only".into()));
        }
        self.link.validate()?;
        self.source.validate()?;
        self.analyzer.validate()?;
        self.detector.validate()?;
        self.pointing.validate()?;
        if let Some([a, b]) = self.quantum_window {
            if !(0.0 <= a && a < b) {
                return Err(Error::Config("quantum_window must satisfy 0 ≤ start < end".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.extra_depolarization) {
            return Err(Error::Config("extra_depolarization must lie in [0, 1]".into()));
        }
        if self.distill.ec.block_length == 0 {
            return Err(Error::Config("EC block length must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_snr_threshold(&self) -> u64 {
        self.snr_threshold.unwrap_or_else(|| {
            let bg = self.link.background_rate();
            (1000.0f64).max(5.0 * bg).round() as u64
        })
    }

    /// Override every subsystem seed from one master seed.
    pub fn reseed(&mut self, master: u64) {
        self.seeds = Seeds::from_master(master);
    }
}

/// One pass in the layout of the paper's pass table. Pointing errors are in
/// degrees, QBERs in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub pass_id: String,
    pub utc_start: Option<String>,
    pub classical_link_duration_s: f64,
    pub quantum_link_duration_s: f64,
    pub mean_speed_kmh: f64,
    pub max_angular_speed_deg_s: f64,
    pub tx_pointing_error_deg: Option<f64>,
    pub rx_pointing_error_deg: Option<f64>,
    pub rx_fine_pointing_error_deg: Option<f64>,
    pub source_qber_pct: Option<f64>,
    pub signal_qber_pct: Option<f64>,
    pub decoy_qber_pct: Option<f64>,
    /// Range of the model loss over link-up seconds, without loss pinning.
    pub theoretical_loss_db: Option<[f64; 2]>,
    /// From the signal-class gain in kept frames, background removed.
    pub mean_measured_loss_db: Option<f64>,
    /// Mean link-CSV loss over the same kept frames.
    pub link_model_loss_db: Option<f64>,
    pub ec_efficiency: Option<f64>,
    pub snr_threshold: u64,
    pub sifted_key_bits: u64,
    /// `None` when no key could be extracted.
    pub secure_key_bits: Option<u64>,
    pub finite_size: bool,
    pub time_to_lock_s: Option<f64>,
}

impl PassSummary {
    pub fn check_invariants(&self) -> Result<()> {
        if self.quantum_link_duration_s > self.classical_link_duration_s {
            return Err(Error::InvalidArgument("quantum link longer than classical link".into()));
        }
        if self.secure_key_bits.is_some_and(|s| s > self.sifted_key_bits) {
            return Err(Error::InvalidArgument("secure key longer than sifted key".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PassOutcome {
    pub summary: PassSummary,
    pub report: DistillReport,
    pub acquisition: AcquisitionResult,
    pub link: Vec<LinkSample>,
    pub final_key: Vec<u8>,
    pub dir: PathBuf,
}

impl PassOutcome {
    /// Process exit code: 2 when the quantum link never came up, 3 when no
    /// key was produced, 0 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.summary.quantum_link_duration_s <= 0.0 {
            2
        } else if self.summary.secure_key_bits.is_none() {
            3
        } else {
            0
        }
    }
}

fn write_csv(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = io::create(path)?;
    f(&mut w).and_then(|()| std::io::Write::flush(&mut w)).map_err(|e| Error::io(path, e))
}

/// Slots per second of emission time, `[first, end)`, for receiver frame `i`.
/// Boundaries are where the receiver clock crosses whole seconds, so
/// consecutive frames tile the slot axis.
fn frame_slot_bounds(cfg: &RunConfig, i: u64) -> (u64, u64) {
    let rate = cfg.source.clock_rate;
    let boundary = |k: u64| -> u64 {
        let tr = k as f64;
        // Invert t_rx = (t + tof(t))·(1 + drift) + offset by fixed point.
        let mut t = tr;
        for _ in 0..4 {
            let tof = kinematics::time_of_flight(kinematics::sample_at(&cfg.pass, t.max(0.0)).range);
            t = (tr - cfg.clock.offset) / (1.0 + cfg.clock.drift) - tof;
        }
        (t.max(0.0) * rate).ceil() as u64
    };
    (boundary(i), boundary(i + 1))
}

/// Time-of-flight samples across one emission second for interpolation.
fn tof_grid(pass: &PassConfig, t0: f64, t1: f64) -> Vec<(f64, f64)> {
    const POINTS: usize = 101;
    (0..POINTS)
        .map(|k| {
            let t = t0 + (t1 - t0) * k as f64 / (POINTS - 1) as f64;
            (t, kinematics::time_of_flight(kinematics::sample_at(pass, t.max(0.0)).range))
        })
        .collect()
}

/// Run a full pass and write every artifact into the output directory.
pub fn run_pass(cfg: &RunConfig) -> Result<PassOutcome> {
    cfg.validate()?;
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("output_dir is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write_json(&dir.join("config.json"), cfg)?;
    let seeds = cfg.seeds;

    // Geometry.
    let traj = kinematics::generate_trajectory(&cfg.pass)?;
    write_csv(&dir.join("trajectory.csv"), |w| kinematics::write_trajectory_csv(w, &traj))?;
    let gps = kinematics::gps_tof_series(&cfg.pass, &traj, seeds.trajectory);

    // Pointing.
    let mut acq_cfg = cfg.pointing.clone();
    if let Some([start, end]) = cfg.quantum_window {
        acq_cfg.position_exchange_time = start;
        acq_cfg.dropouts.push((end, f64::INFINITY));
    }
    let acq = pointing::simulate_acquisition(&acq_cfg, &traj, seeds.pointing)?;
    write_csv(&dir.join("pointing.csv"), |w| pointing::write_telemetry_csv(w, &acq.telemetry))?;

    // Link budget per receiver second.
    let seconds = cfg.pass.duration.ceil() as u64;
    let link_fraction = |i: u64| -> f64 {
        if cfg.quantum_link_off {
            0.0
        } else {
            acq.seconds.get(i as usize).map_or(0.0, |s| s.link_fraction)
        }
    };
    let mut model_loss = Vec::with_capacity(seconds as usize);
    for i in 0..seconds {
        let sample = kinematics::sample_at(&cfg.pass, i as f64 + 0.5);
        let mut params = cfg.link.clone();
        if let Some(s) = acq.seconds.get(i as usize).and_then(|s| s.tx_sigma) {
            params.pointing_sigma = s.to_radians();
        }
        model_loss.push(channel::total_loss(&sample, cfg.pass.platform_altitude, &params).loss_db);
    }
    let up: Vec<u64> = (0..seconds).filter(|&i| link_fraction(i) >= 0.5).collect();
    let theoretical = (!up.is_empty()).then(|| {
        let vals = up.iter().map(|&i| model_loss[i as usize] - cfg.link.extra_loss_db);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        [lo, hi]
    });
    let pin = match (cfg.pin_mean_loss_db, up.is_empty()) {
        (Some(target), false) => target - up.iter().map(|&i| model_loss[i as usize]).sum::<f64>() / up.len() as f64,
        _ => 0.0,
    };
    let link: Vec<LinkSample> = (0..seconds)
        .map(|i| {
            let base = LinkSample::from_loss(i as f64, model_loss[i as usize] + pin, cfg.link.background_rate());
            let mut r = rng::stream(seeds.channel, "scintillation", i);
            channel::apply_scintillation(&base, cfg.link.scintillation_sigma_db, &mut r)
        })
        .collect();
    write_csv(&dir.join("link.csv"), |w| channel::write_link_csv(w, &link))?;

    // Source, compensation and detection, one receiver frame at a time.
    let schedule = PulseSchedule::new(&cfg.source, seeds.source);
    let table = match (&schedule, cfg.source.mode) {
        (PulseSchedule::Repeating(t), SequenceMode::Repeating) => t.clone(),
        _ => Vec::new(),
    };
    let source_path = dir.join("source.qsrc");
    let timetag_path = dir.join("timetags.bin");
    let mut source_log = SourceLogWriter::create(&source_path, &SourceSidecar::new(&cfg.source, seeds.source), &table)?;
    let mut tags = TimeTagWriter::create(&timetag_path, cfg.detector.tag_resolution, 0.0)?;
    let mut compensator = PolarizationCompensator::new(cfg.compensation.clone(), seeds.compensation, cfg.pass.duration);
    let mut predicted = Vec::new();
    let slot = cfg.source.slot_period();
    let mut hits = Vec::new();
    for i in 0..seconds {
        let snap = compensator.step(i);
        let (first, end) = frame_slot_bounds(cfg, i);
        source_log.epoch(&EpochMarker {
            second: i,
            first_slot: first,
            triplet: snap.triplet,
            predicted_qber: snap.predicted_qber,
        })?;
        let f = link_fraction(i);
        if f >= 0.5 {
            predicted.push(snap.predicted_qber);
        }
        let states = snap.emitted.map(|s| s.depolarized(cfg.extra_depolarization));
        hits.clear();
        let mut r = rng::stream(seeds.detection, "hits", i);
        receiver::sample_hits(&schedule, &cfg.source, first, end - first, link[i as usize].signal_detection_prob * f, &mut r, &mut hits);
        let tof = tof_grid(&cfg.pass, first as f64 * slot, end as f64 * slot);
        let arrivals: Vec<Arrival> = hits
            .iter()
            .map(|h| {
                let te = h.global_slot as f64 * slot;
                let t = te + kinematics::interpolate(&tof, te);
                Arrival {
                    time: t + cfg.clock.offset + cfg.clock.drift * t,
                    state: states[h.label],
                }
            })
            .collect();
        let mut r = rng::stream(seeds.detection, "detect", i);
        let window = (i as f64, (i + 1) as f64);
        let events = receiver::detect_stream(&arrivals, window, 1.0, link[i as usize].background_rate, &cfg.analyzer, &cfg.detector, &mut r);
        tags.write(&events)?;
    }
    source_log.finish()?;
    tags.finish()?;

    // Distillation.
    let mut dcfg = cfg.distill.clone();
    dcfg.snr_threshold = cfg.effective_snr_threshold();
    dcfg.seed = seeds.distill;
    let out = pipeline::run(
        &DistillInputs {
            timetags: timetag_path,
            source_log: source_path,
            tof: gps,
        },
        &dcfg,
    )?;
    pipeline::write_outputs(&dir, &out)?;
    io::write_key_bits(&dir.join("sifted_alice.txt"), &sifted_key(&out.frames))?;

    let report = out.report.clone();
    let summary = summarize_pass(cfg, &traj, &acq, &link, &out, theoretical, &predicted, up.len());
    summary.check_invariants()?;
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(PassOutcome {
        summary,
        report,
        acquisition: acq,
        link,
        final_key: out.final_key,
        dir,
    })
}

fn sifted_key(frames: &[crate::distill::sift::FrameData]) -> Vec<u8> {
    frames.iter().filter(|f| f.kept).flat_map(|f| f.bits.alice.iter().copied()).collect()
}

/// Transmittance from the signal-class gain: `Q_μ − Y0 = 1 − e^{−μη}`.
fn measured_transmittance(report: &DistillReport, mu: f64) -> Option<f64> {
    let o = &report.observables;
    if o.pulses_mu <= 0.0 || o.pulses_vac <= 0.0 {
        return None;
    }
    let signal = o.q_mu() - o.y0();
    (signal > 0.0 && signal < 1.0).then(|| -(-signal).ln_1p() / mu)
}

#[allow(clippy::too_many_arguments)]
fn summarize_pass(
    cfg: &RunConfig,
    traj: &[kinematics::TrajectorySample],
    acq: &AcquisitionResult,
    link: &[LinkSample],
    out: &pipeline::DistillOutput,
    theoretical: Option<[f64; 2]>,
    predicted: &[f64],
    up_seconds: usize,
) -> PassSummary {
    let r = &out.report;
    let kept: Vec<u64> = out.frames.iter().filter(|f| f.kept).map(|f| f.frame_index).collect();
    let model_loss = (!kept.is_empty()).then(|| {
        let eta: f64 = kept
            .iter()
            .filter_map(|&i| link.get(i as usize))
            .map(|s| s.signal_detection_prob)
            .sum::<f64>()
            / kept.len() as f64;
        -10.0 * eta.log10()
    });
    let pct = |q: Option<f64>| q.map(|q| 100.0 * q);
    PassSummary {
        pass_id: cfg.pass_id.clone(),
        utc_start: cfg.utc_start.clone(),
        classical_link_duration_s: cfg.pass.duration,
        quantum_link_duration_s: up_seconds as f64,
        mean_speed_kmh: cfg.pass.speed * 3.6,
        max_angular_speed_deg_s: traj.iter().map(|s| s.angular_speed).fold(0.0, f64::max),
        tx_pointing_error_deg: acq.tx_coarse_error,
        rx_pointing_error_deg: acq.rx_coarse_error,
        rx_fine_pointing_error_deg: acq.rx_fine_error,
        source_qber_pct: (!predicted.is_empty()).then(|| 100.0 * predicted.iter().sum::<f64>() / predicted.len() as f64),
        signal_qber_pct: pct(r.qber_signal),
        decoy_qber_pct: pct(r.qber_decoy),
        theoretical_loss_db: theoretical,
        mean_measured_loss_db: measured_transmittance(r, cfg.source.mu).map(|eta| -10.0 * eta.log10()),
        link_model_loss_db: model_loss,
        ec_efficiency: r.ec.mean_efficiency,
        snr_threshold: r.snr_threshold,
        sifted_key_bits: r.sifted_bits,
        secure_key_bits: (r.secure_length > 0).then_some(r.secure_length as u64),
        finite_size: cfg.distill.finite_size,
        time_to_lock_s: acq.time_to_lock,
    }
}

// ---------------------------------------------------------------------------
// Replica configurations
// ---------------------------------------------------------------------------

/// Parameters of one reference pass that a replica run needs.
#[derive(Debug, Clone, Copy)]
struct ReplicaSpec {
    id: &'static str,
    utc: &'static str,
    kind: PassKind,
    distance_km: f64,
    speed_kmh: f64,
    classical_s: f64,
    quantum_s: f64,
    snr: u64,
    measured_loss_db: f64,
    source_qber_pct: f64,
}

const REPLICAS: [ReplicaSpec; 7] = [
    ReplicaSpec { id: "5km-arc-1", utc: "2016-09-21 02:57:45", kind: PassKind::Arc, distance_km: 5.0, speed_kmh: 208.0, classical_s: 288.0, quantum_s: 235.0, snr: 0, measured_loss_db: 48.0, source_qber_pct: 5.08 },
    ReplicaSpec { id: "7km-line", utc: "2016-09-21 03:30:45", kind: PassKind::Line, distance_km: 7.0, speed_kmh: 200.0, classical_s: 172.0, quantum_s: 158.0, snr: 1500, measured_loss_db: 51.1, source_qber_pct: 3.58 },
    ReplicaSpec { id: "5km-arc-2", utc: "2016-09-22 01:15:23", kind: PassKind::Arc, distance_km: 5.0, speed_kmh: 198.0, classical_s: 352.0, quantum_s: 250.0, snr: 2000, measured_loss_db: 34.5, source_qber_pct: 3.32 },
    ReplicaSpec { id: "3km-line", utc: "2016-09-22 02:19:33", kind: PassKind::Line, distance_km: 3.0, speed_kmh: 236.0, classical_s: 34.0, quantum_s: 33.0, snr: 1000, measured_loss_db: 39.5, source_qber_pct: 2.66 },
    ReplicaSpec { id: "3km-arc", utc: "2016-09-22 02:24:45", kind: PassKind::Arc, distance_km: 3.0, speed_kmh: 216.0, classical_s: 170.0, quantum_s: 158.0, snr: 1000, measured_loss_db: 34.4, source_qber_pct: 4.37 },
    ReplicaSpec { id: "7km-arc", utc: "2016-09-22 02:42:16", kind: PassKind::Arc, distance_km: 7.0, speed_kmh: 259.0, classical_s: 210.0, quantum_s: 206.0, snr: 2000, measured_loss_db: 39.4, source_qber_pct: 2.80 },
    ReplicaSpec { id: "10km-arc", utc: "2016-09-22 02:57:42", kind: PassKind::Arc, distance_km: 10.0, speed_kmh: 212.0, classical_s: 289.0, quantum_s: 269.0, snr: 2500, measured_loss_db: 42.6, source_qber_pct: 3.39 },
];

pub fn replica_ids() -> Vec<&'static str> {
    REPLICAS.iter().map(|r| r.id).collect()
}

/// Configuration replicating one reference pass. The quantum window is
/// centred in the classical link and the mean loss is pinned to the
/// measured value; the source error floor follows the reported source QBER.
pub fn replica_config(id: &str) -> Result<RunConfig> {
    let r = REPLICAS
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::UnknownPass(id.to_string()))?;
    let speed = r.speed_kmh / 3.6;
    let mut pass = match r.kind {
        PassKind::Line => PassConfig::line(r.distance_km * 1000.0, speed, r.classical_s),
        _ => PassConfig::arc(r.distance_km * 1000.0, speed, r.classical_s),
    };
    pass.start_bearing = 45.0;
    let start = ((r.classical_s - r.quantum_s) / 2.0 - 0.5).max(0.0);
    let compensation = CompensationConfig { depolarization: 2.0 * r.source_qber_pct / 100.0, ..CompensationConfig::default() };
    Ok(RunConfig {
        pass_id: r.id.into(),
        utc_start: Some(r.utc.into()),
        pass,
        compensation,
        snr_threshold: Some(r.snr),
        quantum_window: Some([start, start + r.quantum_s + 1.0]),
        pin_mean_loss_db: Some(r.measured_loss_db),
        seeds: Seeds::from_master(rng::derive_seed(0x7ab1e1, r.id, 0)),
        ..RunConfig::default()
    })
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

/// Rows of the pass table, in order.
pub const SUMMARY_ROWS: [(&str, &str); 17] = [
    ("utc_start", "Start time (UTC)"),
    ("classical_link_duration_s", "Classical link duration [s]"),
    ("quantum_link_duration_s", "Quantum link duration [s]"),
    ("mean_speed_kmh", "Mean speed [km/h]"),
    ("max_angular_speed_deg_s", "Maximum angular speed [deg/s]"),
    ("tx_pointing_error_deg", "Transmitter pointing error [1e-3 deg]"),
    ("rx_pointing_error_deg", "Receiver pointing error [1e-3 deg]"),
    ("rx_fine_pointing_error_deg", "Receiver fine-pointing error [1e-3 deg]"),
    ("source_qber_pct", "Source QBER [%]"),
    ("signal_qber_pct", "Signal QBER [%]"),
    ("decoy_qber_pct", "Decoy QBER [%]"),
    ("theoretical_loss_db", "Theoretical loss [dB]"),
    ("mean_measured_loss_db", "Mean measured loss [dB]"),
    ("ec_efficiency", "Error correction efficiency"),
    ("snr_threshold", "Signal-to-noise threshold"),
    ("sifted_key_bits", "Sifted key length [bits]"),
    ("secure_key_bits", "Secure key length [bits]"),
];

/// A table cell's value.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Number(f64),
    Range(f64, f64),
    Text(String),
    Missing,
}

impl PassSummary {
    pub fn metric(&self, key: &str) -> Metric {
        use Metric::*;
        let opt = |v: Option<f64>| v.map_or(Missing, Number);
        match key {
            "utc_start" => self.utc_start.clone().map_or(Missing, Text),
            "classical_link_duration_s" => Number(self.classical_link_duration_s),
            "quantum_link_duration_s" => Number(self.quantum_link_duration_s),
            "mean_speed_kmh" => Number(self.mean_speed_kmh),
            "max_angular_speed_deg_s" => Number(self.max_angular_speed_deg_s),
            "tx_pointing_error_deg" => opt(self.tx_pointing_error_deg),
            "rx_pointing_error_deg" => opt(self.rx_pointing_error_deg),
            "rx_fine_pointing_error_deg" => opt(self.rx_fine_pointing_error_deg),
            "source_qber_pct" => opt(self.source_qber_pct),
            "signal_qber_pct" => opt(self.signal_qber_pct),
            "decoy_qber_pct" => opt(self.decoy_qber_pct),
            "theoretical_loss_db" => self.theoretical_loss_db.map_or(Missing, |[a, b]| Range(a, b)),
            "mean_measured_loss_db" => opt(self.mean_measured_loss_db),
            "ec_efficiency" => opt(self.ec_efficiency),
            "snr_threshold" => Number(self.snr_threshold as f64),
            "sifted_key_bits" => Number(self.sifted_key_bits as f64),
            "secure_key_bits" => self.secure_key_bits.map_or(Text("None".into()), |b| Number(b as f64)),
            _ => Missing,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        io::read_json(&dir.join("summary.json"))
    }
}

fn format_cell(key: &str, m: &Metric) -> String {
    let scale = if key.ends_with("pointing_error_deg") { 1000.0 } else { 1.0 };
    let num = |v: f64| -> String {
        let v = v * scale;
        match key {
            "classical_link_duration_s" | "quantum_link_duration_s" | "snr_threshold" | "sifted_key_bits" | "secure_key_bits" => {
                format!("{v:.0}")
            }
            "mean_speed_kmh" => format!("{v:.0}"),
            "max_angular_speed_deg_s" | "ec_efficiency" => format!("{v:.2}"),
            _ if v.abs() >= 100.0 => format!("{v:.0}"),
            _ => format!("{v:.3}"),
        }
    };
    match m {
        Metric::Number(v) => num(*v),
        Metric::Range(a, b) if (a - b).abs() < 0.05 => format!("{a:.1}"),
        Metric::Range(a, b) => format!("{a:.1}-{b:.1}"),
        Metric::Text(t) => t.clone(),
        Metric::Missing => "No data".into(),
    }
}

/// Table with one column per pass, as CSV and as aligned text.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub passes: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let quote = |s: &str| if s.contains([',', '"']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() };
        let mut out = String::new();
        let header: Vec<String> = std::iter::once("Parameter".to_string()).chain(self.passes.iter().map(|p| quote(p))).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (label, cells) in &self.rows {
            let line: Vec<String> = std::iter::once(quote(label)).chain(cells.iter().map(|c| quote(c))).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max("Parameter".len());
        let widths: Vec<usize> = (0..self.passes.len())
            .map(|j| {
                self.rows
                    .iter()
                    .map(|(_, c)| c[j].chars().count())
                    .chain(std::iter::once(self.passes[j].chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "Parameter");
        for (p, w) in self.passes.iter().zip(&widths) {
            let _ = write!(out, "  {p:>w$}");
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "{label:<label_w$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn summarize(summaries: &[PassSummary]) -> Result<SummaryTable> {
    if summaries.is_empty() {
        return Err(Error::EmptySummary);
    }
    Ok(SummaryTable {
        passes: summaries.iter().map(|s| s.pass_id.clone()).collect(),
        rows: SUMMARY_ROWS
            .iter()
            .map(|(key, label)| (label.to_string(), summaries.iter().map(|s| format_cell(key, &s.metric(key))).collect()))
            .collect(),
    })
}

pub fn summarize_dirs(dirs: &[PathBuf]) -> Result<SummaryTable> {
    let summaries = dirs.iter().map(|d| PassSummary::load(d)).collect::<Result<Vec<_>>>()?;
    summarize(&summaries)
}

// ---------------------------------------------------------------------------
// Reference comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tolerance {
    Relative(f64),
    Absolute(f64),
    /// Within a multiplicative factor either way.
    Factor(f64),
}

impl Tolerance {
    fn accepts(&self, sim: f64, reference: f64) -> bool {
        match *self {
            Tolerance::Relative(r) => (sim - reference).abs() <= r * reference.abs(),
            Tolerance::Absolute(a) => (sim - reference).abs() <= a + 1e-12,
            Tolerance::Factor(f) => sim > 0.0 && reference > 0.0 && sim <= f * reference && sim * f >= reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub source: String,
    pub tolerances: BTreeMap<String, Tolerance>,
    pub passes: Vec<BTreeMap<String, serde_json::Value>>,
}

impl ReferenceTable {
    pub fn bundled() -> Self {
        serde_json::from_str(TABLE1_JSON).expect("bundled reference table parses")
    }

    pub fn pass(&self, id: &str) -> Result<&BTreeMap<String, serde_json::Value>> {
        self.passes
            .iter()
            .find(|p| p.get("id").and_then(|v| v.as_str()) == Some(id))
            .ok_or_else(|| Error::UnknownPass(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotCompared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub simulated: Option<f64>,
    pub reference: Option<f64>,
    /// `simulated / reference` for positive references.
    pub ratio: Option<f64>,
    pub difference: Option<f64>,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub pass_id: String,
    pub comparisons: Vec<MetricComparison>,
}

impl DeviationReport {
    pub fn failures(&self) -> usize {
        self.comparisons.iter().filter(|c| c.verdict == Verdict::Fail).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("pass {}\n", self.pass_id);
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for c in &self.comparisons {
            let verdict = match c.verdict {
                Verdict::Pass => "pass",
                Verdict::Fail => "FAIL",
                Verdict::NotCompared => "not compared",
            };
            let _ = writeln!(
                out,
                "  {:<28} sim {:>12} ref {:>12} ratio {:>8}  {verdict}{}",
                c.metric,
                f(c.simulated),
                f(c.reference),
                f(c.ratio),
                if c.note.is_empty() { String::new() } else { format!(" ({})", c.note) }
            );
        }
        out
    }
}

fn compare_one(metric: &str, sim: &Metric, reference: Option<&serde_json::Value>, tol: Option<&Tolerance>) -> MetricComparison {
    let mut c = MetricComparison {
        metric: metric.to_string(),
        simulated: None,
        reference: None,
        ratio: None,
        difference: None,
        verdict: Verdict::NotCompared,
        note: String::new(),
    };
    let reference_range: Option<(f64, f64)> = reference.and_then(|v| match v {
        serde_json::Value::Number(n) => n.as_f64().map(|x| (x, x)),
        serde_json::Value::Array(a) if a.len() == 2 => Some((a[0].as_f64()?, a[1].as_f64()?)),
        _ => None,
    });
    let sim_value = match sim {
        Metric::Number(v) => Some(*v),
        Metric::Range(a, b) => Some(0.5 * (a + b)),
        _ => None,
    };
    c.simulated = sim_value;
    c.reference = reference_range.map(|(a, b)| 0.5 * (a + b));
    let reference_is_null = reference.is_some_and(|v| v.is_null());
    if metric == "secure_key_bits" && reference_is_null {
        // The reference pass produced no key.
        c.verdict = if sim_value.is_none() { Verdict::Pass } else { Verdict::Fail };
        c.note = "reference: no key".into();
        return c;
    }
    let (Some(s), Some((lo, hi))) = (sim_value, reference_range) else {
        c.note = match (sim_value, reference_range) {
            (None, _) if metric == "secure_key_bits" => "simulated: no key".into(),
            (None, _) => "missing in summary".into(),
            _ if reference_is_null => "no reference data".into(),
            _ => "missing in reference".into(),
        };
        if metric == "secure_key_bits" && sim_value.is_none() {
            c.verdict = Verdict::Fail;
        }
        return c;
    };
    let Some(tol) = tol else {
        c.note = "no tolerance".into();
        return c;
    };
    let mid = 0.5 * (lo + hi);
    c.difference = Some(s - mid);
    c.ratio = (mid > 0.0).then(|| s / mid);
    // Ranges accept anything inside them plus the tolerance around either end.
    let (sim_lo, sim_hi) = match sim {
        Metric::Range(a, b) => (*a, *b),
        _ => (s, s),
    };
    let inside = sim_hi >= lo && sim_lo <= hi;
    let near = [sim_lo, sim_hi].iter().any(|&x| tol.accepts(x, lo) || tol.accepts(x, hi));
    c.verdict = if inside || near { Verdict::Pass } else { Verdict::Fail };
    c
}

pub fn compare_to_reference(summary: &PassSummary, reference: &ReferenceTable) -> Result<DeviationReport> {
    let row = reference.pass(&summary.pass_id)?;
    let comparisons = SUMMARY_ROWS
        .iter()
        .filter(|(k, _)| *k != "utc_start")
        .map(|(key, _)| compare_one(key, &summary.metric(key), row.get(*key), reference.tolerances.get(*key)))
        .collect();
    Ok(DeviationReport {
        pass_id: summary.pass_id.clone(),
        comparisons,
    })
}

// ---------------------------------------------------------------------------
// Sparse sampling check
// ---------------------------------------------------------------------------

/// Per-class click counts from the sparse sampler and the per-slot
/// reference over the same slot range, with their z-scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingComparison {
    pub slots: u64,
    pub eta: f64,
    pub sparse: [u64; 3],
    pub brute_force: [u64; 3],
    pub expected: [f64; 3],
    /// `(sparse − brute)/sqrt(sparse + brute)` per class.
    pub z: [f64; 3],
}

/// Draw `slots` consecutive slots both ways. The two are independent
/// samples of the same process, so their difference is zero-mean with
/// variance close to the sum of counts.
pub fn compare_sparse_sampling(source: &SourceConfig, eta: f64, slots: u64, seed: u64) -> SamplingComparison {
    let schedule = PulseSchedule::new(source, seed);
    let mut hits = Vec::new();
    receiver::sample_hits(&schedule, source, 0, slots, eta, &mut rng::stream(seed, "sparse", 0), &mut hits);
    let mut sparse = [0u64; 3];
    for h in &hits {
        sparse[h.intensity.index()] += 1;
    }
    let brute_force = receiver::brute_force_hits(&schedule, source, 0, slots, eta, &mut rng::stream(seed, "brute", 0));
    let mut class_slots = [0u64; 3];
    match schedule.period() {
        Some(p) => {
            for g in 0..p.min(slots) {
                class_slots[schedule.slot(g).intensity.index()] += slots / p;
            }
            for g in 0..slots % p {
                class_slots[schedule.slot(g).intensity.index()] += 1;
            }
        }
        None => {
            for i in Intensity::ALL {
                let p = [source.p_signal, source.p_decoy, source.p_vacuum][i.index()];
                class_slots[i.index()] = (p * slots as f64).round() as u64;
            }
        }
    }
    let expected = Intensity::ALL.map(|i| class_slots[i.index()] as f64 * receiver::click_probability(source.mean_photons(i), eta));
    let z = [0, 1, 2].map(|k| {
        let n = (sparse[k] + brute_force[k]) as f64;
        if n == 0.0 {
            0.0
        } else {
            (sparse[k] as f64 - brute_force[k] as f64) / n.sqrt()
        }
    });
    SamplingComparison {
        slots,
        eta,
        sparse,
        brute_force,
        expected,
        z,
    }
}
