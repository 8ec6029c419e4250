//! Receiver-to-key pipeline over the time-tag file and the source log.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::correlate::{self, CorrelationConfig, CorrelationFailure, CorrelationResult};
use super::decoy::{self, DecoyEstimates, DecoyObservables, KeyLengthParams};
use super::entropy::binary_entropy;
use super::ldpc::{self, EcConfig, LdpcFamily};
use super::sift::{self, ClassTally, FrameData};
use super::toeplitz;
use crate::error::{Error, Result};
use crate::io::{self, TimeTagReader};
use crate::receiver::DetectionEvent;
use crate::rng;
use crate::transmitter::{Intensity, PulseSchedule, SequenceMode, SourceConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub correlation: CorrelationConfig,
    pub snr_threshold: u64,
    pub n_sigma: f64,
    pub finite_size: bool,
    pub ec: EcConfig,
    pub key: KeyLengthParams,
    pub seed: u64,
    pub threads: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            correlation: CorrelationConfig::default(),
            snr_threshold: 1000,
            n_sigma: 10.0,
            finite_size: true,
            ec: EcConfig::default(),
            key: KeyLengthParams::default(),
            seed: 0,
            threads: 1,
        }
    }
}

/// Files and side information the ground station has after a pass.
#[derive(Debug, Clone)]
pub struct DistillInputs {
    pub timetags: PathBuf,
    pub source_log: PathBuf,
    /// GPS-derived time of flight, `(t, tof)` on the receiver clock.
    pub tof: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EcSummary {
    pub blocks: usize,
    pub verified_blocks: usize,
    pub first_attempt_blocks: usize,
    pub leak_ec: u64,
    pub verified_bits: u64,
    /// Sifted bits left over after the last whole block.
    pub unused_bits: u64,
    /// Mean over blocks of `leak / (n·h2(block QBER))`.
    pub mean_efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub frames_total: usize,
    pub frames_kept: usize,
    pub frames_correlated: usize,
    pub frames_borrowed: usize,
    pub snr_threshold: u64,
    pub mean_residual_width: Option<f64>,
    pub tally: ClassTally,
    pub qber_signal: Option<f64>,
    pub qber_decoy: Option<f64>,
    /// Signal-class sifted bits in kept frames.
    pub sifted_bits: u64,
    pub observables: DecoyObservables,
    pub estimates: Option<DecoyEstimates>,
    pub estimate_error: Option<String>,
    pub ec: EcSummary,
    /// Key length from the key-length formula; negative means no key.
    pub secure_length: i64,
    /// Same formula with no statistical shift.
    pub asymptotic_length: Option<i64>,
    pub final_key_bits: u64,
}

/// Output of `run`: the report, per-frame data and the final key.
#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub report: DistillReport,
    pub frames: Vec<FrameData>,
    pub final_key: Vec<u8>,
}

/// Groups a time-ordered event stream into 1 s frames on the receiver clock.
struct Frames {
    reader: TimeTagReader,
    resolution: f64,
    pending: Option<DetectionEvent>,
}

impl Frames {
    fn open(path: &Path) -> Result<Self> {
        let reader = TimeTagReader::open(path)?;
        let resolution = reader.sidecar.resolution;
        Ok(Frames {
            reader,
            resolution,
            pending: None,
        })
    }


    fn next_frame(&mut self) -> Result<Option<(u64, Vec<DetectionEvent>)>> {
        let first = match self.pending.take() {
            Some(e) => e,
            None => match self.reader.next() {
                Some(e) => e?,
                None => return Ok(None),
            },
        };
        let res = self.resolution;
        let frame_of = |e: &DetectionEvent| (e.tag as f64 * res).floor().max(0.0) as u64;
        let idx = frame_of(&first);
        let mut events = vec![first];
        for e in self.reader.by_ref() {
            let e = e?;
            if frame_of(&e) != idx {
                self.pending = Some(e);
                break;
            }
            events.push(e);
        }
        Ok(Some((idx, events)))
    }
}

fn schedule_from_log(log: &io::SourceLog) -> (SourceConfig, PulseSchedule) {
    let cfg = log.sidecar.source_config();
    let schedule = match cfg.mode {
        SequenceMode::Repeating if !log.table.is_empty() => PulseSchedule::Repeating(log.table.clone()),
        _ => PulseSchedule::new(&cfg, log.sidecar.seed),
    };
    (cfg, schedule)
}

/// Correlation used when no frame correlated: GPS time of flight alone.
fn nominal_correlation(frame: u64, tof: &[(f64, f64)], schedule: &PulseSchedule, source: &SourceConfig) -> CorrelationResult {
    let t_ref = frame as f64 + 0.5;
    CorrelationResult {
        offset: crate::kinematics::interpolate(tof, t_ref),
        drift: 0.0,
        residual_width: 0.0,
        ambiguity_period: schedule.period().map(|p| p as f64 * source.slot_period()),
        t_ref,
        slot_shift: 0,
        phase: 0.0,
    }
}

/// Run correlation, sifting, filtering, parameter estimation,
/// reconciliation and privacy amplification.
pub fn run(inputs: &DistillInputs, cfg: &DistillConfig) -> Result<DistillOutput> {
    let log = io::read_source_log(&inputs.source_log)?;
    let (source, schedule) = schedule_from_log(&log);
    let tof = correlate::smooth_tof(&inputs.tof, cfg.correlation.tof_smoothing);

    // Pass 1: per-frame correlation.
    let mut results: Vec<(u64, std::result::Result<CorrelationResult, CorrelationFailure>)> = Vec::new();
    let mut frames_in = Frames::open(&inputs.timetags)?;
    let resolution = frames_in.resolution;
    while let Some((idx, events)) = frames_in.next_frame()? {
        let r = correlate::correlate(&events, resolution, &tof, &schedule, &source, &cfg.correlation).map(|fc| fc.result);
        results.push((idx, r));
    }
    let good: Vec<(u64, CorrelationResult)> = results
        .iter()
        .filter_map(|(i, r)| r.as_ref().ok().map(|c| (*i, *c)))
        .collect();

    // Pass 2: assignment and sifting.
    let mut frames = Vec::with_capacity(results.len());
    let mut frames_in = Frames::open(&inputs.timetags)?;
    let mut k = 0;
    while let Some((idx, events)) = frames_in.next_frame()? {
        debug_assert_eq!(results[k].0, idx);
        let own = results[k].1.ok();
        k += 1;
        let (corr, borrowed_from) = match own {
            Some(c) => (c, None),
            None => match good.iter().min_by_key(|(j, _)| j.abs_diff(idx)) {
                Some(&(j, c)) => (c, Some(j)),
                None => (nominal_correlation(idx, &tof, &schedule, &source), None),
            },
        };
        let assigned = correlate::assign_with(&events, resolution, &tof, &source, &cfg.correlation, &corr);
        let (tally, bits) = sift::sift(&events, &assigned, &schedule);
        frames.push(FrameData {
            frame_index: idx,
            total_counts: events.len() as u64,
            kept: false,
            correlation: own,
            borrowed_from,
            tally,
            bits,
        });
    }
    let frames_kept = sift::snr_filter(&mut frames, cfg.snr_threshold);
    distill_frames(frames, frames_kept, &source, cfg, good.len())
}

/// Everything after sifting: operates on already-filtered frames.
pub fn distill_frames(
    frames: Vec<FrameData>,
    frames_kept: usize,
    source: &SourceConfig,
    cfg: &DistillConfig,
    frames_correlated: usize,
) -> Result<DistillOutput> {
    let tally = sift::kept_tally(&frames);
    let pulses = |p: f64| frames_kept as f64 * source.clock_rate * p;
    let (s, d, v) = (
        Intensity::Signal.index(),
        Intensity::Decoy.index(),
        Intensity::Vacuum.index(),
    );
    let observables = DecoyObservables {
        pulses_mu: pulses(source.p_signal),
        pulses_nu: pulses(source.p_decoy),
        pulses_vac: pulses(source.p_vacuum),
        detections_mu: tally.detections[s] as f64,
        detections_nu: tally.detections[d] as f64,
        detections_vac: tally.detections[v] as f64,
        sifted_mu: tally.sifted[s] as f64,
        errors_mu: tally.errors[s] as f64,
        sifted_nu: tally.sifted[d] as f64,
        errors_nu: tally.errors[d] as f64,
    };
    let n_sigma = if cfg.finite_size { cfg.n_sigma } else { 0.0 };
    let (estimates, estimate_error) = if frames_kept == 0 {
        (None, Some("no frames kept".to_string()))
    } else {
        match decoy::decoy_bounds(&observables, source.mu, source.nu, n_sigma) {
            Ok(e) => (Some(e), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    let asymptotic = if frames_kept > 0 {
        decoy::decoy_bounds(&observables, source.mu, source.nu, 0.0).ok()
    } else {
        None
    };

    let mut alice: Vec<u8> = Vec::with_capacity(tally.sifted[s] as usize);
    let mut bob: Vec<u8> = Vec::with_capacity(tally.sifted[s] as usize);
    for f in frames.iter().filter(|f| f.kept) {
        alice.extend_from_slice(&f.bits.alice);
        bob.extend_from_slice(&f.bits.bob);
    }
    let qber_signal = tally.qber(Intensity::Signal);
    let (ec, key) = reconcile_all(&alice, &bob, qber_signal.unwrap_or(0.5), cfg)?;

    let (secure_length, final_key) = match &estimates {
        Some(est) => {
            let l = decoy::secure_length(est, ec.verified_bits, ec.leak_ec, cfg.finite_size, &cfg.key);
            let fk = if l > 0 {
                let m = l as usize;
                let mut r = rng::stream(cfg.seed, "privacy-amplification", 0);
                let seed: Vec<u8> = (0..key.len() + m - 1).map(|_| r.random::<bool>() as u8).collect();
                toeplitz::privacy_amplify(&key, m, &seed)?
            } else {
                Vec::new()
            };
            (l, fk)
        }
        None => (-((ec.leak_ec + cfg.key.verification_bits + cfg.key.amplification_margin) as i64), Vec::new()),
    };
    let asymptotic_length =
        asymptotic.map(|est| decoy::secure_length(&est, ec.verified_bits, ec.leak_ec, false, &cfg.key));

    let widths: Vec<f64> = frames
        .iter()
        .filter(|f| f.kept)
        .filter_map(|f| f.correlation.map(|c| c.residual_width))
        .collect();
    let report = DistillReport {
        frames_total: frames.len(),
        frames_kept,
        frames_correlated,
        frames_borrowed: frames.iter().filter(|f| f.borrowed_from.is_some()).count(),
        snr_threshold: cfg.snr_threshold,
        mean_residual_width: (!widths.is_empty()).then(|| widths.iter().sum::<f64>() / widths.len() as f64),
        tally,
        qber_signal,
        qber_decoy: tally.qber(Intensity::Decoy),
        sifted_bits: tally.sifted[s],
        observables,
        estimates,
        estimate_error,
        ec,
        secure_length,
        asymptotic_length,
        final_key_bits: final_key.len() as u64,
    };
    Ok(DistillOutput {
        report,
        frames,
        final_key,
    })
}

/// Reconcile whole blocks; returns the summary and the verified key bits.
fn reconcile_all(alice: &[u8], bob: &[u8], qber_estimate: f64, cfg: &DistillConfig) -> Result<(EcSummary, Vec<u8>)> {
    let n = cfg.ec.block_length;
    let blocks = alice.len() / n;
    let mut summary = EcSummary {
        blocks,
        unused_bits: (alice.len() - blocks * n) as u64,
        ..Default::default()
    };
    if blocks == 0 {
        return Ok((summary, Vec::new()));
    }
    let family = LdpcFamily::new(n, rng::derive_seed(cfg.seed, "ldpc", 0))?;
    let work = |b: usize| -> Result<(ldpc::EcOutcome, f64)> {
        let (a, o) = (&alice[b * n..(b + 1) * n], &bob[b * n..(b + 1) * n]);
        let errors = a.iter().zip(o).filter(|(x, y)| x != y).count();
        let out = ldpc::ec_reconcile(&family, a, o, qber_estimate, &cfg.ec, rng::derive_seed(cfg.seed, "ec-hash", b as u64))?;
        Ok((out, errors as f64 / n as f64))
    };
    let threads = cfg.threads.max(1).min(blocks);
    let outcomes: Vec<Result<(ldpc::EcOutcome, f64)>> = if threads == 1 {
        (0..blocks).map(work).collect()
    } else {
        let per = blocks.div_ceil(threads);
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let work = &work;
                    sc.spawn(move || ((t * per)..((t + 1) * per).min(blocks)).map(work).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("reconciliation worker panicked"))
                .collect()
        })
    };
    let mut key = Vec::with_capacity(blocks * n);
    let (mut fsum, mut fcount) = (0.0, 0usize);
    for (b, r) in outcomes.into_iter().enumerate() {
        let (out, block_qber) = r?;
        summary.leak_ec += out.leak as u64;
        if out.verified {
            summary.verified_blocks += 1;
            summary.verified_bits += n as u64;
            if out.attempts == 1 {
                summary.first_attempt_blocks += 1;
            }
            key.extend_from_slice(&alice[b * n..(b + 1) * n]);
        }
        if binary_entropy(block_qber).is_ok_and(|h| h > 0.0) {
            if let Some(f) = out.efficiency(n, block_qber) {
                fsum += f;
                fcount += 1;
            }
        }
    }
    summary.mean_efficiency = (fcount > 0).then(|| fsum / fcount as f64);
    Ok((summary, key))
}

/// Write the JSON report, frame CSV and final key into `dir`.
pub fn write_outputs(dir: &Path, out: &DistillOutput) -> Result<()> {
    io::write_json(&dir.join("distill_report.json"), &out.report)?;
    let path = dir.join("frames.csv");
    let mut w = io::create(&path)?;
    sift::write_frame_csv(&mut w, &out.frames)
        .and_then(|()| std::io::Write::flush(&mut w))
        .map_err(|e| Error::io(&path, e))?;
    io::write_key_bits(&dir.join("final_key.txt"), &out.final_key)
}
