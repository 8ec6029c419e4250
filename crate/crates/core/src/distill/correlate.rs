//! Time correlation between the source slot clock and receiver time tags.
//!
//! Per frame: subtract the GPS-derived time of flight, estimate the
//! sub-slot phase in short sub-windows from the circular mean of the tag
//! times modulo the slot period, fit phase against time (this absorbs clock
//! drift and the GPS error, which is linear within a frame), then find the
//! whole-slot shift that best lines up the slot histogram with the
//! intensity pattern. With a repeating table that shift is only known modulo
//! the table period; GPS accuracy far below one period picks the signed
//! representative nearest zero.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::kinematics::interpolate;
use crate::receiver::DetectionEvent;
use crate::transmitter::{Intensity, PulseSchedule, SourceConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationConfig {
    /// Half-width of the acceptance gate around each slot centre, s.
    pub gate: f64,
    pub min_detections: usize,
    /// Mean signal-slot bin must exceed this multiple of the mean
    /// vacuum-slot bin.
    pub peak_ratio: f64,
    /// Target detections per phase sub-window.
    pub events_per_subwindow: usize,
    pub max_subwindows: usize,
    /// Slot shift search half-width when the schedule never repeats.
    pub random_search_slots: i64,
    /// Half-width in samples of the local quadratic smoother applied to the
    /// GPS time-of-flight series.
    pub tof_smoothing: usize,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            gate: 1.0e-9,
            min_detections: 100,
            peak_ratio: 5.0,
            events_per_subwindow: 150,
            max_subwindows: 50,
            random_search_slots: 400,
            tof_smoothing: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    /// Receiver time minus emission time at the frame reference time, s.
    pub offset: f64,
    /// Rate of change of that offset beyond the GPS model, s/s.
    pub drift: f64,
    /// RMS of gated sub-slot residuals of signal-slot events, s.
    pub residual_width: f64,
    /// Table period in seconds; `None` for a non-repeating schedule.
    pub ambiguity_period: Option<f64>,
    /// Frame reference time on the receiver clock, s.
    pub t_ref: f64,
    /// Whole-slot shift applied after the phase correction.
    pub slot_shift: i64,
    /// Sub-slot phase at `t_ref`, s.
    pub phase: f64,
}

/// Why a frame could not be correlated on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationFailure {
    TooFewDetections,
    NoPeak,
}

/// Event assignment for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub event: usize,
    pub global_slot: u64,
}

/// Local quadratic least-squares smoothing of an evenly or unevenly sampled
/// `(t, tof)` series.
pub fn smooth_tof(series: &[(f64, f64)], half_width: usize) -> Vec<(f64, f64)> {
    if half_width == 0 || series.len() < 4 {
        return series.to_vec();
    }
    let n = series.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width + 1).min(n);
            let (t0, _) = series[i];
            // Normal equations for y = a + b·x + c·x² with x = t − t0.
            let mut s = [0.0f64; 5];
            let mut r = [0.0f64; 3];
            for &(t, y) in &series[lo..hi] {
                let x = t - t0;
                let mut p = 1.0;
                for k in 0..5 {
                    s[k] += p;
                    if k < 3 {
                        r[k] += p * y;
                    }
                    p *= x;
                }
            }
            let m = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
            let a = solve3(m, r).map_or(series[i].1, |v| v[0]);
            (t0, a)
        })
        .collect()
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d.abs() < 1e-300 || !d.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for row in 0..3 {
            mk[row][k] = r[row];
        }
        *o = det(&mk) / d;
    }
    Some(out)
}

/// Centred weights: mean photon number of each table slot minus the table
/// mean.
fn pattern_weights(table_len: usize, schedule: &PulseSchedule, source: &SourceConfig) -> Vec<f64> {
    let w: Vec<f64> = (0..table_len as u64)
        .map(|j| source.mean_photons(schedule.slot(j).intensity))
        .collect();
    let mean = w.iter().sum::<f64>() / w.len().max(1) as f64;
    w.into_iter().map(|x| x - mean).collect()
}

/// Phase-corrected slot position of one tag: `(whole slot, sub-slot
/// residual in s)`.
#[inline]
fn slot_position(t: f64, tof: &[(f64, f64)], phase: f64, drift: f64, t_ref: f64, ts: f64) -> (i64, f64) {
    let u = t - interpolate(tof, t) - phase - drift * (t - t_ref);
    let x = u / ts;
    let k = x.round();
    (k as i64, (x - k) * ts)
}

/// Estimate the sub-slot phase line `phase + drift·(t − t_ref)`.
fn fit_phase(times: &[f64], tof: &[(f64, f64)], ts: f64, cfg: &CorrelationConfig) -> (f64, f64, f64) {
    let n = times.len();
    let t_ref = 0.5 * (times[0] + times[n - 1]);
    let windows = (n / cfg.events_per_subwindow.max(1)).clamp(1, cfg.max_subwindows.max(1));
    let (start, end) = (times[0], times[n - 1] + 1e-12);
    let width = (end - start) / windows as f64;
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); windows];
    for &t in times {
        let w = (((t - start) / width) as usize).min(windows - 1);
        let u = t - interpolate(tof, t);
        let ang = TAU * (u / ts).fract();
        let a = &mut acc[w];
        a.0 += ang.cos();
        a.1 += ang.sin();
        a.2 += t;
        a.3 += 1;
    }
    let mut pts: Vec<(f64, f64, f64)> = Vec::with_capacity(windows);
    let mut prev: Option<f64> = None;
    for (c, s, tsum, k) in acc {
        if k == 0 {
            continue;
        }
        let mut ang = s.atan2(c);
        if let Some(p) = prev {
            ang += TAU * ((p - ang) / TAU).round();
        }
        prev = Some(ang);
        pts.push((tsum / k as f64 - t_ref, ang, (c * c + s * s).sqrt()));
    }
    // Weighted least squares ang = a + b·x.
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, w) in &pts {
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let den = sw * sxx - sx * sx;
    let (a, b) = if pts.len() >= 2 && den.abs() > 1e-300 {
        let b = (sw * sxy - sx * sy) / den;
        ((sy - b * sx) / sw, b)
    } else {
        (if sw > 0.0 { sy / sw } else { 0.0 }, 0.0)
    };
    (a / TAU * ts, b / TAU * ts, t_ref)
}

/// Frame-level outcome: the correlation plus the event assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCorrelation {
    pub result: CorrelationResult,
    pub assignments: Vec<Assignment>,
}

/// Correlate one frame of detections on its own.
pub fn correlate(
    events: &[DetectionEvent],
    tag_resolution: f64,
    tof: &[(f64, f64)],
    schedule: &PulseSchedule,
    source: &SourceConfig,
    cfg: &CorrelationConfig,
) -> Result<FrameCorrelation, CorrelationFailure> {
    if events.len() < cfg.min_detections.max(1) {
        return Err(CorrelationFailure::TooFewDetections);
    }
    let ts = source.slot_period();
    let times: Vec<f64> = events.iter().map(|e| e.tag as f64 * tag_resolution).collect();
    let (phase, drift, t_ref) = fit_phase(&times, tof, ts, cfg);

    let positions: Vec<Option<i64>> = times
        .iter()
        .map(|&t| {
            let (k, r) = slot_position(t, tof, phase, drift, t_ref, ts);
            (r.abs() <= cfg.gate).then_some(k)
        })
        .collect();

    let shift = match schedule.period() {
        Some(period) => {
            let l = period as usize;
            let w = pattern_weights(l, schedule, source);
            let mut hist = vec![0.0f64; l];
            for k in positions.iter().flatten() {
                hist[k.rem_euclid(l as i64) as usize] += 1.0;
            }
            let mut best = (f64::NEG_INFINITY, 0i64);
            for s in 0..l {
                let score: f64 = (0..l).map(|j| hist[j] * w[(j + l - s) % l]).sum();
                if score > best.0 {
                    best = (score, s as i64);
                }
            }
            let mut s = best.1;
            if s > l as i64 / 2 {
                s -= l as i64;
            }
            s
        }
        None => {
            let picked: Vec<i64> = positions.iter().flatten().copied().step_by(
                (positions.len() / 4000).max(1),
            ).collect();
            let weight = |i: Intensity| source.mean_photons(i) - (source.p_signal * source.mu + source.p_decoy * source.nu);
            let mut best = (f64::NEG_INFINITY, 0i64);
            for s in -cfg.random_search_slots..=cfg.random_search_slots {
                let score: f64 = picked
                    .iter()
                    .filter(|&&k| k - s >= 0)
                    .map(|&k| weight(schedule.slot((k - s) as u64).intensity))
                    .sum();
                if score > best.0 {
                    best = (score, s);
                }
            }
            best.1
        }
    };

    // Peak test: per-slot counts in signal slots against vacuum slots.
    let mut per_class = [0.0f64; 3];
    let mut assignments = Vec::with_capacity(events.len());
    let mut sq = 0.0;
    let mut nsig = 0usize;
    for (i, k) in positions.iter().enumerate() {
        let Some(k) = k else { continue };
        let g = k - shift;
        if g < 0 {
            continue;
        }
        let class = schedule.slot(g as u64).intensity;
        per_class[class.index()] += 1.0;
        if class == Intensity::Signal {
            let (_, r) = slot_position(times[i], tof, phase, drift, t_ref, ts);
            sq += r * r;
            nsig += 1;
        }
        assignments.push(Assignment {
            event: i,
            global_slot: g as u64,
        });
    }
    let sig_bin = per_class[Intensity::Signal.index()] / source.p_signal.max(1e-12);
    let vac_bin = per_class[Intensity::Vacuum.index()] / source.p_vacuum.max(1e-12);
    if sig_bin <= 0.0 || sig_bin < cfg.peak_ratio * vac_bin {
        return Err(CorrelationFailure::NoPeak);
    }
    let mid_tof = interpolate(tof, t_ref);
    Ok(FrameCorrelation {
        result: CorrelationResult {
            offset: mid_tof + phase + shift as f64 * ts,
            drift,
            residual_width: if nsig > 0 { (sq / nsig as f64).sqrt() } else { 0.0 },
            ambiguity_period: schedule.period().map(|p| p as f64 * ts),
            t_ref,
            slot_shift: shift,
            phase,
        },
        assignments,
    })
}

/// Assign events using a correlation borrowed from another frame.
pub fn assign_with(
    events: &[DetectionEvent],
    tag_resolution: f64,
    tof: &[(f64, f64)],
    source: &SourceConfig,
    cfg: &CorrelationConfig,
    corr: &CorrelationResult,
) -> Vec<Assignment> {
    let ts = source.slot_period();
    events
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let t = e.tag as f64 * tag_resolution;
            let (k, r) = slot_position(t, tof, corr.phase, corr.drift, corr.t_ref, ts);
            let g = k - corr.slot_shift;
            (r.abs() <= cfg.gate && g >= 0).then_some(Assignment {
                event: i,
                global_slot: g as u64,
            })
        })
        .collect()
}
