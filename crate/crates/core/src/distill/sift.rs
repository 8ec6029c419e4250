//! Sifting and the per-frame SNR filter.

use serde::{Deserialize, Serialize};

use super::correlate::{Assignment, CorrelationResult};
use crate::receiver::DetectionEvent;
use crate::transmitter::{Intensity, PulseSchedule};

/// Detection, sifted and error counts per intensity class, indexed by
/// `Intensity::index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassTally {
    pub detections: [u64; 3],
    pub sifted: [u64; 3],
    pub errors: [u64; 3],
}

impl ClassTally {
    pub fn qber(&self, class: Intensity) -> Option<f64> {
        let i = class.index();
        (self.sifted[i] > 0).then(|| self.errors[i] as f64 / self.sifted[i] as f64)
    }

    pub fn add(&mut self, other: &ClassTally) {
        for i in 0..3 {
            self.detections[i] += other.detections[i];
            self.sifted[i] += other.sifted[i];
            self.errors[i] += other.errors[i];
        }
    }
}

/// Sifted signal-class bits as each party holds them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiftedBits {
    pub alice: Vec<u8>,
    pub bob: Vec<u8>,
}

/// Keep assigned events whose measurement basis matches the preparation
/// basis. Signal-class bits go to the key; every class is tallied, with
/// vacuum detections counted for the background yield.
pub fn sift(events: &[DetectionEvent], assignments: &[Assignment], schedule: &PulseSchedule) -> (ClassTally, SiftedBits) {
    let mut tally = ClassTally::default();
    let mut bits = SiftedBits::default();
    for a in assignments {
        let spec = schedule.slot(a.global_slot);
        let ch = events[a.event].channel;
        let i = spec.intensity.index();
        tally.detections[i] += 1;
        if ch.basis() != spec.basis {
            continue;
        }
        tally.sifted[i] += 1;
        let bob = ch.bit();
        if bob != spec.bit {
            tally.errors[i] += 1;
        }
        if spec.intensity == Intensity::Signal {
            bits.alice.push(spec.bit);
            bits.bob.push(bob);
        }
    }
    (tally, bits)
}

/// One 1 s frame after correlation and sifting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameData {
    pub frame_index: u64,
    pub total_counts: u64,
    pub kept: bool,
    /// The frame's own correlation, if it succeeded.
    pub correlation: Option<CorrelationResult>,
    /// Index of the frame whose correlation was borrowed, when this one
    /// failed.
    pub borrowed_from: Option<u64>,
    pub tally: ClassTally,
    pub bits: SiftedBits,
}

impl FrameData {
    pub fn qber_signal(&self) -> Option<f64> {
        self.tally.qber(Intensity::Signal)
    }

    pub fn qber_decoy(&self) -> Option<f64> {
        self.tally.qber(Intensity::Decoy)
    }
}

/// Mark frames with at least `threshold` counts as kept and return how many
/// were kept.
pub fn snr_filter(frames: &mut [FrameData], threshold: u64) -> usize {
    let mut kept = 0;
    for f in frames.iter_mut() {
        f.kept = f.total_counts >= threshold;
        kept += usize::from(f.kept);
    }
    kept
}

/// Tallies summed over kept frames.
pub fn kept_tally(frames: &[FrameData]) -> ClassTally {
    let mut t = ClassTally::default();
    for f in frames.iter().filter(|f| f.kept) {
        t.add(&f.tally);
    }
    t
}

/// Per-frame CSV: `frame,counts,kept,qber_sig,qber_dec`. Undefined QBERs are
/// left empty.
pub fn write_frame_csv<W: std::io::Write>(mut w: W, frames: &[FrameData]) -> std::io::Result<()> {
    writeln!(w, "frame,counts,kept,qber_sig,qber_dec")?;
    let fmt = |q: Option<f64>| q.map_or(String::new(), |q| format!("{q:.6}"));
    for f in frames {
        writeln!(
            w,
            "{},{},{},{},{}",
            f.frame_index,
            f.total_counts,
            u8::from(f.kept),
            fmt(f.qber_signal()),
            fmt(f.qber_decoy())
        )?;
    }
    Ok(())
}
