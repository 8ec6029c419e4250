//! On-disk formats shared between stages.
//!
//! Time tags: little-endian records of `u64` tag followed by a `u8` channel
//! (0 = H, 1 = V, 2 = D, 3 = A), with a JSON sidecar giving the resolution
//! and start epoch.
//!
//! Source log: `b"QSRC"`, a `u32` version, a `u32` table length, then one
//! 8-byte record per table slot (`u32` index, `u8` intensity, `u8` basis,
//! `u8` bit, one pad byte), then 48-byte per-second epoch markers until EOF
//! (`u64` second, `u64` first global slot, three `f64` wave-plate angles,
//! `f64` predicted source QBER). The JSON sidecar carries the seed and
//! source parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::receiver::{Channel, DetectionEvent};
use crate::transmitter::{Basis, Intensity, SequenceMode, SlotSpec, SourceConfig, WaveplateTriplet};

pub const TIMETAG_RECORD_BYTES: usize = 9;
pub const SOURCE_MAGIC: &[u8; 4] = b"QSRC";
pub const SOURCE_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

// ---------------------------------------------------------------------------
// Time tags
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTagSidecar {
    pub resolution: f64,
    pub start_epoch: f64,
    pub records: u64,
    pub record_layout: String,
}

impl TimeTagSidecar {
    pub fn new(resolution: f64, start_epoch: f64) -> Self {
        TimeTagSidecar {
            resolution,
            start_epoch,
            records: 0,
            record_layout: "u64le tag, u8 channel (0=H,1=V,2=D,3=A)".into(),
        }
    }
}

pub struct TimeTagWriter {
    path: PathBuf,
    out: BufWriter<File>,
    sidecar: TimeTagSidecar,
}

impl TimeTagWriter {
    pub fn create(path: &Path, resolution: f64, start_epoch: f64) -> Result<Self> {
        Ok(TimeTagWriter {
            path: path.to_owned(),
            out: create(path)?,
            sidecar: TimeTagSidecar::new(resolution, start_epoch),
        })
    }

    pub fn write(&mut self, events: &[DetectionEvent]) -> Result<()> {
        for e in events {
            let mut rec = [0u8; TIMETAG_RECORD_BYTES];
            rec[..8].copy_from_slice(&e.tag.to_le_bytes());
            rec[8] = e.channel as u8;
            self.out.write_all(&rec).map_err(|err| Error::io(&self.path, err))?;
        }
        self.sidecar.records += events.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<TimeTagSidecar> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        write_json(&sidecar_path(&self.path), &self.sidecar)?;
        Ok(self.sidecar)
    }
}

/// Streaming reader over a time-tag file.
pub struct TimeTagReader {
    path: PathBuf,
    input: BufReader<File>,
    pub sidecar: TimeTagSidecar,
}

impl TimeTagReader {
    pub fn open(path: &Path) -> Result<Self> {
        let sidecar = read_json(&sidecar_path(path))?;
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(TimeTagReader {
            path: path.to_owned(),
            input: BufReader::with_capacity(1 << 16, f),
            sidecar,
        })
    }
}

impl Iterator for TimeTagReader {
    type Item = Result<DetectionEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut rec = [0u8; TIMETAG_RECORD_BYTES];
        match self.input.read_exact(&mut rec) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return None,
            Err(e) => return Some(Err(Error::io(&self.path, e))),
        }
        let tag = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        Some(match Channel::from_u8(rec[8]) {
            Some(channel) => Ok(DetectionEvent { tag, channel }),
            None => Err(Error::Format {
                what: "time-tag record",
                detail: format!("channel byte {}", rec[8]),
            }),
        })
    }
}

pub fn read_timetags(path: &Path) -> Result<(TimeTagSidecar, Vec<DetectionEvent>)> {
    let reader = TimeTagReader::open(path)?;
    let sidecar = reader.sidecar.clone();
    let events = reader.collect::<Result<Vec<_>>>()?;
    Ok((sidecar, events))
}

// ---------------------------------------------------------------------------
// Source log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSidecar {
    pub seed: u64,
    pub mu: f64,
    pub nu: f64,
    pub p_signal: f64,
    pub p_decoy: f64,
    pub p_vacuum: f64,
    pub clock_rate: f64,
    pub sequence_length: usize,
    pub mode: SequenceMode,
}

impl SourceSidecar {
    pub fn new(config: &SourceConfig, seed: u64) -> Self {
        SourceSidecar {
            seed,
            mu: config.mu,
            nu: config.nu,
            p_signal: config.p_signal,
            p_decoy: config.p_decoy,
            p_vacuum: config.p_vacuum,
            clock_rate: config.clock_rate,
            sequence_length: config.sequence_length,
            mode: config.mode,
        }
    }

    pub fn source_config(&self) -> SourceConfig {
        SourceConfig {
            clock_rate: self.clock_rate,
            mu: self.mu,
            nu: self.nu,
            p_signal: self.p_signal,
            p_decoy: self.p_decoy,
            p_vacuum: self.p_vacuum,
            sequence_length: self.sequence_length,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMarker {
    pub second: u64,
    pub first_slot: u64,
    pub triplet: WaveplateTriplet,
    pub predicted_qber: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceLog {
    pub sidecar: SourceSidecar,
    pub table: Vec<SlotSpec>,
    pub epochs: Vec<EpochMarker>,
}

pub struct SourceLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl SourceLogWriter {
    /// `table` may be empty in random mode, where slots are regenerated from
    /// the seed.
    pub fn create(path: &Path, sidecar: &SourceSidecar, table: &[SlotSpec]) -> Result<Self> {
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        out.write_all(SOURCE_MAGIC).map_err(io)?;
        out.write_all(&SOURCE_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(table.len() as u32).to_le_bytes()).map_err(io)?;
        for (i, s) in table.iter().enumerate() {
            let mut rec = [0u8; 8];
            rec[..4].copy_from_slice(&(i as u32).to_le_bytes());
            rec[4] = s.intensity.index() as u8;
            rec[5] = s.basis.index() as u8;
            rec[6] = s.bit;
            out.write_all(&rec).map_err(io)?;
        }
        write_json(&sidecar_path(path), sidecar)?;
        Ok(SourceLogWriter {
            path: path.to_owned(),
            out,
        })
    }

    pub fn epoch(&mut self, m: &EpochMarker) -> Result<()> {
        let mut rec = Vec::with_capacity(48);
        rec.extend_from_slice(&m.second.to_le_bytes());
        rec.extend_from_slice(&m.first_slot.to_le_bytes());
        for a in [m.triplet.alpha, m.triplet.beta, m.triplet.gamma, m.predicted_qber] {
            rec.extend_from_slice(&a.to_le_bytes());
        }
        self.out.write_all(&rec).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "source log",
        detail: detail.into(),
    }
}

pub fn read_source_log(path: &Path) -> Result<SourceLog> {
    let sidecar: SourceSidecar = read_json(&sidecar_path(path))?;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != SOURCE_MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SOURCE_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let table_end = 12 + 8 * n;
    if bytes.len() < table_end || !(bytes.len() - table_end).is_multiple_of(48) {
        return Err(format_err("truncated file"));
    }
    let mut table = Vec::with_capacity(n);
    for rec in bytes[12..table_end].chunks_exact(8) {
        let intensity = Intensity::from_index(rec[4]).ok_or_else(|| format_err("intensity byte"))?;
        let basis = match rec[5] {
            0 => Basis::HV,
            1 => Basis::DA,
            b => return Err(format_err(format!("basis byte {b}"))),
        };
        if rec[6] > 1 {
            return Err(format_err("bit byte"));
        }
        table.push(SlotSpec {
            intensity,
            basis,
            bit: rec[6],
        });
    }
    let mut epochs = Vec::new();
    for rec in bytes[table_end..].chunks_exact(48) {
        let u = |i: usize| u64::from_le_bytes(rec[i..i + 8].try_into().expect("8 bytes"));
        let f = |i: usize| f64::from_le_bytes(rec[i..i + 8].try_into().expect("8 bytes"));
        epochs.push(EpochMarker {
            second: u(0),
            first_slot: u(8),
            triplet: WaveplateTriplet {
                alpha: f(16),
                beta: f(24),
                gamma: f(32),
            },
            predicted_qber: f(40),
        });
    }
    Ok(SourceLog { sidecar, table, epochs })
}

/// Write raw key bits, one ASCII `0`/`1` per bit.
pub fn write_key_bits(path: &Path, bits: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    let text: Vec<u8> = bits.iter().map(|&b| b'0' + (b & 1)).collect();
    w.write_all(&text).map_err(|e| Error::io(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
