//! File formats for recorded runs and waveform tables.
//!
//! Runs: CSV with a `t_s,angle_deg,crank_v,cam_v,<six sensors>` header, or the
//! raw-binary `SLR1` layout (magic, u32 channel count, f64 sample rate, then
//! interleaved little-endian f32 samples in the CSV column order minus time).
//!
//! Tables: CSV with an `angle_deg,crank_v,cam_v` header, or `SLC1` (magic,
//! u32 channel count, f64 resolution, u64 sample count, interleaved f32).

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{EngineState, FrameBatch, RuntimeError, Simulator};
use crate::signal::{Channel, CrankAngle, SignalError, TableSet, WaveformTable};

pub const RUN_MAGIC: &[u8; 4] = b"SLR1";
pub const TABLE_MAGIC: &[u8; 4] = b"SLC1";
pub const RUN_CSV_HEADER: &str =
    "t_s,angle_deg,crank_v,cam_v,throttle_v,oil_p_v,boost_p_v,rail_p_v,coolant_t_v,boost_t_v";
pub const TABLE_CSV_HEADER: &str = "angle_deg,crank_v,cam_v";
/// angle, crank, cam and the six sensors.
pub const RUN_CHANNELS: u32 = 9;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("file is empty")]
    Empty,
    #[error("unexpected header: {0:?}")]
    BadHeader(String),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("expected {expected} channels, found {found}")]
    ChannelCount { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("invalid sample rate {0}")]
    SampleRate(f64),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    #[default]
    Csv,
    Bin,
}

impl std::str::FromStr for FileFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "bin" | "raw" => Ok(FileFormat::Bin),
            other => Err(format!("unknown format {other:?} (expected csv or bin)")),
        }
    }
}

/// A run loaded back from disk, column by column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Recording {
    pub sample_rate: f64,
    /// Global index of the first row.
    pub first_sample: u64,
    pub angle_deg: Vec<f64>,
    pub crank: Vec<f64>,
    pub cam: Vec<f64>,
    pub sensors: [Vec<f64>; 6],
}

impl Recording {
    pub fn len(&self) -> usize {
        self.crank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crank.is_empty()
    }

    fn push_row(&mut self, row: &[f64]) {
        self.angle_deg.push(row[0]);
        self.crank.push(row[1]);
        self.cam.push(row[2]);
        for (ch, v) in self.sensors.iter_mut().zip(&row[3..9]) {
            ch.push(*v);
        }
    }

    /// Re-slices the recording into frames for a stream consumer. The
    /// attached end states carry position and time only.
    pub fn frames(&self, frame_size: usize) -> Vec<FrameBatch> {
        let frame_size = frame_size.max(1);
        let rate = self.sample_rate;
        let mut out = Vec::with_capacity(self.len().div_ceil(frame_size));
        let mut start = 0;
        let mut seq = 0;
        while start < self.len() {
            let end = (start + frame_size).min(self.len());
            let first_sample = self.first_sample + start as u64;
            let angle0 = if start == 0 {
                CrankAngle::default()
            } else {
                CrankAngle::new(self.angle_deg[start - 1])
            };
            let mut end_state = EngineState::at_rest();
            end_state.angle = CrankAngle::new(self.angle_deg[end - 1]);
            end_state.t = (self.first_sample + end as u64) as f64 / rate;
            out.push(FrameBatch {
                seq,
                first_sample,
                sample_rate: rate,
                t0: first_sample as f64 / rate,
                angle0,
                angle_deg: self.angle_deg[start..end].to_vec(),
                crank: self.crank[start..end].to_vec(),
                cam: self.cam[start..end].to_vec(),
                sensors: std::array::from_fn(|k| self.sensors[k][start..end].to_vec()),
                end_state,
            });
            seq += 1;
            start = end;
        }
        out
    }
}

/// Anything that accepts frames in order and can be flushed.
pub trait FrameSink {
    fn write_frame(&mut self, frame: &FrameBatch) -> Result<(), FormatError>;
    fn finish(&mut self) -> Result<(), FormatError>;
}

pub struct CsvRunWriter<W: Write> {
    out: W,
    header_done: bool,
}

impl<W: Write> CsvRunWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            header_done: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    fn header(&mut self) -> io::Result<()> {
        if !self.header_done {
            writeln!(self.out, "{RUN_CSV_HEADER}")?;
            self.header_done = true;
        }
        Ok(())
    }
}

impl<W: Write> FrameSink for CsvRunWriter<W> {
    fn write_frame(&mut self, frame: &FrameBatch) -> Result<(), FormatError> {
        self.header()?;
        for j in 0..frame.len() {
            write!(
                self.out,
                "{},{},{},{}",
                frame.time_of(j),
                frame.angle_deg[j],
                frame.crank[j],
                frame.cam[j]
            )?;
            for ch in &frame.sensors {
                write!(self.out, ",{}", ch[j])?;
            }
            writeln!(self.out)?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), FormatError> {
        self.header()?;
        self.out.flush()?;
        Ok(())
    }
}

pub struct BinRunWriter<W: Write> {
    out: W,
    sample_rate: Option<f64>,
}

impl<W: Write> BinRunWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            sample_rate: None,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    fn header(&mut self, rate: f64) -> io::Result<()> {
        if self.sample_rate.is_none() {
            self.out.write_all(RUN_MAGIC)?;
            self.out.write_all(&RUN_CHANNELS.to_le_bytes())?;
            self.out.write_all(&rate.to_le_bytes())?;
            self.sample_rate = Some(rate);
        }
        Ok(())
    }
}

impl<W: Write> FrameSink for BinRunWriter<W> {
    fn write_frame(&mut self, frame: &FrameBatch) -> Result<(), FormatError> {
        self.header(frame.sample_rate)?;
        let mut buf = Vec::with_capacity(frame.len() * RUN_CHANNELS as usize * 4);
        for j in 0..frame.len() {
            let row = [frame.angle_deg[j], frame.crank[j], frame.cam[j]]
                .into_iter()
                .chain(frame.sensors.iter().map(|ch| ch[j]));
            for v in row {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        self.out.write_all(&buf)?;
        Ok(())
    }

    fn finish(&mut self) -> Result<(), FormatError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Counts written by [`export_waveform`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExportSummary {
    pub samples: u64,
    pub frames: u64,
    pub sample_rate: f64,
}

/// Number of samples an export of `duration` seconds contains.
pub fn export_len(duration: f64, sample_rate: f64) -> u64 {
    (duration * sample_rate).round().max(0.0) as u64
}

/// Runs the simulator for `duration` seconds of simulated time, handing
/// every frame to `sink`. The simulator must be started.
pub fn export_waveform(
    sim: &mut Simulator,
    duration: f64,
    sink: &mut dyn FrameSink,
) -> Result<ExportSummary, FormatError> {
    let rate = sim.config().sample_rate;
    let total = export_len(duration, rate);
    let frame = sim.config().frame_size as u64;
    let mut done = 0;
    let mut frames = 0;
    while done < total {
        let n = frame.min(total - done);
        let batch = sim.step(n as usize)?;
        sink.write_frame(&batch)?;
        done += n;
        frames += 1;
    }
    sink.finish()?;
    Ok(ExportSummary {
        samples: done,
        frames,
        sample_rate: rate,
    })
}

/// [`export_waveform`] into a file at `path`.
pub fn export_to_path(
    sim: &mut Simulator,
    duration: f64,
    format: FileFormat,
    path: &Path,
) -> Result<ExportSummary, FormatError> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        FileFormat::Csv => export_waveform(sim, duration, &mut CsvRunWriter::new(file)),
        FileFormat::Bin => export_waveform(sim, duration, &mut BinRunWriter::new(file)),
    }
}

/// Reads a run, telling the formats apart by the binary magic.
pub fn read_run(bytes: &[u8]) -> Result<Recording, FormatError> {
    if bytes.is_empty() {
        return Err(FormatError::Empty);
    }
    if bytes.starts_with(RUN_MAGIC) {
        read_run_bin(bytes)
    } else {
        read_run_csv(bytes)
    }
}

pub fn read_run_path(path: &Path) -> Result<Recording, FormatError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_run(&bytes)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], FormatError> {
    if bytes.len() < n {
        return Err(FormatError::Truncated(format!("missing {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn magic(bytes: &mut &[u8], expected: &[u8; 4]) -> Result<(), FormatError> {
    let m: [u8; 4] = take(bytes, 4, "magic")?.try_into().expect("4 bytes");
    if &m != expected {
        return Err(FormatError::BadMagic(m));
    }
    Ok(())
}

fn le_u32(bytes: &mut &[u8], what: &str) -> Result<u32, FormatError> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().expect("4 bytes")))
}

fn le_u64(bytes: &mut &[u8], what: &str) -> Result<u64, FormatError> {
    Ok(u64::from_le_bytes(take(bytes, 8, what)?.try_into().expect("8 bytes")))
}

fn le_f64(bytes: &mut &[u8], what: &str) -> Result<f64, FormatError> {
    Ok(f64::from_le_bytes(take(bytes, 8, what)?.try_into().expect("8 bytes")))
}

fn f32_rows(body: &[u8], channels: usize) -> Result<impl Iterator<Item = Vec<f64>> + '_, FormatError> {
    let row_bytes = channels * 4;
    if !body.len().is_multiple_of(row_bytes) {
        return Err(FormatError::Truncated(format!(
            "{} trailing bytes after the last full row",
            body.len() % row_bytes
        )));
    }
    Ok(body.chunks_exact(row_bytes).map(|row| {
        row.chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect()
    }))
}

pub fn read_run_bin(mut bytes: &[u8]) -> Result<Recording, FormatError> {
    magic(&mut bytes, RUN_MAGIC)?;
    let channels = le_u32(&mut bytes, "channel count")?;
    if channels != RUN_CHANNELS {
        return Err(FormatError::ChannelCount {
            expected: RUN_CHANNELS,
            found: channels,
        });
    }
    let rate = le_f64(&mut bytes, "sample rate")?;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(FormatError::SampleRate(rate));
    }
    let mut rec = Recording {
        sample_rate: rate,
        ..Default::default()
    };
    for row in f32_rows(bytes, channels as usize)? {
        rec.push_row(&row);
    }
    if rec.is_empty() {
        return Err(FormatError::Empty);
    }
    Ok(rec)
}

fn csv_reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(bytes)
}

fn csv_err(line: u64, message: impl Into<String>) -> FormatError {
    FormatError::Csv {
        line,
        message: message.into(),
    }
}

/// Parses every record as a row of `width` floats.
fn csv_rows(bytes: &[u8], header: &str, width: usize) -> Result<Vec<Vec<f64>>, FormatError> {
    let mut reader = csv_reader(bytes);
    let found = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",");
    if found.is_empty() {
        return Err(FormatError::Empty);
    }
    if found != header {
        return Err(FormatError::BadHeader(found));
    }
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k as u64 + 2;
        let record = record.map_err(|e| csv_err(line, e.to_string()))?;
        if record.len() != width {
            return Err(csv_err(line, format!("expected {width} fields, found {}", record.len())));
        }
        let row = record
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| csv_err(line, format!("{f:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(FormatError::Empty);
    }
    Ok(rows)
}

pub fn read_run_csv(bytes: &[u8]) -> Result<Recording, FormatError> {
    let rows = csv_rows(bytes, RUN_CSV_HEADER, 10)?;
    let n = rows.len();
    let (t_first, t_last) = (rows[0][0], rows[n - 1][0]);
    let raw_rate = if n > 1 {
        (n - 1) as f64 / (t_last - t_first)
    } else {
        1.0 / t_first
    };
    if !(raw_rate > 0.0 && raw_rate.is_finite()) {
        return Err(FormatError::SampleRate(raw_rate));
    }
    // time stamps are printed exactly, so integral rates come back integral
    let rate = if (raw_rate - raw_rate.round()).abs() < 1e-6 * raw_rate {
        raw_rate.round()
    } else {
        raw_rate
    };
    let mut rec = Recording {
        sample_rate: rate,
        first_sample: ((t_first * rate).round() as u64).saturating_sub(1),
        ..Default::default()
    };
    for row in &rows {
        rec.push_row(&row[1..]);
    }
    Ok(rec)
}

pub fn write_tables_csv<W: Write>(tables: &TableSet, mut out: W) -> Result<(), FormatError> {
    writeln!(out, "{TABLE_CSV_HEADER}")?;
    let (crank, cam) = (&tables.crank, &tables.cam);
    for i in 0..crank.len() {
        writeln!(out, "{},{},{}", crank.angle_of(i), crank.samples()[i], cam.samples()[i])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_tables_bin<W: Write>(tables: &TableSet, mut out: W) -> Result<(), FormatError> {
    let (crank, cam) = (&tables.crank, &tables.cam);
    out.write_all(TABLE_MAGIC)?;
    out.write_all(&2u32.to_le_bytes())?;
    out.write_all(&crank.resolution().to_le_bytes())?;
    out.write_all(&(crank.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(crank.len() * 8);
    for (a, b) in crank.samples().iter().zip(cam.samples()) {
        buf.extend_from_slice(&(*a as f32).to_le_bytes());
        buf.extend_from_slice(&(*b as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn write_tables(tables: &TableSet, format: FileFormat, path: &Path) -> Result<(), FormatError> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        FileFormat::Csv => write_tables_csv(tables, file),
        FileFormat::Bin => write_tables_bin(tables, file),
    }
}

/// Reads a table pair in either format.
pub fn read_tables(bytes: &[u8]) -> Result<TableSet, FormatError> {
    if bytes.is_empty() {
        return Err(FormatError::Empty);
    }
    let (resolution, crank, cam) = if bytes.starts_with(TABLE_MAGIC) {
        let mut rest = bytes;
        magic(&mut rest, TABLE_MAGIC)?;
        let channels = le_u32(&mut rest, "channel count")?;
        if channels != 2 {
            return Err(FormatError::ChannelCount {
                expected: 2,
                found: channels,
            });
        }
        let resolution = le_f64(&mut rest, "resolution")?;
        let count = le_u64(&mut rest, "sample count")? as usize;
        let (mut crank, mut cam) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for row in f32_rows(rest, 2)? {
            crank.push(row[0]);
            cam.push(row[1]);
        }
        if crank.len() != count {
            return Err(FormatError::Truncated(format!(
                "header declares {count} samples, found {}",
                crank.len()
            )));
        }
        (resolution, crank, cam)
    } else {
        let rows = csv_rows(bytes, TABLE_CSV_HEADER, 3)?;
        let resolution = if rows.len() > 1 {
            rows[1][0] - rows[0][0]
        } else {
            return Err(FormatError::Truncated("a table needs more than one row".into()));
        };
        let crank = rows.iter().map(|r| r[1]).collect();
        let cam = rows.iter().map(|r| r[2]).collect();
        (resolution, crank, cam)
    };
    Ok(TableSet {
        crank: WaveformTable::from_samples(Channel::Crank, resolution, crank)?.into(),
        cam: WaveformTable::from_samples(Channel::Cam, resolution, cam)?.into(),
    })
}
