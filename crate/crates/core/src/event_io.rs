//! Event stream formats and accumulation into frames.
//!
//! Two on-disk formats are supported:
//!
//! * CSV: optional header, rows `t_us,x,y,p` with `p` in `{1, -1}`.
//! * Binary: packed little-endian records `(u64 t_us, u16 x, u16 y, i8 p)`,
//!   13 bytes each, no header.
//!
//! Accumulated frames keep raw integer counts. They are only scaled to
//! `[0, 255]` when exported as PGM.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Window length of the flicker-synchronized accumulation, in microseconds.
pub const DEFAULT_WINDOW_US: u64 = 33_000;

/// Size in bytes of one binary event record.
pub const BINARY_RECORD_LEN: usize = 13;

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid event at line {line}: {message}")]
    Validation { line: u64, message: String },
    #[error("binary event file has {len} bytes, not a multiple of {BINARY_RECORD_LEN}")]
    TruncatedBinary { len: usize },
    #[error("invalid polarity {0}, expected +1 or -1")]
    Polarity(i64),
    #[error("event at ({x}, {y}) outside sensor {width}x{height}")]
    OutOfBounds { x: u32, y: u32, width: u32, height: u32 },
    #[error("accumulation window must be positive")]
    ZeroWindow,
    #[error("frame csv: {0}")]
    FrameCsv(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EventIoError + '_ {
    move |source| EventIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u32,
    pub height: u32,
}

impl SensorSize {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// `+1` for a brightness increase, `-1` for a decrease.
    pub p: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Result<Self, EventIoError> {
        if p != 1 && p != -1 {
            return Err(EventIoError::Polarity(p as i64));
        }
        Ok(Self { t, x, y, p })
    }
}

/// Time-ordered events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    sensor: SensorSize,
}

impl EventStream {
    /// Builds a stream, checking bounds and polarity and sorting by timestamp.
    /// The sort is stable so events sharing a timestamp keep their order.
    pub fn new(mut events: Vec<Event>, sensor: SensorSize) -> Result<Self, EventIoError> {
        for e in &events {
            if e.p != 1 && e.p != -1 {
                return Err(EventIoError::Polarity(e.p as i64));
            }
            if !sensor.contains(e.x as u32, e.y as u32) {
                return Err(EventIoError::OutOfBounds {
                    x: e.x as u32,
                    y: e.y as u32,
                    width: sensor.width,
                    height: sensor.height,
                });
            }
        }
        if !events.windows(2).all(|w| w[0].t <= w[1].t) {
            events.sort_by_key(|e| e.t);
        }
        Ok(Self { events, sensor })
    }

    pub fn empty(sensor: SensorSize) -> Self {
        Self {
            events: Vec::new(),
            sensor,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            EventFormat::Csv => "csv",
            EventFormat::Binary => "bin",
        }
    }
}

impl FromStr for EventFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "binary" | "bin" => Ok(EventFormat::Binary),
            other => Err(format!("unknown event format '{other}' (expected csv|binary)")),
        }
    }
}

impl fmt::Display for EventFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventFormat::Csv => "csv",
            EventFormat::Binary => "binary",
        })
    }
}

/// Reads an event file. Unsorted input is sorted on load.
pub fn read_events(
    path: &Path,
    format: EventFormat,
    sensor: SensorSize,
) -> Result<EventStream, EventIoError> {
    let events = match format {
        EventFormat::Csv => parse_csv_events(File::open(path).map_err(io_err(path))?, sensor)?,
        EventFormat::Binary => {
            let mut buf = Vec::new();
            File::open(path)
                .and_then(|mut f| f.read_to_end(&mut buf))
                .map_err(io_err(path))?;
            decode_binary_events(&buf, sensor)?
        }
    };
    EventStream::new(events, sensor)
}

fn parse_csv_events<R: Read>(reader: R, sensor: SensorSize) -> Result<Vec<Event>, EventIoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| EventIoError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        // An optional header is recognised by a non-numeric first field.
        if first && record.get(0).is_some_and(|f| f.parse::<u64>().is_err()) {
            first = false;
            continue;
        }
        first = false;
        if record.len() != 4 {
            return Err(EventIoError::Parse {
                line,
                message: format!("expected 4 fields t_us,x,y,p, found {}", record.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<i64, EventIoError> {
            record[i].parse::<i64>().map_err(|_| EventIoError::Parse {
                line,
                message: format!("field {name} = '{}' is not an integer", &record[i]),
            })
        };
        let t = field(0, "t_us")?;
        let x = field(1, "x")?;
        let y = field(2, "y")?;
        let p = field(3, "p")?;
        if t < 0 {
            return Err(EventIoError::Validation {
                line,
                message: format!("negative timestamp {t}"),
            });
        }
        if p != 1 && p != -1 {
            return Err(EventIoError::Validation {
                line,
                message: format!("polarity {p} not in {{-1, +1}}"),
            });
        }
        if x < 0 || y < 0 || !sensor.contains(x as u32, y as u32) || x > u16::MAX as i64 {
            return Err(EventIoError::Validation {
                line,
                message: format!(
                    "pixel ({x}, {y}) outside sensor {}x{}",
                    sensor.width, sensor.height
                ),
            });
        }
        events.push(Event {
            t: t as u64,
            x: x as u16,
            y: y as u16,
            p: p as i8,
        });
    }
    Ok(events)
}

fn decode_binary_events(buf: &[u8], sensor: SensorSize) -> Result<Vec<Event>, EventIoError> {
    if !buf.len().is_multiple_of(BINARY_RECORD_LEN) {
        return Err(EventIoError::TruncatedBinary { len: buf.len() });
    }
    buf.chunks_exact(BINARY_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
            let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
            let p = rec[12] as i8;
            let record = i as u64 + 1;
            if p != 1 && p != -1 {
                return Err(EventIoError::Validation {
                    line: record,
                    message: format!("polarity {p} not in {{-1, +1}}"),
                });
            }
            if !sensor.contains(x as u32, y as u32) {
                return Err(EventIoError::Validation {
                    line: record,
                    message: format!(
                        "pixel ({x}, {y}) outside sensor {}x{}",
                        sensor.width, sensor.height
                    ),
                });
            }
            Ok(Event { t, x, y, p })
        })
        .collect()
}

/// Writes a stream. CSV output always carries the `t_us,x,y,p` header.
pub fn write_events(
    stream: &EventStream,
    path: &Path,
    format: EventFormat,
) -> Result<(), EventIoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let result = match format {
        EventFormat::Csv => (|| {
            writeln!(w, "t_us,x,y,p")?;
            for e in stream.events() {
                writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
            }
            w.flush()
        })(),
        EventFormat::Binary => (|| {
            for e in stream.events() {
                w.write_all(&e.t.to_le_bytes())?;
                w.write_all(&e.x.to_le_bytes())?;
                w.write_all(&e.y.to_le_bytes())?;
                w.write_all(&[e.p as u8])?;
            }
            w.flush()
        })(),
    };
    result.map_err(io_err(path))
}

/// How events are mapped to pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumMode {
    /// Number of events per pixel regardless of polarity.
    #[default]
    Count,
    /// Absolute value of the signed polarity sum per pixel.
    PolarityBalance,
}

impl FromStr for AccumMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(AccumMode::Count),
            "polarity_balance" | "polarity-balance" => Ok(AccumMode::PolarityBalance),
            other => Err(format!(
                "unknown accumulation mode '{other}' (expected count|polarity_balance)"
            )),
        }
    }
}

/// Event-accumulated image over the half-open interval `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumFrame {
    pub width: u32,
    pub height: u32,
    /// Row-major raw counts.
    pub values: Vec<u32>,
    pub t_start: u64,
    pub t_end: u64,
}

impl AccumFrame {
    pub fn zeros(width: u32, height: u32, t_start: u64, t_end: u64) -> Self {
        Self {
            width,
            height,
            values: vec![0; width as usize * height as usize],
            t_start,
            t_end,
        }
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.values[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u32) {
        let i = self.index(x, y);
        self.values[i] = v;
    }

    pub fn total(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scales counts linearly so the maximum maps to 255.
    pub fn to_u8(&self) -> Vec<u8> {
        let max = self.values.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return vec![0; self.values.len()];
        }
        self.values
            .iter()
            .map(|&v| ((v as u64 * 255 + max as u64 / 2) / max as u64) as u8)
            .collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), EventIoError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        (|| {
            write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
            w.write_all(&self.to_u8())?;
            w.flush()
        })()
        .map_err(io_err(path))
    }

    /// Lossless dump: a `# t_start,t_end` comment then one line of counts per row.
    pub fn write_csv(&self, path: &Path) -> Result<(), EventIoError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        (|| {
            writeln!(w, "# t_start={},t_end={}", self.t_start, self.t_end)?;
            for row in self.values.chunks(self.width.max(1) as usize) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(","))?;
            }
            w.flush()
        })()
        .map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Self, EventIoError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| EventIoError::FrameCsv("empty file".into()))?;
        let parse_kv = |key: &str| -> Result<u64, EventIoError> {
            header
                .trim_start_matches('#')
                .split(',')
                .filter_map(|kv| kv.trim().split_once('='))
                .find(|(k, _)| *k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| EventIoError::FrameCsv(format!("missing {key} in header")))
        };
        let t_start = parse_kv("t_start")?;
        let t_end = parse_kv("t_end")?;
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0u32;
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EventIoError::FrameCsv(format!("line {}: {e}", i + 2)))?;
            match width {
                None => width = Some(row.len() as u32),
                Some(w) if w as usize != row.len() => {
                    return Err(EventIoError::FrameCsv(format!(
                        "line {}: row has {} values, expected {w}",
                        i + 2,
                        row.len()
                    )))
                }
                _ => {}
            }
            values.extend(row);
            height += 1;
        }
        Ok(Self {
            width: width.unwrap_or(0),
            height,
            values,
            t_start,
            t_end,
        })
    }
}

/// Partitions `[t_first, t_last]` into consecutive half-open windows of
/// `window_us` and accumulates each. Windows without events still produce a
/// (zero) frame so frame `k` always covers `t_first + k * window_us`.
pub fn accumulate(
    stream: &EventStream,
    window_us: u64,
    mode: AccumMode,
) -> Result<Vec<AccumFrame>, EventIoError> {
    if window_us == 0 {
        return Err(EventIoError::ZeroWindow);
    }
    let events = stream.events();
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Ok(Vec::new());
    };
    let SensorSize { width, height } = stream.sensor();
    let t0 = first.t;
    let n_frames = ((last.t - t0) / window_us + 1) as usize;
    let mut frames: Vec<AccumFrame> = (0..n_frames as u64)
        .map(|k| AccumFrame::zeros(width, height, t0 + k * window_us, t0 + (k + 1) * window_us))
        .collect();

    match mode {
        AccumMode::Count => {
            for e in events {
                let frame = &mut frames[((e.t - t0) / window_us) as usize];
                let i = frame.index(e.x as u32, e.y as u32);
                frame.values[i] += 1;
            }
        }
        AccumMode::PolarityBalance => {
            let mut signed = vec![0i64; stream.sensor().pixel_count()];
            let mut current = 0usize;
            let flush = |signed: &mut Vec<i64>, frame: &mut AccumFrame| {
                for (dst, s) in frame.values.iter_mut().zip(signed.iter_mut()) {
                    *dst = s.unsigned_abs() as u32;
                    *s = 0;
                }
            };
            for e in events {
                let k = ((e.t - t0) / window_us) as usize;
                if k != current {
                    flush(&mut signed, &mut frames[current]);
                    current = k;
                }
                signed[e.y as usize * width as usize + e.x as usize] += e.p as i64;
            }
            flush(&mut signed, &mut frames[current]);
        }
    }
    Ok(frames)
}
