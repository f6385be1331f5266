//! Event records and event-stream files.
//!
//! Two on-disk formats are supported:
//!
//! * CSV: optional `#` comment lines, then `x,y,t,p` rows with `p` in
//!   `{-1, 0, 1}` (`0` reads as negative). Sensor bounds are supplied by the
//!   caller.
//! * Binary: `EVS1`, then little-endian `u16 width`, `u16 height`,
//!   `u64 count`, then `count` records of `u16 x, u16 y, u64 t, i8 p`.

mod manifest;
mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use manifest::{DatasetManifest, SampleEntry, Split};
pub use synth::{generate_synthetic, synth_dataset, SynthConfig, Trajectory};

pub const BINARY_MAGIC: &[u8; 4] = b"EVS1";
const BINARY_HEADER_LEN: usize = 4 + 2 + 2 + 8;
const BINARY_RECORD_LEN: usize = 2 + 2 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(p: i8) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// A single DVS event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Event { x, y, t, p }
    }
}

/// Events ordered by timestamp, together with the sensor resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventCloud {
    events: Vec<Event>,
    width: u16,
    height: u16,
    pub label: Option<usize>,
}

impl EventCloud {
    /// Builds a cloud, stable-sorting by timestamp and rejecting events that
    /// fall outside the sensor.
    pub fn new(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        if let Some((i, e)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| e.x >= width || e.y >= height)
        {
            return Err(Error::Validation(format!(
                "event {i} at ({}, {}) outside {width}x{height} sensor",
                e.x, e.y
            )));
        }
        events.sort_by_key(|e| e.t);
        Ok(EventCloud {
            events,
            width,
            height,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Re-checks the invariants: in-bounds coordinates, non-decreasing time.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::Validation(format!("event {i} out of bounds")));
            }
        }
        if let Some(i) = self.events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Validation(format!(
                "timestamps decrease at event {}",
                i + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// CSV rows; bounds are not stored in the file.
    Csv { width: u16, height: u16 },
    Binary,
}

impl EventFormat {
    /// Picks the format from the extension: `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path, width: u16, height: u16) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv { width, height },
            _ => EventFormat::Binary,
        }
    }
}

pub fn read_events(path: impl AsRef<Path>, format: EventFormat) -> Result<EventCloud> {
    let path = path.as_ref();
    match format {
        EventFormat::Csv { width, height } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, width, height)
        }
        EventFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
    }
}

pub fn write_events(cloud: &EventCloud, path: impl AsRef<Path>, format: EventFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        EventFormat::Csv { .. } => format_csv(cloud).into_bytes(),
        EventFormat::Binary => encode_binary(cloud),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str, width: u16, height: u16) -> Result<EventCloud> {
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = || format!("line {}", lineno + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                loc(),
                format!("expected 4 fields x,y,t,p, found {}", fields.len()),
            ));
        }
        let x: u16 = fields[0]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad x `{}`", fields[0])))?;
        let y: u16 = fields[1]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad y `{}`", fields[1])))?;
        let t: u64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(loc(), format!("bad t `{}`", fields[2])))?;
        let p = match fields[3] {
            "1" | "+1" => Polarity::Positive,
            "0" | "-1" => Polarity::Negative,
            other => return Err(Error::parse(loc(), format!("bad polarity `{other}`"))),
        };
        if x >= width || y >= height {
            return Err(Error::Validation(format!(
                "{}: ({x}, {y}) outside {width}x{height} sensor",
                loc()
            )));
        }
        events.push(Event::new(x, y, t, p));
    }
    EventCloud::new(width, height, events)
}

pub fn format_csv(cloud: &EventCloud) -> String {
    let mut out = String::with_capacity(16 * cloud.len() + 64);
    let _ = writeln!(out, "# width={} height={}", cloud.width, cloud.height);
    for e in &cloud.events {
        let _ = writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.p.sign());
    }
    out
}

pub fn encode_binary(cloud: &EventCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + BINARY_RECORD_LEN * cloud.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&cloud.width.to_le_bytes());
    out.extend_from_slice(&cloud.height.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for e in &cloud.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p.sign() as u8);
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<EventCloud> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::parse(
            format!("offset {}", bytes.len()),
            "truncated header",
        ));
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(Error::parse("offset 0", "missing EVS1 magic"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[BINARY_HEADER_LEN..];
    let expected = (count as u128) * BINARY_RECORD_LEN as u128;
    if (body.len() as u128) != expected {
        return Err(Error::parse(
            format!("offset {}", BINARY_HEADER_LEN),
            format!(
                "header declares {count} events ({expected} bytes) but body has {} bytes",
                body.len()
            ),
        ));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let offset = BINARY_HEADER_LEN + i * BINARY_RECORD_LEN;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = u64::from_le_bytes(rec[4..12].try_into().unwrap());
        let p = Polarity::from_sign(rec[12] as i8).ok_or_else(|| {
            Error::parse(
                format!("offset {}", offset + 12),
                format!("polarity byte {} is not +1 or -1", rec[12] as i8),
            )
        })?;
        if x >= width || y >= height {
            return Err(Error::Validation(format!(
                "record at offset {offset}: ({x}, {y}) outside {width}x{height} sensor"
            )));
        }
        events.push(Event::new(x, y, t, p));
    }
    EventCloud::new(width, height, events)
}
