//! Framed little-endian packet protocol (see `protocol.md`).

use std::io::Read;

use crate::error::{Error, Result};
use crate::pipeline::{AcousticImage, Reader};

pub const MAGIC: u32 = 0x4552_5449;
pub const VERSION: u16 = 1;
/// magic, version, msg_type, serial, timestamp, seq, payload_len.
pub const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 8 + 8 + 8;
pub const CRC_LEN: usize = 4;
/// Size of a frame with an empty payload.
pub const MIN_FRAME_LEN: usize = HEADER_LEN + CRC_LEN;
/// Largest payload the decoder will wait for before declaring a framing error.
pub const DEFAULT_MAX_PAYLOAD: u64 = 1 << 28;

const MAGIC_BYTES: [u8; 4] = MAGIC.to_le_bytes();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum MsgType {
    RawMeasurement = 1,
    ProcessedImage = 2,
    Subscribe = 3,
    Ack = 4,
    Error = 5,
}

impl TryFrom<u16> for MsgType {
    type Error = crate::error::Error;

    fn try_from(v: u16) -> Result<Self> {
        Ok(match v {
            1 => Self::RawMeasurement,
            2 => Self::ProcessedImage,
            3 => Self::Subscribe,
            4 => Self::Ack,
            5 => Self::Error,
            other => return Err(Error::Protocol(format!("unknown message type {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub msg_type: MsgType,
    pub sensor_serial: u32,
    pub timestamp_us: u64,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn new(msg_type: MsgType, sensor_serial: u32, timestamp_us: u64, seq: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            sensor_serial,
            timestamp_us,
            seq,
            payload,
        }
    }

    /// SUBSCRIBE carrying a serial filter; an empty filter means all sensors.
    pub fn subscribe(serials: &[u32]) -> Self {
        Self::new(MsgType::Subscribe, 0, 0, 0, encode_serial_filter(serials))
    }

    pub fn ack(sensor_serial: u32, timestamp_us: u64, seq: u64) -> Self {
        Self::new(MsgType::Ack, sensor_serial, timestamp_us, seq, Vec::new())
    }

    pub fn error(sensor_serial: u32, timestamp_us: u64, seq: u64, message: &str) -> Self {
        Self::new(MsgType::Error, sensor_serial, timestamp_us, seq, message.as_bytes().to_vec())
    }

    pub fn raw(m: &RawMeasurement) -> Self {
        Self::new(
            MsgType::RawMeasurement,
            m.sensor_serial,
            m.timestamp_us,
            m.seq,
            encode_raw_measurement(m),
        )
    }

    pub fn image(img: &AcousticImage, seq: u64) -> Self {
        Self::new(MsgType::ProcessedImage, img.sensor_serial, img.timestamp_us, seq, encode_image(img))
    }

    pub fn frame_len(&self) -> usize {
        MIN_FRAME_LEN + self.payload.len()
    }

    /// Text of an ERROR packet.
    pub fn error_message(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

pub fn encode_packet(p: &Packet) -> Result<Vec<u8>> {
    if p.payload.len() as u64 > u32::MAX as u64 {
        return Err(Error::Encode(format!("payload of {} bytes exceeds 2^32 - 1", p.payload.len())));
    }
    let mut out = Vec::with_capacity(p.frame_len());
    out.extend_from_slice(&MAGIC_BYTES);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.msg_type as u16).to_le_bytes());
    out.extend_from_slice(&p.sensor_serial.to_le_bytes());
    out.extend_from_slice(&p.timestamp_us.to_le_bytes());
    out.extend_from_slice(&p.seq.to_le_bytes());
    out.extend_from_slice(&(p.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&p.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes exactly one complete frame.
pub fn decode_packet(bytes: &[u8]) -> Result<Packet> {
    let mut d = Decoder::new();
    d.feed(bytes);
    match d.next_packet() {
        Some(Ok(p)) if d.buffered() == 0 => Ok(p),
        Some(Ok(_)) => Err(Error::Framing(format!("{} bytes after the frame", d.buffered()))),
        Some(Err(e)) => Err(e),
        None => Err(Error::decode(format!(
            "truncated frame: {} more bytes needed",
            d.missing().max(1)
        ))),
    }
}

/// Incremental decoder for one connection.
///
/// `next_packet` returns `None` while the buffered bytes do not yet hold a
/// full frame (nothing is consumed in that case). A framing error drops bytes
/// up to the next magic candidate; an integrity error drops the whole frame.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: Vec<u8>,
    start: usize,
    max_payload: Option<u64>,
    missing: usize,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_max_payload(max_payload: u64) -> Self {
        Self {
            max_payload: Some(max_payload),
            ..Self::default()
        }
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start >= self.buf.len() / 2 {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes held but not yet consumed.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    /// Bytes still needed to complete the pending frame, as of the last call.
    pub fn missing(&self) -> usize {
        self.missing
    }

    fn pending(&self) -> &[u8] {
        &self.buf[self.start..]
    }

    pub fn next_packet(&mut self) -> Option<Result<Packet>> {
        self.missing = 0;
        let avail = self.buffered();
        if avail < 4 {
            if avail > 0 && !MAGIC_BYTES.starts_with(self.pending()) {
                return Some(Err(self.resync()));
            }
            self.missing = 4 - avail;
            return None;
        }
        if self.pending()[..4] != MAGIC_BYTES {
            return Some(Err(self.resync()));
        }
        if avail < HEADER_LEN {
            self.missing = HEADER_LEN - avail;
            return None;
        }
        let h = &self.pending()[..HEADER_LEN];
        let payload_len = u64::from_le_bytes(h[28..36].try_into().expect("8 bytes"));
        let limit = self.max_payload.unwrap_or(DEFAULT_MAX_PAYLOAD);
        if payload_len > limit {
            self.start += 1;
            let e = self.resync();
            return Some(Err(Error::Framing(format!(
                "declared payload of {payload_len} bytes exceeds limit {limit}; {e}"
            ))));
        }
        let total = MIN_FRAME_LEN + payload_len as usize;
        if avail < total {
            self.missing = total - avail;
            return None;
        }
        let frame = &self.buf[self.start..self.start + total];
        let expected = u32::from_le_bytes(frame[total - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&frame[..total - 4]);
        let result = if expected != computed {
            Err(Error::Integrity { expected, computed })
        } else {
            parse_checked(frame, payload_len as usize)
        };
        self.start += total;
        Some(result)
    }

    /// Drops bytes until the buffer starts with a possible magic prefix.
    fn resync(&mut self) -> Error {
        let pending = self.pending();
        let skip = (1..pending.len())
            .find(|&i| {
                let tail = &pending[i..];
                let n = tail.len().min(4);
                tail[..n] == MAGIC_BYTES[..n]
            })
            .unwrap_or(pending.len());
        self.start += skip;
        Error::Framing(format!("bad magic, skipped {skip} bytes"))
    }
}

fn parse_checked(frame: &[u8], payload_len: usize) -> Result<Packet> {
    let version = u16::from_le_bytes([frame[4], frame[5]]);
    if version != VERSION {
        return Err(Error::Protocol(format!("unsupported protocol version {version}")));
    }
    let msg_type = MsgType::try_from(u16::from_le_bytes([frame[6], frame[7]]))?;
    Ok(Packet {
        msg_type,
        sensor_serial: u32::from_le_bytes(frame[8..12].try_into().expect("4 bytes")),
        timestamp_us: u64::from_le_bytes(frame[12..20].try_into().expect("8 bytes")),
        seq: u64::from_le_bytes(frame[20..28].try_into().expect("8 bytes")),
        payload: frame[HEADER_LEN..HEADER_LEN + payload_len].to_vec(),
    })
}

/// Blocking packet source over any byte stream.
pub struct PacketReader<R> {
    inner: R,
    decoder: Decoder,
    chunk: Vec<u8>,
}

impl<R: Read> PacketReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            decoder: Decoder::new(),
            chunk: vec![0; 64 * 1024],
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    /// Next packet, `Ok(None)` on clean end of stream. Decode errors are
    /// returned one at a time; the reader stays usable after them.
    pub fn next_packet(&mut self) -> Result<Option<Packet>> {
        loop {
            if let Some(r) = self.decoder.next_packet() {
                return r.map(Some);
            }
            let n = self.inner.read(&mut self.chunk)?;
            if n == 0 {
                if self.decoder.buffered() > 0 {
                    let left = self.decoder.buffered();
                    self.decoder = Decoder::new();
                    return Err(Error::Framing(format!("stream ended inside a frame ({left} bytes)")));
                }
                return Ok(None);
            }
            self.decoder.feed(&self.chunk[..n]);
        }
    }
}

/// One capture as sent by a sensor: packed PDM bits plus identification.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeasurement {
    pub sensor_serial: u32,
    pub timestamp_us: u64,
    pub seq: u64,
    pub channels: u16,
    pub frames: u64,
    pub pdm_rate: f64,
    pub packed: Vec<u8>,
}

const RAW_HEADER_LEN: usize = 4 + 8 + 8 + 2 + 8 + 8;

impl RawMeasurement {
    pub fn expected_packed_len(&self) -> usize {
        self.channels as usize * self.frames as usize / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames % 8 != 0 {
            return Err(Error::decode(format!("frame count {} is not a multiple of 8", self.frames)));
        }
        if self.packed.len() != self.expected_packed_len() {
            return Err(Error::decode(format!(
                "packed length {} does not match {} channels x {} frames",
                self.packed.len(),
                self.channels,
                self.frames
            )));
        }
        if !(self.pdm_rate > 0.0 && self.pdm_rate.is_finite()) {
            return Err(Error::decode("PDM rate must be positive"));
        }
        Ok(())
    }
}

pub fn encode_raw_measurement(m: &RawMeasurement) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + m.packed.len());
    out.extend_from_slice(&m.sensor_serial.to_le_bytes());
    out.extend_from_slice(&m.timestamp_us.to_le_bytes());
    out.extend_from_slice(&m.seq.to_le_bytes());
    out.extend_from_slice(&m.channels.to_le_bytes());
    out.extend_from_slice(&m.frames.to_le_bytes());
    out.extend_from_slice(&m.pdm_rate.to_le_bytes());
    out.extend_from_slice(&m.packed);
    out
}

pub fn decode_raw_measurement(bytes: &[u8]) -> Result<RawMeasurement> {
    let mut r = Reader::new(bytes);
    let sensor_serial = r.u32()?;
    let timestamp_us = r.u64()?;
    let seq = r.u64()?;
    let channels = r.u16()?;
    let frames = r.u64()?;
    let pdm_rate = r.f64()?;
    let need = (channels as u64)
        .checked_mul(frames)
        .map(|b| b / 8)
        .ok_or_else(|| Error::decode("measurement shape overflows"))?;
    if need > usize::MAX as u64 {
        return Err(Error::decode("measurement shape overflows"));
    }
    let packed = r.take(need as usize)?.to_vec();
    if r.remaining() != 0 {
        return Err(Error::decode(format!("{} trailing bytes after measurement", r.remaining())));
    }
    let m = RawMeasurement {
        sensor_serial,
        timestamp_us,
        seq,
        channels,
        frames,
        pdm_rate,
        packed,
    };
    m.validate()?;
    Ok(m)
}

pub fn encode_image(img: &AcousticImage) -> Vec<u8> {
    img.encode()
}

pub fn decode_image(bytes: &[u8]) -> Result<AcousticImage> {
    AcousticImage::decode(bytes)
}

pub fn encode_serial_filter(serials: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * serials.len());
    out.extend_from_slice(&(serials.len() as u32).to_le_bytes());
    for s in serials {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Serial filter of a SUBSCRIBE payload; empty payload or empty list = all.
pub fn decode_serial_filter(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    r.need(n.checked_mul(4).ok_or_else(|| Error::decode("filter length overflows"))?)?;
    let serials = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::decode(format!("{} trailing bytes after serial filter", r.remaining())));
    }
    Ok(serials)
}
