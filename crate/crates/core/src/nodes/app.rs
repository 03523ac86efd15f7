use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::pipeline::AcousticImage;
use crate::wire::{decode_image, encode_packet, MsgType, Packet, PacketReader};

/// ERROR text sent to subscribers of a storage-mode central node.
pub const NO_PROCESSED_STREAM: &str = "no processed stream";

/// An image together with the measurement index it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveredImage {
    pub seq: u64,
    pub image: AcousticImage,
}

impl DeliveredImage {
    pub fn serial(&self) -> u32 {
        self.image.sensor_serial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppEvent {
    Image(DeliveredImage),
    /// Seqs `first..=last` of `serial` were never delivered.
    Gap { serial: u32, first: u64, last: u64 },
    /// The central node could not produce an image for this measurement.
    Failed { serial: u32, seq: u64, message: String },
    Resubscribed,
}

/// Application-node side of the image stream.
///
/// Sends SUBSCRIBE with the serial filter, then yields images in arrival
/// order (per-sensor FIFO). After a disconnect it resubscribes with backoff
/// and reports skipped seqs as gaps.
pub struct AppSubscriber {
    addr: String,
    filter: Vec<u32>,
    reader: Option<PacketReader<TcpStream>>,
    last_seq: HashMap<u32, u64>,
    queued: VecDeque<AppEvent>,
    /// Give up resubscribing after this long without a connection.
    pub reconnect_timeout: Duration,
    read_timeout: Option<Duration>,
}

impl AppSubscriber {
    pub fn connect(addr: impl Into<String>, filter: &[u32]) -> Result<Self> {
        let mut s = Self {
            addr: addr.into(),
            filter: filter.to_vec(),
            reader: None,
            last_seq: HashMap::new(),
            queued: VecDeque::new(),
            reconnect_timeout: Duration::from_secs(10),
            read_timeout: None,
        };
        s.subscribe()?;
        Ok(s)
    }

    pub fn filter(&self) -> &[u32] {
        &self.filter
    }

    /// Per-read timeout; `next_event` returns `Ok(None)` when it expires.
    pub fn set_read_timeout(&mut self, timeout: Option<Duration>) -> Result<()> {
        self.read_timeout = timeout;
        if let Some(r) = &self.reader {
            r.get_ref().set_read_timeout(timeout)?;
        }
        Ok(())
    }

    fn subscribe(&mut self) -> Result<()> {
        let target = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::config(format!("cannot resolve {}", self.addr)))?;
        let mut stream = TcpStream::connect_timeout(&target, Duration::from_secs(2))?;
        stream.set_nodelay(true)?;
        stream.write_all(&encode_packet(&Packet::subscribe(&self.filter))?)?;
        stream.set_read_timeout(self.read_timeout)?;
        self.reader = Some(PacketReader::new(stream));
        Ok(())
    }

    fn resubscribe(&mut self) -> Result<()> {
        self.reader = None;
        let end = Instant::now() + self.reconnect_timeout;
        let mut backoff = Duration::from_millis(50);
        loop {
            match self.subscribe() {
                Ok(()) => return Ok(()),
                Err(e) if Instant::now() >= end => return Err(e),
                Err(e) => log::debug!("resubscribe failed: {e}"),
            }
            thread::sleep(backoff);
            backoff = (backoff * 2).min(Duration::from_secs(1));
        }
    }

    /// Next event. `Ok(None)` means the read timeout expired with nothing
    /// new. A storage-mode central yields a protocol error.
    pub fn next_event(&mut self) -> Result<Option<AppEvent>> {
        if let Some(e) = self.queued.pop_front() {
            return Ok(Some(e));
        }
        loop {
            let Some(reader) = self.reader.as_mut() else {
                self.resubscribe()?;
                return Ok(Some(AppEvent::Resubscribed));
            };
            let packet = match reader.next_packet() {
                Ok(Some(p)) => p,
                Ok(None) => {
                    log::warn!("central closed the image stream; resubscribing");
                    self.reader = None;
                    continue;
                }
                Err(Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                    return Ok(None);
                }
                Err(Error::Io(e)) => {
                    log::warn!("image stream failed: {e}; resubscribing");
                    self.reader = None;
                    continue;
                }
                Err(e) => {
                    log::warn!("dropping bad frame: {e}");
                    continue;
                }
            };
            match packet.msg_type {
                MsgType::ProcessedImage => {
                    let image = decode_image(&packet.payload)?;
                    let serial = image.sensor_serial;
                    self.note_seq(serial, packet.seq);
                    self.queued.push_back(AppEvent::Image(DeliveredImage {
                        seq: packet.seq,
                        image,
                    }));
                    return Ok(self.queued.pop_front());
                }
                MsgType::Error => {
                    let message = packet.error_message();
                    if message == NO_PROCESSED_STREAM {
                        return Err(Error::Protocol(message));
                    }
                    self.note_seq(packet.sensor_serial, packet.seq);
                    self.queued.push_back(AppEvent::Failed {
                        serial: packet.sensor_serial,
                        seq: packet.seq,
                        message,
                    });
                    return Ok(self.queued.pop_front());
                }
                other => log::warn!("ignoring unexpected {other:?} packet"),
            }
        }
    }

    fn note_seq(&mut self, serial: u32, seq: u64) {
        if let Some(&last) = self.last_seq.get(&serial) {
            if seq > last + 1 {
                self.queued.push_back(AppEvent::Gap {
                    serial,
                    first: last + 1,
                    last: seq - 1,
                });
            }
        }
        self.last_seq.insert(serial, seq);
    }

    /// Next image, skipping other events. `Ok(None)` on read timeout.
    pub fn next_image(&mut self) -> Result<Option<DeliveredImage>> {
        loop {
            match self.next_event()? {
                Some(AppEvent::Image(img)) => return Ok(Some(img)),
                Some(_) => continue,
                None => return Ok(None),
            }
        }
    }
}

/// Connects and subscribes; an empty filter means every sensor.
pub fn app_node_subscribe(addr: impl Into<String>, filter: &[u32]) -> Result<AppSubscriber> {
    AppSubscriber::connect(addr, filter)
}
