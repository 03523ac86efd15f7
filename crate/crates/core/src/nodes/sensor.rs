use std::collections::VecDeque;
use std::io::Write;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Select};

use super::sync::{SyncScheduler, Trigger};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::synth::{synthesize_measurement_with, Scene, SigmaDeltaOrder};
use crate::wire::{encode_packet, MsgType, Packet, PacketReader, RawMeasurement};

#[derive(Debug, Clone)]
pub struct SensorConfig {
    pub serial: u32,
    /// `host:port` of the central node.
    pub central: String,
    pub scene: Scene,
    pub pipeline: Arc<PipelineConfig>,
    /// Trigger rate in Hz when the sensor runs its own scheduler.
    pub rate: f64,
    /// Stop after this many triggers.
    pub max_triggers: Option<u64>,
    /// Packets in flight without an ACK before sending pauses.
    pub window: usize,
    /// Local buffer of unacknowledged measurements.
    pub buffer: usize,
    pub modulator: SigmaDeltaOrder,
    pub retry_initial: Duration,
    pub retry_max: Duration,
    /// How long to keep delivering buffered packets after the last trigger.
    pub drain_timeout: Duration,
}

impl SensorConfig {
    pub fn new(serial: u32, central: impl Into<String>, scene: Scene, pipeline: Arc<PipelineConfig>, rate: f64) -> Self {
        Self {
            serial,
            central: central.into(),
            scene,
            pipeline,
            rate,
            max_triggers: None,
            window: 16,
            buffer: 64,
            modulator: SigmaDeltaOrder::default(),
            retry_initial: Duration::from_millis(50),
            retry_max: Duration::from_secs(1),
            drain_timeout: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::config("trigger rate must be positive"));
        }
        if self.window == 0 || self.buffer < self.window {
            return Err(Error::config("need window >= 1 and buffer >= window"));
        }
        self.scene.validate().map_err(|e| Error::config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SensorStats {
    pub triggers: u64,
    /// Frames written, including re-sends after a reconnect.
    pub sent: u64,
    pub resent: u64,
    pub acked: u64,
    /// Measurements discarded from the local buffer (oldest first).
    pub dropped: u64,
    pub reconnects: u64,
    /// Loop iterations that left triggers waiting because the buffer was
    /// full while connected.
    pub blocked: u64,
}

/// Produces measurement frames; reuses the rendered bits when the scene is
/// noise-free.
struct Source {
    cfg: SensorConfig,
    cached: Option<RawMeasurement>,
}

impl Source {
    fn frame(&mut self, t: Trigger) -> Result<Arc<Vec<u8>>> {
        let (serial, order) = (self.cfg.serial, self.cfg.modulator);
        let m = if self.cfg.scene.noise_rms == 0.0 {
            if self.cached.is_none() {
                self.cached = Some(synthesize_measurement_with(&self.cfg.pipeline, &self.cfg.scene, order, serial, 0, 0)?);
            }
            RawMeasurement {
                timestamp_us: t.timestamp_us,
                seq: t.seq,
                ..self.cached.clone().expect("cached above")
            }
        } else {
            let scene = Scene {
                seed: self.cfg.scene.seed ^ t.seq.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                ..self.cfg.scene.clone()
            };
            synthesize_measurement_with(&self.cfg.pipeline, &scene, order, serial, t.timestamp_us, t.seq)?
        };
        Ok(Arc::new(encode_packet(&Packet::raw(&m))?))
    }
}

struct Connection {
    stream: TcpStream,
    acks: Receiver<Option<u64>>,
    reader: Option<JoinHandle<()>>,
}

impl Connection {
    fn open(addr: &str) -> Result<Self> {
        let target = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::config(format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&target, Duration::from_secs(2))?;
        stream.set_nodelay(true)?;
        let (tx, acks) = unbounded();
        let mut reader = PacketReader::new(stream.try_clone()?);
        let handle = thread::spawn(move || loop {
            match reader.next_packet() {
                Ok(Some(p)) if p.msg_type == MsgType::Ack => {
                    if tx.send(Some(p.seq)).is_err() {
                        return;
                    }
                }
                Ok(Some(p)) if p.msg_type == MsgType::Error => log::warn!("central: {}", p.error_message()),
                Ok(Some(p)) => log::warn!("unexpected {:?} from central", p.msg_type),
                Ok(None) | Err(Error::Io(_)) => {
                    let _ = tx.send(None);
                    return;
                }
                Err(e) => log::warn!("bad packet from central: {e}"),
            }
        });
        Ok(Self {
            stream,
            acks,
            reader: Some(handle),
        })
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

/// Sensor emulator loop: one measurement per trigger, sent in order with a
/// bounded window of unacknowledged packets. On connection loss the
/// buffered packets are re-sent after reconnecting; while disconnected the
/// buffer keeps the newest `buffer` measurements and counts the rest as
/// dropped. Returns when the trigger stream ends and the buffer is
/// delivered, or when `stop` is set.
pub fn sensor_node_run(cfg: &SensorConfig, triggers: Receiver<Trigger>, stop: &AtomicBool) -> Result<SensorStats> {
    cfg.validate()?;
    let mut source = Source {
        cfg: cfg.clone(),
        cached: None,
    };
    let mut stats = SensorStats::default();
    let mut pending: VecDeque<(u64, Arc<Vec<u8>>)> = VecDeque::new();
    let mut in_flight = 0usize;
    let mut highest_sent: Option<u64> = None;
    let mut conn: Option<Connection> = None;
    let mut ever_connected = false;
    let mut backoff = cfg.retry_initial;
    let mut next_attempt = Instant::now();
    let mut triggers_done = false;
    let mut drain_deadline: Option<Instant> = None;

    while !stop.load(Ordering::Relaxed) {
        if conn.is_none() && Instant::now() >= next_attempt {
            match Connection::open(&cfg.central) {
                Ok(c) => {
                    if ever_connected {
                        stats.reconnects += 1;
                        log::info!("sensor {} reconnected", cfg.serial);
                    }
                    ever_connected = true;
                    backoff = cfg.retry_initial;
                    in_flight = 0;
                    conn = Some(c);
                }
                Err(e) => {
                    log::debug!("sensor {}: connect failed: {e}", cfg.serial);
                    next_attempt = Instant::now() + backoff;
                    backoff = (backoff * 2).min(cfg.retry_max);
                }
            }
        }

        if let Some(c) = &conn {
            let mut lost = false;
            while let Ok(msg) = c.acks.try_recv() {
                match msg {
                    Some(seq) => acknowledge(&mut pending, &mut in_flight, seq, &mut stats),
                    None => lost = true,
                }
            }
            while !lost && in_flight < pending.len() && in_flight < cfg.window {
                let (seq, frame) = &pending[in_flight];
                if let Err(e) = (&conn.as_ref().expect("connected").stream).write_all(frame) {
                    log::warn!("sensor {}: send failed: {e}", cfg.serial);
                    lost = true;
                    break;
                }
                stats.sent += 1;
                if highest_sent.is_some_and(|h| *seq <= h) {
                    stats.resent += 1;
                }
                highest_sent = Some(highest_sent.map_or(*seq, |h| h.max(*seq)));
                in_flight += 1;
            }
            if lost {
                conn = None;
                in_flight = 0;
                next_attempt = Instant::now() + cfg.retry_initial;
                log::warn!("sensor {}: connection lost, {} buffered", cfg.serial, pending.len());
                continue;
            }
        }

        if triggers_done {
            if pending.is_empty() {
                break;
            }
            let deadline = *drain_deadline.get_or_insert_with(|| Instant::now() + cfg.drain_timeout);
            if Instant::now() >= deadline {
                stats.dropped += pending.len() as u64;
                log::warn!(
                    "sensor {}: gave up on {} undelivered measurements",
                    cfg.serial,
                    pending.len()
                );
                break;
            }
        }

        let take = !triggers_done && (pending.len() < cfg.buffer || conn.is_none());
        if !take && !triggers_done {
            stats.blocked += 1;
        }
        let acks = conn.as_ref().map(|c| c.acks.clone());
        let mut sel = Select::new();
        let t_op = take.then(|| sel.recv(&triggers));
        let a_op = acks.as_ref().map(|a| sel.recv(a));
        let wait = if conn.is_none() {
            next_attempt
                .saturating_duration_since(Instant::now())
                .clamp(Duration::from_millis(1), Duration::from_millis(50))
        } else {
            Duration::from_millis(50)
        };
        let Ok(op) = sel.select_timeout(wait) else {
            continue;
        };
        if Some(op.index()) == t_op {
            match op.recv(&triggers) {
                Ok(t) => {
                    stats.triggers += 1;
                    pending.push_back((t.seq, source.frame(t)?));
                    if pending.len() > cfg.buffer {
                        pending.pop_front();
                        stats.dropped += 1;
                        log::warn!("sensor {}: buffer full, dropped oldest ({} total)", cfg.serial, stats.dropped);
                    }
                    if cfg.max_triggers.is_some_and(|n| stats.triggers >= n) {
                        triggers_done = true;
                    }
                }
                Err(_) => triggers_done = true,
            }
        } else if Some(op.index()) == a_op {
            let msg = op.recv(acks.as_ref().expect("selected"));
            match msg {
                Ok(Some(seq)) => acknowledge(&mut pending, &mut in_flight, seq, &mut stats),
                Ok(None) | Err(_) => {
                    conn = None;
                    in_flight = 0;
                    next_attempt = Instant::now() + cfg.retry_initial;
                    log::warn!("sensor {}: connection lost, {} buffered", cfg.serial, pending.len());
                }
            }
        }
    }
    log::info!("sensor {} finished: {stats:?}", cfg.serial);
    Ok(stats)
}

fn acknowledge(pending: &mut VecDeque<(u64, Arc<Vec<u8>>)>, in_flight: &mut usize, seq: u64, stats: &mut SensorStats) {
    while pending.front().is_some_and(|(s, _)| *s <= seq) {
        pending.pop_front();
        *in_flight = in_flight.saturating_sub(1);
        stats.acked += 1;
    }
}

/// Runs a sensor with its own trigger scheduler until `max_triggers` have
/// been delivered (or forever).
pub fn run_sensor(cfg: &SensorConfig, stop: &AtomicBool) -> Result<SensorStats> {
    cfg.validate()?;
    let mut sched = SyncScheduler::new(cfg.rate)?;
    if let Some(n) = cfg.max_triggers {
        sched = sched.limit(n);
    }
    let rx = sched.subscribe();
    let handle = sched.start();
    let stats = sensor_node_run(cfg, rx, stop);
    drop(handle);
    stats
}
