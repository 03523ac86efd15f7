use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};

use super::app::NO_PROCESSED_STREAM;
use super::storage::Storage;
use crate::error::{Error, Result};
use crate::pipeline::{AcousticImage, PipelineConfig, Workspace};
use crate::wire::{decode_raw_measurement, decode_serial_filter, encode_packet, MsgType, Packet, PacketReader, RawMeasurement};

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentralMode {
    Storage,
    Processing,
}

impl FromStr for CentralMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "storage" => Ok(Self::Storage),
            "processing" => Ok(Self::Processing),
            other => Err(Error::config(format!("unknown central mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentralConfig {
    pub mode: CentralMode,
    /// `host:port`; port 0 picks a free one.
    pub listen: String,
    pub workers: usize,
    /// Required in processing mode.
    pub pipeline: Option<Arc<PipelineConfig>>,
    /// Required in storage mode.
    pub storage_dir: Option<PathBuf>,
    pub input_capacity: usize,
    pub output_capacity: usize,
    /// Artificial per-measurement worker delay, for exercising backpressure.
    pub worker_delay: Duration,
}

impl CentralConfig {
    pub fn storage(listen: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            mode: CentralMode::Storage,
            listen: listen.into(),
            workers: 1,
            pipeline: None,
            storage_dir: Some(dir.into()),
            input_capacity: 16,
            output_capacity: 16,
            worker_delay: Duration::ZERO,
        }
    }

    pub fn processing(listen: impl Into<String>, pipeline: Arc<PipelineConfig>, workers: usize) -> Self {
        Self {
            mode: CentralMode::Processing,
            listen: listen.into(),
            workers,
            pipeline: Some(pipeline),
            storage_dir: None,
            input_capacity: 16,
            output_capacity: 16,
            worker_delay: Duration::ZERO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("worker count must be >= 1"));
        }
        if self.input_capacity == 0 || self.output_capacity == 0 {
            return Err(Error::config("queue capacities must be >= 1"));
        }
        match self.mode {
            CentralMode::Processing if self.pipeline.is_none() => {
                Err(Error::config("processing mode needs a pipeline config"))
            }
            CentralMode::Storage if self.storage_dir.is_none() => {
                Err(Error::config("storage mode needs an output directory"))
            }
            _ => Ok(()),
        }
    }
}

/// Counter snapshot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CentralStats {
    pub connections: u64,
    /// RAW_MEASUREMENT packets accepted into the input queue.
    pub received: u64,
    /// Re-sent measurements already ingested (acknowledged, not re-queued).
    pub duplicates: u64,
    pub malformed: u64,
    pub stored: u64,
    pub processed: u64,
    pub failed: u64,
    /// Results released by the dispatcher, in ingest order.
    pub dispatched: u64,
    /// Frames written to subscriber sockets.
    pub delivered: u64,
    pub subscribers: u64,
}

#[derive(Debug, Default)]
struct Counters {
    connections: AtomicU64,
    received: AtomicU64,
    duplicates: AtomicU64,
    malformed: AtomicU64,
    stored: AtomicU64,
    processed: AtomicU64,
    failed: AtomicU64,
    dispatched: AtomicU64,
    delivered: AtomicU64,
    subscribers: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

impl Counters {
    fn snapshot(&self) -> CentralStats {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CentralStats {
            connections: g(&self.connections),
            received: g(&self.received),
            duplicates: g(&self.duplicates),
            malformed: g(&self.malformed),
            stored: g(&self.stored),
            processed: g(&self.processed),
            failed: g(&self.failed),
            dispatched: g(&self.dispatched),
            delivered: g(&self.delivered),
            subscribers: g(&self.subscribers),
        }
    }
}

struct Job {
    index: u64,
    measurement: RawMeasurement,
}

struct Output {
    index: u64,
    serial: u32,
    timestamp_us: u64,
    seq: u64,
    result: std::result::Result<AcousticImage, String>,
}

struct Subscriber {
    filter: Vec<u32>,
    tx: Sender<Arc<Vec<u8>>>,
}

/// Ingest bookkeeping shared by sensor connections.
struct Ingest {
    next_index: u64,
    last_seq: HashMap<u32, u64>,
    tx: Option<Sender<Job>>,
}

struct Shared {
    mode: CentralMode,
    stop: AtomicBool,
    counters: Arc<Counters>,
    ingest: Mutex<Ingest>,
    subscribers: Mutex<Vec<Subscriber>>,
    output_capacity: usize,
}

/// A running central node.
pub struct CentralNode {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
    workers: Vec<JoinHandle<()>>,
    dispatcher: Option<JoinHandle<()>>,
}

impl CentralNode {
    pub fn start(cfg: CentralConfig) -> Result<Self> {
        cfg.validate()?;
        let (in_tx, in_rx) = bounded::<Job>(cfg.input_capacity);
        let (out_tx, out_rx) = bounded::<Output>(cfg.output_capacity);
        let counters = Arc::new(Counters::default());
        let mut workers = Vec::with_capacity(cfg.workers);
        match cfg.mode {
            CentralMode::Processing => {
                let pipeline = cfg.pipeline.clone().expect("validated");
                for w in 0..cfg.workers {
                    // built here so configuration errors surface before binding
                    let ws = Workspace::new(pipeline.clone())?;
                    let (rx, tx) = (in_rx.clone(), out_tx.clone());
                    let delay = cfg.worker_delay;
                    workers.push(spawn(format!("worker-{w}"), move || process_worker(ws, rx, tx, delay)));
                }
            }
            CentralMode::Storage => {
                let storage = Arc::new(Storage::open(cfg.storage_dir.as_ref().expect("validated"))?);
                for w in 0..cfg.workers {
                    let (rx, storage, counters) = (in_rx.clone(), storage.clone(), counters.clone());
                    let delay = cfg.worker_delay;
                    workers.push(spawn(format!("worker-{w}"), move || {
                        storage_worker(storage, rx, &counters, delay)
                    }));
                }
            }
        }
        let listener = TcpListener::bind(&cfg.listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            mode: cfg.mode,
            stop: AtomicBool::new(false),
            counters,
            ingest: Mutex::new(Ingest {
                next_index: 0,
                last_seq: HashMap::new(),
                tx: Some(in_tx),
            }),
            subscribers: Mutex::new(Vec::new()),
            output_capacity: cfg.output_capacity,
        });
        let dispatcher = {
            let shared = shared.clone();
            spawn("dispatcher".into(), move || dispatch(shared, out_rx))
        };
        drop(out_tx);
        let connections = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let (shared, conns) = (shared.clone(), connections.clone());
            spawn("accept".into(), move || accept_loop(listener, shared, conns))
        };
        log::info!("central node ({:?}) listening on {addr}", cfg.mode);
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
            connections,
            workers,
            dispatcher: Some(dispatcher),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> CentralStats {
        self.shared.counters.snapshot()
    }

    /// Polls the counters until `done` holds or `timeout` passes.
    pub fn wait_for(&self, timeout: Duration, done: impl Fn(&CentralStats) -> bool) -> bool {
        let end = Instant::now() + timeout;
        loop {
            if done(&self.stats()) {
                return true;
            }
            if Instant::now() >= end {
                return false;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Stops accepting, drains the queues and joins every thread.
    pub fn shutdown(mut self) -> CentralStats {
        self.stop_all();
        self.stats()
    }

    fn stop_all(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        // sends happen under this lock, so nothing is enqueued after this point
        self.shared.ingest.lock().expect("ingest").tx = None;
        for t in self.workers.drain(..) {
            let _ = t.join();
        }
        if let Some(t) = self.dispatcher.take() {
            let _ = t.join();
        }
        // subscriber writers drain what they hold, then see the disconnect
        self.shared.subscribers.lock().expect("subscribers").clear();
        let conns: Vec<_> = self.connections.lock().expect("connections").drain(..).collect();
        for t in conns {
            let _ = t.join();
        }
    }
}

impl Drop for CentralNode {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// Runs a central node until the process is terminated.
pub fn central_node_run(cfg: CentralConfig) -> Result<()> {
    let node = CentralNode::start(cfg)?;
    println!("listening on {}", node.local_addr());
    loop {
        thread::sleep(Duration::from_secs(10));
        log::info!("{:?}", node.stats());
    }
}

fn spawn<F: FnOnce() + Send + 'static>(name: String, f: F) -> JoinHandle<()> {
    thread::Builder::new().name(name).spawn(f).expect("spawn thread")
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, conns: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                bump(&shared.counters.connections);
                log::debug!("connection from {peer}");
                let shared = shared.clone();
                let handle = spawn(format!("conn-{peer}"), move || {
                    if let Err(e) = serve_connection(stream, &shared) {
                        log::debug!("connection {peer} closed: {e}");
                    }
                });
                let mut list = conns.lock().expect("connections");
                list.retain(|h| !h.is_finished());
                list.push(handle);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn is_timeout(e: &Error) -> bool {
    matches!(e, Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

fn serve_connection(stream: TcpStream, shared: &Shared) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = PacketReader::new(stream);
    let mut role: Option<MsgType> = None;
    loop {
        if shared.stop.load(Ordering::Relaxed) {
            return Ok(());
        }
        let packet = match reader.next_packet() {
            Ok(Some(p)) => p,
            Ok(None) => return Ok(()),
            Err(e) if is_timeout(&e) => continue,
            Err(Error::Io(e)) => return Err(Error::Io(e)),
            Err(e) => {
                bump(&shared.counters.malformed);
                log::warn!("malformed packet: {e}");
                continue;
            }
        };
        match (role, packet.msg_type) {
            (None | Some(MsgType::RawMeasurement), MsgType::RawMeasurement) => {
                role = Some(MsgType::RawMeasurement);
                if let Some(ack) = ingest(shared, &packet) {
                    writer.write_all(&encode_packet(&ack)?)?;
                }
            }
            (None, MsgType::Subscribe) => return serve_subscriber(writer, shared, &packet),
            (_, other) => {
                bump(&shared.counters.malformed);
                log::warn!("unexpected {other:?} packet on a {role:?} connection");
            }
        }
    }
}

/// Queues one measurement (blocking while the input queue is full) and
/// returns the ACK to send back.
fn ingest(shared: &Shared, packet: &Packet) -> Option<Packet> {
    let m = match decode_raw_measurement(&packet.payload) {
        Ok(m) if m.sensor_serial == packet.sensor_serial && m.seq == packet.seq => m,
        Ok(_) => {
            bump(&shared.counters.malformed);
            log::warn!("measurement header disagrees with its payload");
            return None;
        }
        Err(e) => {
            bump(&shared.counters.malformed);
            log::warn!("bad measurement payload: {e}");
            return None;
        }
    };
    let ack = Packet::ack(m.sensor_serial, m.timestamp_us, m.seq);
    let mut ing = shared.ingest.lock().expect("ingest");
    if ing.last_seq.get(&m.sensor_serial).is_some_and(|&last| m.seq <= last) {
        bump(&shared.counters.duplicates);
        return Some(ack);
    }
    let index = ing.next_index;
    let tx = ing.tx.clone()?;
    let serial = m.sensor_serial;
    let seq = m.seq;
    if tx.send(Job { index, measurement: m }).is_err() {
        return None;
    }
    ing.next_index += 1;
    ing.last_seq.insert(serial, seq);
    bump(&shared.counters.received);
    Some(ack)
}

fn serve_subscriber(mut writer: TcpStream, shared: &Shared, packet: &Packet) -> Result<()> {
    if shared.mode == CentralMode::Storage {
        writer.write_all(&encode_packet(&Packet::error(0, 0, 0, NO_PROCESSED_STREAM))?)?;
        return Ok(());
    }
    let filter = match decode_serial_filter(&packet.payload) {
        Ok(f) => f,
        Err(e) => {
            bump(&shared.counters.malformed);
            writer.write_all(&encode_packet(&Packet::error(0, 0, 0, &e.to_string()))?)?;
            return Err(e);
        }
    };
    let (tx, rx) = bounded::<Arc<Vec<u8>>>(shared.output_capacity);
    shared.subscribers.lock().expect("subscribers").push(Subscriber { filter, tx });
    bump(&shared.counters.subscribers);
    let result = loop {
        match rx.recv_timeout(POLL) {
            Ok(frame) => {
                if let Err(e) = writer.write_all(&frame) {
                    break Err(e.into());
                }
                bump(&shared.counters.delivered);
            }
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break Ok(()),
        }
    };
    shared.counters.subscribers.fetch_sub(1, Ordering::Relaxed);
    result
}

fn process_worker(mut ws: Workspace, rx: Receiver<Job>, tx: Sender<Output>, delay: Duration) {
    for job in rx {
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        let m = &job.measurement;
        let result = match catch_unwind(AssertUnwindSafe(|| ws.process(m))) {
            Ok(r) => r.map_err(|e| e.to_string()),
            Err(_) => {
                // a panic may leave buffers half written; start from a fresh workspace
                match Workspace::new(ws.config().clone()) {
                    Ok(fresh) => ws = fresh,
                    Err(e) => log::error!("cannot rebuild workspace: {e}"),
                }
                Err("worker panicked while processing".to_string())
            }
        };
        if let Err(e) = &result {
            log::warn!("serial {} seq {}: {e}", m.sensor_serial, m.seq);
        }
        let out = Output {
            index: job.index,
            serial: m.sensor_serial,
            timestamp_us: m.timestamp_us,
            seq: m.seq,
            result,
        };
        if tx.send(out).is_err() {
            return;
        }
    }
}

fn storage_worker(storage: Arc<Storage>, rx: Receiver<Job>, counters: &Counters, delay: Duration) {
    for job in rx {
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        match storage.store(&job.measurement) {
            Ok(_) => bump(&counters.stored),
            Err(e) => {
                bump(&counters.failed);
                log::error!("storing seq {} failed: {e}", job.measurement.seq);
            }
        }
    }
}

fn dispatch(shared: Arc<Shared>, rx: Receiver<Output>) {
    let mut pending = BTreeMap::new();
    let mut next = 0u64;
    for out in rx {
        pending.insert(out.index, out);
        while let Some(out) = pending.remove(&next) {
            release(&shared, out);
            next += 1;
        }
    }
    if !pending.is_empty() {
        log::warn!("{} results never became releasable", pending.len());
    }
}

fn release(shared: &Shared, out: Output) {
    let packet = match &out.result {
        Ok(img) => {
            bump(&shared.counters.processed);
            Packet::image(img, out.seq)
        }
        Err(msg) => {
            bump(&shared.counters.failed);
            Packet::error(out.serial, out.timestamp_us, out.seq, msg)
        }
    };
    let frame = match encode_packet(&packet) {
        Ok(f) => Arc::new(f),
        Err(e) => {
            log::error!("cannot encode result: {e}");
            return;
        }
    };
    let mut subs = shared.subscribers.lock().expect("subscribers");
    // blocking send: a slow subscriber throttles the pipeline instead of losing frames
    subs.retain(|s| !(s.filter.is_empty() || s.filter.contains(&out.serial)) || s.tx.send(frame.clone()).is_ok());
    bump(&shared.counters.dispatched);
}
