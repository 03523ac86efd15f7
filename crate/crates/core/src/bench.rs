//! Per-measurement timing of the imaging pipeline and a loopback soak run of
//! the full node stack.

use std::fmt::Write as _;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::GridKind;
use crate::nodes::{now_us, sensor_node_run, AppSubscriber, CentralConfig, CentralNode, SensorConfig, SyncScheduler};
use crate::pipeline::{new_workspace, PipelineConfig, PipelineSettings};
use crate::synth::{synthesize_measurement_with, Reflector, Scene, SigmaDeltaOrder};

/// Timing statistics for one direction-grid configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub config: String,
    pub directions: usize,
    pub n: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl BenchRow {
    /// Statistics over per-measurement durations in milliseconds. `std_ms`
    /// is the sample standard deviation (0 for a single sample).
    pub fn from_samples(config: impl Into<String>, directions: usize, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("need at least one timing sample"));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            config: config.into(),
            directions,
            n,
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub hardware: String,
    /// Threads used by `process()`; the pipeline is single-threaded.
    pub workers: usize,
    /// Unix seconds at the end of the run.
    pub timestamp: u64,
}

impl BenchReport {
    pub fn row(&self, config: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    /// Configurations as columns, the platform as the row; cells are
    /// `mean ± std` in milliseconds.
    pub fn to_table(&self) -> String {
        let mut header = vec![format!("{:<40}", "platform")];
        let mut cells = vec![format!("{:<40}", truncate(&self.hardware, 40))];
        let mut range = vec![format!("{:<40}", "  min / max")];
        for r in &self.rows {
            let title = format!("{} ({})", r.config, r.directions);
            let w = title.len().max(22);
            header.push(format!("{title:>w$}"));
            cells.push(format!("{:>w$}", format!("{:.2} ± {:.2} ms", r.mean_ms, r.std_ms)));
            range.push(format!("{:>w$}", format!("{:.2} / {:.2}", r.min_ms, r.max_ms)));
        }
        let mut out = String::new();
        let line = header.join(" | ");
        let _ = writeln!(out, "{line}");
        let _ = writeln!(out, "{}", "-".repeat(line.chars().count()));
        let _ = writeln!(out, "{}", cells.join(" | "));
        let _ = writeln!(out, "{}", range.join(" | "));
        let n: Vec<String> = self.rows.iter().map(|r| format!("{}={}", r.config, r.n)).collect();
        let _ = writeln!(out, "n: {}; workers: {}; timestamp: {}", n.join(", "), self.workers, self.timestamp);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,directions,n,mean_ms,std_ms,min_ms,max_ms,hardware,workers,timestamp\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},\"{}\",{},{}",
                r.config,
                r.directions,
                r.n,
                r.mean_ms,
                r.std_ms,
                r.min_ms,
                r.max_ms,
                self.hardware.replace('"', "\"\""),
                self.workers,
                self.timestamp
            );
        }
        out
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// CPU model and logical core count, e.g. `Intel(R) Xeon(R) ... x4`.
pub fn hardware_description() -> String {
    let cores = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model} x{cores}")
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Fixed seeded scene used for timing.
pub fn bench_scene() -> Scene {
    Scene::new(
        vec![
            Reflector::from_degrees(1.2, -20.0, 0.0, 0.2),
            Reflector::from_degrees(2.5, 25.0, 10.0, 0.5),
        ],
        0.01,
        2020,
    )
}

/// Times `process()` over `n` synthesized measurements for each grid.
/// Workspace construction, synthesis and one warm-up call are excluded.
pub fn run_benchmark(kinds: &[GridKind], n: usize, scene: &Scene) -> Result<BenchReport> {
    if n == 0 {
        return Err(Error::arg("n must be at least 1"));
    }
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let cfg = Arc::new(PipelineConfig::with_grid(kind)?);
        let mut ws = new_workspace(cfg.clone())?;
        let inputs = (0..n)
            .map(|i| {
                let s = Scene {
                    seed: scene.seed.wrapping_add(i as u64),
                    ..scene.clone()
                };
                synthesize_measurement_with(&cfg, &s, SigmaDeltaOrder::default(), 1, i as u64, i as u64)
            })
            .collect::<Result<Vec<_>>>()?;
        ws.process(&inputs[0])?;
        let mut samples = Vec::with_capacity(n);
        for m in &inputs {
            let t = Instant::now();
            let img = ws.process(m)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(img);
        }
        log::info!("{kind}: {} directions, {n} runs", cfg.directions.len());
        rows.push(BenchRow::from_samples(kind.name(), cfg.directions.len(), &samples)?);
    }
    Ok(BenchReport {
        rows,
        hardware: hardware_description(),
        workers: 1,
        timestamp: unix_seconds(),
    })
}

#[derive(Debug, Clone)]
pub struct SoakConfig {
    pub sensors: usize,
    pub rate: f64,
    pub duration: Duration,
    pub workers: usize,
    pub pipeline: PipelineSettings,
    pub scene: Scene,
    /// Wait this long after the last trigger for outstanding images.
    pub drain: Duration,
}

impl SoakConfig {
    /// Horizontal-plane grid with a noise-free two-reflector scene.
    pub fn new(sensors: usize, rate: f64, duration: Duration, workers: usize) -> Self {
        Self {
            sensors,
            rate,
            duration,
            workers,
            pipeline: PipelineSettings::default(),
            scene: Scene {
                noise_rms: 0.0,
                ..bench_scene()
            },
            drain: Duration::from_secs(30),
        }
    }

    pub fn triggers(&self) -> u64 {
        (self.rate * self.duration.as_secs_f64()).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoakReport {
    pub sensors: usize,
    pub rate: f64,
    pub duration_s: f64,
    pub workers: usize,
    pub expected: u64,
    pub delivered: u64,
    pub images_per_s: f64,
    pub latency_p50_ms: f64,
    pub latency_p90_ms: f64,
    pub latency_p99_ms: f64,
    /// Measurements dropped by sensors plus images never delivered.
    pub drops: u64,
    /// Sensor loop iterations that waited on a full buffer.
    pub backpressure: u64,
    /// Measurements the central node failed to process.
    pub failed: u64,
}

impl SoakReport {
    pub fn to_table(&self) -> String {
        format!(
            "sensors {} | rate {} Hz | duration {:.1} s | workers {}\n\
             delivered {}/{} ({:.2} images/s) | drops {} | failed {} | backpressure {}\n\
             latency p50 {:.1} ms | p90 {:.1} ms | p99 {:.1} ms\n",
            self.sensors,
            self.rate,
            self.duration_s,
            self.workers,
            self.delivered,
            self.expected,
            self.images_per_s,
            self.drops,
            self.failed,
            self.backpressure,
            self.latency_p50_ms,
            self.latency_p90_ms,
            self.latency_p99_ms
        )
    }
}

/// Nearest-rank percentile of sorted values; 0 when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Loopback run of `sensors` emulators on one trigger scheduler, a
/// processing central node with `workers` workers and one subscriber.
/// Latency runs from the trigger timestamp to image arrival.
pub fn run_soak(cfg: &SoakConfig) -> Result<SoakReport> {
    if cfg.sensors == 0 || cfg.workers == 0 {
        return Err(Error::config("soak needs at least one sensor and one worker"));
    }
    let pipeline = Arc::new(cfg.pipeline.build()?);
    let central = CentralNode::start(CentralConfig::processing("127.0.0.1:0", pipeline.clone(), cfg.workers))?;
    let addr = central.local_addr().to_string();
    let mut sub = AppSubscriber::connect(addr.clone(), &[])?;
    sub.set_read_timeout(Some(Duration::from_millis(200)))?;
    if !central.wait_for(Duration::from_secs(5), |s| s.subscribers >= 1) {
        return Err(Error::Protocol("subscriber was not registered".into()));
    }

    let n = cfg.triggers();
    let expected = n * cfg.sensors as u64;
    let mut sched = SyncScheduler::new(cfg.rate)?.limit(n);
    let streams: Vec<_> = (0..cfg.sensors).map(|_| sched.subscribe()).collect();
    let stop = Arc::new(AtomicBool::new(false));
    let sensors = streams
        .into_iter()
        .enumerate()
        .map(|(i, rx)| {
            let mut sc = SensorConfig::new(i as u32 + 1, addr.clone(), cfg.scene.clone(), pipeline.clone(), cfg.rate);
            sc.drain_timeout = cfg.drain;
            let stop = stop.clone();
            thread::spawn(move || sensor_node_run(&sc, rx, &stop))
        })
        .collect::<Vec<_>>();
    let start = Instant::now();
    let handle = sched.start();

    let mut latencies = Vec::with_capacity(expected as usize);
    let mut last_arrival = start;
    let deadline = start + cfg.duration + cfg.drain;
    while (latencies.len() as u64) < expected && Instant::now() < deadline {
        if let Some(img) = sub.next_image()? {
            let now = now_us();
            latencies.push(now.saturating_sub(img.image.timestamp_us) as f64 / 1e3);
            last_arrival = Instant::now();
        }
    }
    handle.join();
    let mut sensor_drops = 0;
    let mut backpressure = 0;
    for s in sensors {
        let st = s.join().map_err(|_| Error::Protocol("sensor thread panicked".into()))??;
        sensor_drops += st.dropped;
        backpressure += st.blocked;
    }
    let stats = central.shutdown();

    let delivered = latencies.len() as u64;
    latencies.sort_by(f64::total_cmp);
    let elapsed = last_arrival.duration_since(start).as_secs_f64().max(1e-9);
    Ok(SoakReport {
        sensors: cfg.sensors,
        rate: cfg.rate,
        duration_s: cfg.duration.as_secs_f64(),
        workers: cfg.workers,
        expected,
        delivered,
        images_per_s: delivered as f64 / elapsed,
        latency_p50_ms: percentile(&latencies, 50.0),
        latency_p90_ms: percentile(&latencies, 90.0),
        latency_p99_ms: percentile(&latencies, 99.0),
        drops: sensor_drops.max(expected - delivered),
        backpressure,
        failed: stats.failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_statistics() {
        let r = BenchRow::from_samples("x", 9, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.n, 4);
        assert!((r.mean_ms - 2.5).abs() < 1e-12);
        assert!((r.std_ms - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((r.min_ms, r.max_ms), (1.0, 4.0));
        let one = BenchRow::from_samples("x", 9, &[7.0]).unwrap();
        assert_eq!(one.std_ms, 0.0);
        assert!(BenchRow::from_samples("x", 9, &[]).is_err());
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&[3.0], 90.0), 3.0);
        assert_eq!(percentile(&[], 90.0), 0.0);
    }

    #[test]
    fn report_renders_table_and_csv() {
        let report = BenchReport {
            rows: vec![
                BenchRow::from_samples("horizontal90", 90, &[1.0, 1.2]).unwrap(),
                BenchRow::from_samples("box1850", 1850, &[5.0, 5.5]).unwrap(),
            ],
            hardware: "test cpu x1".into(),
            workers: 1,
            timestamp: 0,
        };
        let table = report.to_table();
        assert!(table.contains("horizontal90 (90)"));
        assert!(table.contains("test cpu x1"));
        assert!(table.contains("1.10 ±"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("box1850,1850,2,5.250000,"));
    }
}
