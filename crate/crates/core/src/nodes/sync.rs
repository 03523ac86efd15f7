use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::now_us;
use crate::error::{Error, Result};

/// One shared emission event. Every sensor on a scheduler sees the same pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trigger {
    pub timestamp_us: u64,
    pub seq: u64,
}

/// How late the scheduler thread woke relative to the nominal trigger times.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JitterStats {
    pub triggers: u64,
    pub mean_us: f64,
    pub max_us: f64,
}

/// Software stand-in for the hardware SYNC chain: a fixed-period clock
/// whose triggers carry nominal timestamps `t0 + k * period` and seq `k`.
#[derive(Debug)]
pub struct SyncScheduler {
    period: Duration,
    limit: Option<u64>,
    subscribers: Vec<Sender<Trigger>>,
}

impl SyncScheduler {
    pub fn new(rate_hz: f64) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::config(format!("trigger rate must be positive, got {rate_hz}")));
        }
        Ok(Self {
            period: Duration::from_secs_f64(1.0 / rate_hz),
            limit: None,
            subscribers: Vec::new(),
        })
    }

    /// Stop after `n` triggers.
    pub fn limit(mut self, n: u64) -> Self {
        self.limit = Some(n);
        self
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn subscribe(&mut self) -> Receiver<Trigger> {
        let (tx, rx) = unbounded();
        self.subscribers.push(tx);
        rx
    }

    pub fn start(self) -> SchedulerHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new()
            .name("sync-scheduler".into())
            .spawn(move || self.run(&flag))
            .expect("spawn scheduler thread");
        SchedulerHandle {
            stop,
            thread: Some(thread),
        }
    }

    fn run(self, stop: &AtomicBool) -> JitterStats {
        let t0 = now_us();
        let base = Instant::now();
        let period_us = self.period.as_secs_f64() * 1e6;
        let mut stats = JitterStats::default();
        let mut late_sum = 0.0;
        for k in 0.. {
            if self.limit.is_some_and(|n| k >= n) {
                break;
            }
            let target = base + self.period.mul_f64(k as f64);
            loop {
                if stop.load(Ordering::Relaxed) {
                    return finish(stats, late_sum);
                }
                let now = Instant::now();
                if now >= target {
                    break;
                }
                thread::sleep((target - now).min(Duration::from_millis(20)));
            }
            let late = Instant::now().saturating_duration_since(target).as_secs_f64() * 1e6;
            late_sum += late;
            stats.max_us = stats.max_us.max(late);
            stats.triggers += 1;
            let trig = Trigger {
                timestamp_us: t0 + (k as f64 * period_us).round() as u64,
                seq: k,
            };
            let delivered = self.subscribers.iter().filter(|s| s.send(trig).is_ok()).count();
            if delivered == 0 && !self.subscribers.is_empty() {
                break;
            }
        }
        finish(stats, late_sum)
    }
}

fn finish(mut stats: JitterStats, late_sum: f64) -> JitterStats {
    if stats.triggers > 0 {
        stats.mean_us = late_sum / stats.triggers as f64;
    }
    stats
}

pub struct SchedulerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<JitterStats>>,
}

impl SchedulerHandle {
    /// Stops emitting and returns the measured wake-up lateness.
    pub fn stop(mut self) -> JitterStats {
        self.stop.store(true, Ordering::Relaxed);
        self.join_inner()
    }

    /// Waits for a limited scheduler to emit all of its triggers.
    pub fn join(mut self) -> JitterStats {
        self.join_inner()
    }

    fn join_inner(&mut self) -> JitterStats {
        self.thread
            .take()
            .map(|t| t.join().unwrap_or_default())
            .unwrap_or_default()
    }
}

impl Drop for SchedulerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.join_inner();
    }
}

/// A started scheduler with one trigger stream per sensor.
pub fn sync_scheduler(rate_hz: f64, sensors: usize) -> Result<(SchedulerHandle, Vec<Receiver<Trigger>>)> {
    let mut s = SyncScheduler::new(rate_hz)?;
    let rx = (0..sensors).map(|_| s.subscribe()).collect();
    Ok((s.start(), rx))
}
