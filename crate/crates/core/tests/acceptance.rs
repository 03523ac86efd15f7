//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realfft::RealFftPlanner;

use sonarnet_core::bench::{bench_scene, run_benchmark, run_soak, BenchReport, SoakConfig};
use sonarnet_core::dsp::{fft_convolve, pdm_demodulate, DemodConfig, SignalMatrix};
use sonarnet_core::geometry::{direction_grid, Direction, GridKind};
use sonarnet_core::nodes::{
    read_manifest, sensor_node_run, AppEvent, AppSubscriber, CentralConfig, CentralNode, SensorConfig, SyncScheduler,
};
use sonarnet_core::pipeline::{AcousticImage, PipelineConfig, Workspace};
use sonarnet_core::synth::{
    sigma_delta_modulate, sigma_delta_modulate_with, synthesize_measurement_with, Reflector, Scene, SigmaDeltaOrder,
};
use sonarnet_core::wire::{encode_packet, Decoder, MsgType, Packet, PacketReader, RawMeasurement};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "{} [{id:>2}] {name}: {detail} ({secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn config(kind: GridKind) -> Arc<PipelineConfig> {
    Arc::new(PipelineConfig::with_grid(kind).unwrap())
}

// 1. FFT convolution against direct convolution

fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &hj) in h.iter().enumerate() {
            y[i + j] += xi * hj;
        }
    }
    y
}

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=1usize << 16);
        let k = rng.random_range(1..=n.min(1023));
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = fft_convolve(&SignalMatrix::from_channels(vec![x.clone()], 1.0).unwrap(), &h, false).unwrap();
        let want = direct_convolve(&x, &h);
        assert_eq!(got.len(), want.len());
        let err: f64 = got.channel(0).iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = want.iter().map(|b| b * b).sum();
        worst = worst.max((err / norm).sqrt());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 30.0,
        format!("200 cases, worst relative RMS {worst:.2e} (limit 1e-9)"),
    )
}

// 2. PDM round trip

/// In-band SNR of `y` against a least-squares fitted sine at `f`: the fit is
/// the signal, the residual's spectrum up to `band` is the noise.
fn in_band_snr(y: &[f64], fs: f64, f: f64, band: f64, skip: usize) -> f64 {
    let y = &y[skip..y.len() - skip];
    let n = y.len();
    let basis = |i: usize| (2.0 * std::f64::consts::PI * f * (i + skip) as f64 / fs).sin_cos();
    let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in y.iter().enumerate() {
        let (s, c) = basis(i);
        ss += s * s;
        sc += s * c;
        cc += c * c;
        ys += v * s;
        yc += v * c;
    }
    let det = ss * cc - sc * sc;
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    let mut resid: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (s, c) = basis(i);
            v - a * s - b * c
        })
        .collect();
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let mut spectrum = fft.make_output_vec();
    fft.process(&mut resid, &mut spectrum).unwrap();
    let kmax = (band / fs * n as f64).floor() as usize;
    let noise: f64 = spectrum[..=kmax]
        .iter()
        .enumerate()
        .map(|(k, c)| if k == 0 { 1.0 } else { 2.0 } * c.norm_sqr())
        .sum::<f64>()
        / (n * n) as f64;
    10.0 * ((a * a + b * b) / 2.0 / noise).log10()
}

fn pdm_round_trip() -> Outcome {
    let (fs, len) = (4.5e6, 90_000);
    let demod = DemodConfig::default();
    let out_rate = fs / demod.decimation as f64;
    let band = 0.4 * out_rate / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tones: Vec<(f64, f64)> = (0..20)
        .map(|_| (rng.random_range(1e3..band), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let rows = tones
        .iter()
        .map(|&(f, ph)| {
            (0..len)
                .map(|i| 0.5 * (std::f64::consts::TAU * f * i as f64 / fs + ph).sin())
                .collect()
        })
        .collect();
    let x = SignalMatrix::from_channels(rows, fs).unwrap();
    let min_snr = |bits| {
        let y = pdm_demodulate(&bits, &demod).unwrap();
        tones
            .iter()
            .enumerate()
            .map(|(c, &(f, _))| in_band_snr(y.channel(c), out_rate, f, band, 500))
            .fold(f64::INFINITY, f64::min)
    };
    let system = min_snr(sigma_delta_modulate_with(&x, SigmaDeltaOrder::default()).bits);
    let first = min_snr(sigma_delta_modulate(&x));
    outcome(
        system >= 40.0,
        format!(
            "20 tones <= {:.0} kHz at 0.5: default second-order modulator min SNR {system:.1} dB (target 40); \
             first-order loop min {first:.1} dB",
            band / 1e3
        ),
    )
}

// 3. Localization

fn localization() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (kind, az_max, el_max) in [(GridKind::Horizontal90, 90.0, 0.0), (GridKind::Box1850, 45.0, 45.0)] {
        let cfg = config(kind);
        let shape = cfg.directions.grid_shape();
        let mut ws = Workspace::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut hits, mut inner_hits, mut inner) = (0, 0, 0);
        for i in 0..50u64 {
            let r = rng.random_range(0.5..4.0);
            let az: f64 = rng.random_range(-az_max..=az_max);
            let el: f64 = if el_max > 0.0 { rng.random_range(-el_max..=el_max) } else { 0.0 };
            let scene = Scene::new(vec![Reflector::from_degrees(r, az, el, 1.0)], 0.01, i);
            let m = synthesize_measurement_with(&cfg, &scene, SigmaDeltaOrder::default(), 1, 0, i).unwrap();
            let (d, k) = ws.process(&m).unwrap().argmax();
            let want = cfg.directions.nearest(&Direction::from_degrees(az, el));
            let dir_ok = match shape {
                Some((_, cols)) => (d % cols).abs_diff(want % cols) <= 1 && (d / cols).abs_diff(want / cols) <= 1,
                None => d.abs_diff(want) <= 1,
            };
            let ok = dir_ok && k.abs_diff(cfg.expected_bin(r)) <= 1;
            hits += ok as usize;
            if az.abs() <= 60.0 {
                inner += 1;
                inner_hits += ok as usize;
            }
        }
        let rate = hits as f64 / 50.0;
        pass &= rate >= 0.96;
        lines.push(format!(
            "{kind} {hits}/50 = {:.0}% (|az| <= 60 deg: {inner_hits}/{inner})",
            rate * 100.0
        ));
    }
    outcome(pass, format!("{} (target >= 96%)", lines.join("; ")))
}

// 4. Two reflectors

fn strong_local_maxima(img: &AcousticImage, frac: f32) -> Vec<(usize, usize)> {
    let (nd, nb) = (img.direction_count(), img.range_bins());
    let floor = frac * img.peak();
    let mut out = Vec::new();
    for d in 0..nd {
        for k in 0..nb {
            let v = img.at(d, k);
            if v < floor {
                continue;
            }
            let is_max = (d.saturating_sub(3)..(d + 4).min(nd))
                .all(|dd| (k.saturating_sub(3)..(k + 4).min(nb)).all(|kk| img.at(dd, kk) <= v));
            if is_max {
                out.push((d, k));
            }
        }
    }
    out
}

fn multi_target() -> Outcome {
    let cfg = config(GridKind::Horizontal90);
    let mut ws = Workspace::new(cfg.clone()).unwrap();
    let targets = [(-30.0, 1.0), (40.0, 2.0)];
    let mut ok = 0;
    for seed in 0..10 {
        let scene = Scene::new(
            vec![
                Reflector::from_degrees(1.0, -30.0, 0.0, 0.1),
                Reflector::from_degrees(2.0, 40.0, 0.0, 0.4),
            ],
            0.01,
            seed,
        );
        let m = synthesize_measurement_with(&cfg, &scene, SigmaDeltaOrder::default(), 1, 0, seed).unwrap();
        let maxima = strong_local_maxima(&ws.process(&m).unwrap(), 0.3);
        let found = targets.iter().all(|&(az, r)| {
            let de = cfg.directions.nearest(&Direction::from_degrees(az, 0.0));
            let ke = cfg.expected_bin(r);
            maxima.iter().any(|&(d, k)| d.abs_diff(de) <= 1 && k.abs_diff(ke) <= 1)
        });
        ok += found as usize;
    }
    outcome(ok == 10, format!("{ok}/10 seeds show both maxima within 1 bin"))
}

// 5. Worker-count transparency

fn measurements(cfg: &PipelineConfig, serials: &[u32], per_sensor: u64) -> Vec<RawMeasurement> {
    let mut out = Vec::new();
    for seq in 0..per_sensor {
        for &serial in serials {
            let scene = Scene::new(
                vec![Reflector::from_degrees(0.8 + 0.1 * seq as f64, -20.0 + serial as f64, 0.0, 0.5)],
                0.01,
                (serial as u64) << 32 | seq,
            );
            out.push(synthesize_measurement_with(cfg, &scene, SigmaDeltaOrder::default(), serial, 1_000 + seq, seq).unwrap());
        }
    }
    out
}

/// Sends `inputs` straight over TCP to a processing central with `workers`
/// workers and writes every delivered image to `dir`.
fn process_via_central(
    cfg: &Arc<PipelineConfig>,
    workers: usize,
    inputs: &[RawMeasurement],
    dir: &std::path::Path,
) -> BTreeMap<String, Vec<u8>> {
    let node = CentralNode::start(CentralConfig::processing("127.0.0.1:0", cfg.clone(), workers)).unwrap();
    let mut sub = AppSubscriber::connect(node.local_addr().to_string(), &[]).unwrap();
    sub.set_read_timeout(Some(Duration::from_secs(60))).unwrap();
    assert!(node.wait_for(Duration::from_secs(5), |s| s.subscribers == 1));
    let mut stream = TcpStream::connect(node.local_addr()).unwrap();
    let acks = PacketReader::new(stream.try_clone().unwrap());
    let drain = thread::spawn(move || {
        let mut acks = acks;
        while let Ok(Some(_)) = acks.next_packet() {}
    });
    for m in inputs {
        stream.write_all(&encode_packet(&Packet::raw(m)).unwrap()).unwrap();
    }
    let mut files = BTreeMap::new();
    while files.len() < inputs.len() {
        let img = sub.next_image().unwrap().expect("image before timeout");
        let name = format!("{:08x}_{:012}.aimg", img.serial(), img.seq);
        let bytes = img.image.encode();
        std::fs::write(dir.join(&name), &bytes).unwrap();
        files.insert(name.clone(), std::fs::read(dir.join(&name)).unwrap());
    }
    drop(stream);
    node.shutdown();
    let _ = drain.join();
    files
}

fn worker_transparency() -> Outcome {
    let cfg = config(GridKind::Horizontal90);
    let inputs = measurements(&cfg, &[3, 5], 12);
    let (d1, d8) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = process_via_central(&cfg, 1, &inputs, d1.path());
    let eight = process_via_central(&cfg, 8, &inputs, d8.path());
    let identical = one == eight && one.len() == inputs.len();
    outcome(
        identical,
        format!("{} images with K=1, {} with K=8, byte-identical: {identical}", one.len(), eight.len()),
    )
}

// 6. Network conservation

fn run_sensors(addr: &str, cfg: &Arc<PipelineConfig>, serials: &[u32], n: u64, rate: f64) -> u64 {
    let mut sched = SyncScheduler::new(rate).unwrap().limit(n);
    let streams: Vec<_> = serials.iter().map(|_| sched.subscribe()).collect();
    let handle = sched.start();
    let threads: Vec<_> = serials
        .iter()
        .zip(streams)
        .map(|(&serial, rx)| {
            let scene = Scene::new(vec![Reflector::from_degrees(1.0 + serial as f64 * 0.3, 10.0, 0.0, 0.5)], 0.0, 0);
            let sc = SensorConfig::new(serial, addr, scene, cfg.clone(), rate);
            thread::spawn(move || sensor_node_run(&sc, rx, &AtomicBool::new(false)).unwrap())
        })
        .collect();
    let dropped = threads.into_iter().map(|t| t.join().unwrap().dropped).sum();
    handle.join();
    dropped
}

fn network_conservation() -> Outcome {
    let cfg = config(GridKind::Horizontal90);
    let serials = [1, 2, 3];

    let node = CentralNode::start(CentralConfig::processing("127.0.0.1:0", cfg.clone(), 4)).unwrap();
    let addr = node.local_addr().to_string();
    let mut sub = AppSubscriber::connect(addr.clone(), &[]).unwrap();
    sub.set_read_timeout(Some(Duration::from_secs(60))).unwrap();
    assert!(node.wait_for(Duration::from_secs(5), |s| s.subscribers == 1));
    let sensors = {
        let (addr, cfg) = (addr.clone(), cfg.clone());
        thread::spawn(move || run_sensors(&addr, &cfg, &serials, 100, 20.0))
    };
    let mut last: BTreeMap<u32, u64> = BTreeMap::new();
    let (mut images, mut gaps, mut out_of_order) = (0, 0, 0);
    while images < 300 {
        match sub.next_event().unwrap() {
            Some(AppEvent::Image(d)) => {
                if last.get(&d.serial()).is_some_and(|&s| d.seq <= s) {
                    out_of_order += 1;
                }
                last.insert(d.serial(), d.seq);
                images += 1;
            }
            Some(AppEvent::Gap { .. }) | Some(AppEvent::Failed { .. }) => gaps += 1,
            Some(AppEvent::Resubscribed) => {}
            None => break,
        }
    }
    let processing_drops = sensors.join().unwrap();
    let extra = {
        sub.set_read_timeout(Some(Duration::from_millis(500))).unwrap();
        sub.next_image().unwrap().is_some()
    };
    node.shutdown();
    let complete = last.len() == 3 && last.values().all(|&s| s == 99);

    let dir = tempfile::tempdir().unwrap();
    let node = CentralNode::start(CentralConfig::storage("127.0.0.1:0", dir.path())).unwrap();
    let storage_drops = run_sensors(&node.local_addr().to_string(), &cfg, &serials, 100, 20.0);
    node.wait_for(Duration::from_secs(10), |s| s.stored == 300);
    node.shutdown();
    let manifest = read_manifest(dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pdm"))
        .count();
    let manifest_ok = manifest.len() == 300
        && manifest.iter().all(|e| {
            std::fs::metadata(dir.path().join(&e.file)).map(|m| m.len() == e.bytes).unwrap_or(false)
        });

    let pass = images == 300
        && !extra
        && complete
        && gaps == 0
        && out_of_order == 0
        && processing_drops == 0
        && storage_drops == 0
        && files == 300
        && manifest_ok;
    outcome(
        pass,
        format!(
            "processing: {images} images, {out_of_order} out of order, {gaps} gaps, {processing_drops} drops; \
             storage: {files} files, {} manifest entries, {storage_drops} drops",
            manifest.len()
        ),
    )
}

// 7. Protocol conformance

fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

fn protocol() -> Outcome {
    let mut golden = Vec::new();
    golden.extend_from_slice(&[0x49, 0x54, 0x52, 0x45]); // magic
    golden.extend_from_slice(&[0x01, 0x00]); // version
    golden.extend_from_slice(&[0x03, 0x00]); // SUBSCRIBE
    golden.extend_from_slice(&[0; 4]); // serial
    golden.extend_from_slice(&[0; 8]); // timestamp
    golden.extend_from_slice(&[0; 8]); // seq
    golden.extend_from_slice(&[0; 8]); // payload length
    let crc = crc32_bitwise(&golden);
    golden.extend_from_slice(&crc.to_le_bytes());
    let frame = encode_packet(&Packet::new(MsgType::Subscribe, 0, 0, 0, Vec::new())).unwrap();
    let golden_ok = frame == golden && golden[golden.len() - 4..] == [0x9C, 0x7E, 0x9E, 0xEC];

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut noise = vec![0u8; 1_000_000];
    rng.fill_bytes(&mut noise);
    let packets: Vec<Packet> = (0..100u64)
        .map(|i| {
            let len = rng.random_range(0..2000);
            let mut payload = vec![0u8; len];
            rng.fill_bytes(&mut payload);
            Packet::new(MsgType::RawMeasurement, rng.random(), rng.random(), i, payload)
        })
        .collect();
    let mut stream = Vec::new();
    for (i, p) in packets.iter().enumerate() {
        stream.extend_from_slice(&noise[i * 10_000..(i + 1) * 10_000]);
        stream.extend_from_slice(&encode_packet(p).unwrap());
    }
    let mut dec = Decoder::new();
    let (mut got, mut errors) = (Vec::new(), 0);
    let mut pos = 0;
    while pos < stream.len() {
        let step = rng.random_range(1..5000).min(stream.len() - pos);
        dec.feed(&stream[pos..pos + step]);
        pos += step;
        while let Some(r) = dec.next_packet() {
            match r {
                Ok(p) => got.push(p),
                Err(_) => errors += 1,
            }
        }
    }
    let recovered = got.iter().filter(|p| packets.get(p.seq as usize) == Some(*p)).count();
    outcome(
        golden_ok && recovered == 100 && got.len() == 100,
        format!(
            "golden SUBSCRIBE ({} bytes) byte-identical: {golden_ok}; fuzz recovered {recovered}/100 frames \
             from 1e6 noise bytes ({errors} errors)",
            golden.len()
        ),
    )
}

// 8 and 9. Benchmark and real-time sufficiency

fn benchmark(report: &mut Option<BenchReport>) -> Outcome {
    let r = run_benchmark(&GridKind::STANDARD, 100, &bench_scene()).unwrap();
    println!("{}", r.to_table());
    let mean = |c: &str| r.row(c).map(|x| x.mean_ms).unwrap_or(f64::NAN);
    let shaped = r.rows.len() == 3 && r.rows.iter().all(|x| x.n == 100 && x.std_ms >= 0.0);
    let ordered = mean("hemisphere3000") > mean("box1850") && mean("box1850") > mean("horizontal90");
    let detail = format!(
        "means {:.2} / {:.2} / {:.2} ms for 90 / 1850 / 3000 directions, n=100 each",
        mean("horizontal90"),
        mean("box1850"),
        mean("hemisphere3000")
    );
    *report = Some(r);
    outcome(shaped && ordered, detail)
}

fn real_time(report: Option<&BenchReport>) -> Outcome {
    let h90 = match report.and_then(|r| r.row("horizontal90")) {
        Some(row) => row.mean_ms,
        None => run_benchmark(&[GridKind::Horizontal90], 100, &bench_scene()).unwrap().rows[0].mean_ms,
    };
    let soak = run_soak(&SoakConfig::new(3, 5.0, Duration::from_secs(30), 4)).unwrap();
    print!("{}", soak.to_table());
    outcome(
        h90 < 50.0 && soak.drops == 0 && soak.delivered == 450,
        format!(
            "horizontal90 mean {h90:.2} ms (limit 50); soak S=3 at 5 Hz for 30 s delivered {}/450, {} drops, \
             p99 latency {:.0} ms",
            soak.delivered, soak.drops, soak.latency_p99_ms
        ),
    )
}

// 10. Grid counts

fn grid_counts() -> Outcome {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
    let eps = 1e-12;
    let h = direction_grid(GridKind::Horizontal90).unwrap();
    let b = direction_grid(GridKind::Box1850).unwrap();
    let s = direction_grid(GridKind::Hemisphere3000).unwrap();
    let h_ok = h.len() == 90
        && h.directions().iter().all(|d| d.elevation == 0.0 && d.azimuth.abs() <= FRAC_PI_2 + eps);
    let b_ok = b.len() == 1850
        && b.directions()
            .iter()
            .all(|d| d.azimuth.abs() <= FRAC_PI_4 + eps && d.elevation.abs() <= FRAC_PI_4 + eps);
    let s_ok = s.len() == 3000 && s.directions().iter().all(|d| d.unit_vector()[0] >= 0.0);
    outcome(
        h_ok && b_ok && s_ok,
        format!(
            "{} / {} / {} directions; elevation 0: {h_ok}; within 45 deg box: {b_ok}; forward hemisphere: {s_ok}",
            h.len(),
            b.len(),
            s.len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut report = None;
    let results = [
        criterion(1, "convolution oracle", conv_oracle),
        criterion(2, "PDM round trip", pdm_round_trip),
        criterion(3, "localization oracle", localization),
        criterion(4, "multi-target", multi_target),
        criterion(5, "worker-count transparency", worker_transparency),
        criterion(6, "network conservation", network_conservation),
        criterion(7, "protocol conformance", protocol),
        criterion(8, "benchmark protocol", || benchmark(&mut report)),
        criterion(9, "real-time sufficiency", || real_time(report.as_ref())),
        criterion(10, "direction-grid counts", grid_counts),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}
