//! Synthetic echoes and sigma-delta modulation: the data source of the
//! sensor emulator and the ground truth for pipeline tests.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::dsp::pack_pdm;
use crate::dsp::{ChirpParams, PdmBitMatrix, SignalMatrix};
use crate::error::{Error, Result};
use crate::geometry::{arrival_offsets, ArrayGeometry, Direction};
use crate::pipeline::PipelineConfig;
use crate::wire::RawMeasurement;

/// Point reflector; angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reflector {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub reflectivity: f64,
}

impl Reflector {
    pub fn new(range: f64, azimuth: f64, elevation: f64, reflectivity: f64) -> Self {
        Self {
            range,
            azimuth,
            elevation,
            reflectivity,
        }
    }

    pub fn from_degrees(range: f64, azimuth_deg: f64, elevation_deg: f64, reflectivity: f64) -> Self {
        Self::new(range, azimuth_deg.to_radians(), elevation_deg.to_radians(), reflectivity)
    }

    pub fn direction(&self) -> Direction {
        Direction::new(self.azimuth, self.elevation)
    }

    /// Echo amplitude at the array.
    pub fn amplitude(&self) -> f64 {
        self.reflectivity / (self.range * self.range)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub reflectors: Vec<Reflector>,
    pub noise_rms: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReflectorFile {
    range_m: f64,
    #[serde(default)]
    azimuth_deg: f64,
    #[serde(default)]
    elevation_deg: f64,
    reflectivity: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default)]
    noise_rms: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    reflectors: Vec<ReflectorFile>,
}

impl Scene {
    pub fn new(reflectors: Vec<Reflector>, noise_rms: f64, seed: u64) -> Self {
        Self {
            reflectors,
            noise_rms,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_rms >= 0.0 && self.noise_rms.is_finite()) {
            return Err(Error::arg("noise_rms must be finite and >= 0"));
        }
        for r in &self.reflectors {
            if !(r.range > 0.0 && r.range.is_finite()) {
                return Err(Error::arg(format!("reflector range {} must be positive", r.range)));
            }
            if !(r.reflectivity >= 0.0 && r.reflectivity.is_finite()) {
                return Err(Error::arg("reflectivity must be finite and >= 0"));
            }
            if !r.azimuth.is_finite() || !r.elevation.is_finite() {
                return Err(Error::arg("reflector angles must be finite"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SceneFile = serde_json::from_str(text)?;
        let scene = Self {
            noise_rms: f.noise_rms,
            seed: f.seed,
            reflectors: f
                .reflectors
                .iter()
                .map(|r| Reflector::from_degrees(r.range_m, r.azimuth_deg, r.elevation_deg, r.reflectivity))
                .collect(),
        };
        scene.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        let f = SceneFile {
            noise_rms: self.noise_rms,
            seed: self.seed,
            reflectors: self
                .reflectors
                .iter()
                .map(|r| ReflectorFile {
                    range_m: r.range,
                    azimuth_deg: r.azimuth.to_degrees(),
                    elevation_deg: r.elevation.to_degrees(),
                    reflectivity: r.reflectivity,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&f).expect("scene serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Sample rate and per-channel length of a synthesized capture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureSpec {
    pub sample_rate: f64,
    pub len: usize,
}

/// Per-reflector echo placement, shared by the matrix and fused paths.
struct EchoPlan {
    chirp: Vec<f64>,
    /// (amplitude, onset per channel) per reflector.
    echoes: Vec<(f64, Vec<usize>)>,
    noise: Option<Normal<f64>>,
}

impl EchoPlan {
    fn new(geometry: &ArrayGeometry, chirp: &ChirpParams, scene: &Scene, capture: CaptureSpec, c: f64) -> Result<Self> {
        scene.validate()?;
        if !(capture.sample_rate > 0.0) || capture.len == 0 || !(c > 0.0) {
            return Err(Error::arg("capture rate, length and speed of sound must be positive"));
        }
        let p = chirp.at_rate(capture.sample_rate);
        p.validate()?;
        let chirp = p.samples();
        let fs = capture.sample_rate;
        let mut echoes = Vec::with_capacity(scene.reflectors.len());
        for r in &scene.reflectors {
            let tau = arrival_offsets(geometry.positions(), &r.direction(), c);
            let mut onsets = Vec::with_capacity(tau.len());
            for t in tau {
                let onset = ((2.0 * r.range / c + t) * fs).round();
                if onset < 0.0 || onset as usize + chirp.len() > capture.len {
                    return Err(Error::arg(format!(
                        "echo from {:.3} m does not fit in a {}-sample capture",
                        r.range, capture.len
                    )));
                }
                onsets.push(onset as usize);
            }
            echoes.push((r.amplitude(), onsets));
        }
        let noise = if scene.noise_rms > 0.0 {
            Some(Normal::new(0.0, scene.noise_rms).map_err(|e| Error::arg(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            chirp,
            echoes,
            noise,
        })
    }

    /// Writes channel `ch`; noise is drawn from `rng` in channel order.
    fn render(&self, ch: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        out.fill(0.0);
        for (amp, onsets) in &self.echoes {
            if *amp == 0.0 {
                continue;
            }
            let dst = &mut out[onsets[ch]..onsets[ch] + self.chirp.len()];
            for (o, s) in dst.iter_mut().zip(&self.chirp) {
                *o += amp * s;
            }
        }
        if let Some(noise) = &self.noise {
            for o in out.iter_mut() {
                *o += noise.sample(rng);
            }
        }
    }
}

/// Echo signals at every microphone: each reflector contributes
/// `reflectivity / range^2` times the chirp, starting at
/// `round((2 range / c + tau_i) fs)`, plus seeded white Gaussian noise.
pub fn synthesize_scene(
    geometry: &ArrayGeometry,
    chirp: &ChirpParams,
    scene: &Scene,
    capture: CaptureSpec,
    speed_of_sound: f64,
) -> Result<SignalMatrix> {
    let plan = EchoPlan::new(geometry, chirp, scene, capture, speed_of_sound)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut out = SignalMatrix::zeros(geometry.len(), capture.len, capture.sample_rate);
    for ch in 0..geometry.len() {
        plan.render(ch, &mut rng, out.channel_mut(ch));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaDeltaOrder {
    First,
    #[default]
    Second,
}

/// Bits plus the number of input samples clipped to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Modulated {
    pub bits: PdmBitMatrix,
    pub clipped: usize,
}

/// One channel's modulator loop state.
#[derive(Debug, Default, Clone, Copy)]
struct Loop {
    i1: f64,
    i2: f64,
    prev: f64,
}

impl Loop {
    #[inline]
    fn step(&mut self, x: f64, order: SigmaDeltaOrder) -> i8 {
        match order {
            SigmaDeltaOrder::First => {
                let b = if self.i1 + x >= 0.0 { 1.0 } else { -1.0 };
                self.i1 += x - b;
                b as i8
            }
            SigmaDeltaOrder::Second => {
                self.i1 += x - self.prev;
                self.i2 += self.i1 - self.prev;
                let b = if self.i2 >= 0.0 { 1.0 } else { -1.0 };
                self.prev = b;
                b as i8
            }
        }
    }
}

fn modulate_channel(x: &[f64], order: SigmaDeltaOrder, out: &mut [i8]) -> usize {
    let mut state = Loop::default();
    let mut clipped = 0;
    for (o, &v) in out.iter_mut().zip(x) {
        let c = v.clamp(-1.0, 1.0);
        clipped += (c != v) as usize;
        *o = state.step(c, order);
    }
    clipped
}

/// First-order loop: `b = +1` if `e + x >= 0` else `-1`, then `e += x - b`.
pub fn sigma_delta_modulate(signal: &SignalMatrix) -> PdmBitMatrix {
    sigma_delta_modulate_with(signal, SigmaDeltaOrder::First).bits
}

pub fn sigma_delta_modulate_with(signal: &SignalMatrix, order: SigmaDeltaOrder) -> Modulated {
    let (channels, frames) = (signal.channels(), signal.len());
    let mut values = vec![0i8; channels * frames];
    let mut clipped = 0;
    for c in 0..channels {
        clipped += modulate_channel(signal.channel(c), order, &mut values[c * frames..(c + 1) * frames]);
    }
    if clipped > 0 {
        log::warn!("sigma-delta input clipped at {clipped} samples");
    }
    Modulated {
        bits: PdmBitMatrix::new(values, channels, frames, signal.sample_rate()).expect("loop emits +-1"),
        clipped,
    }
}

/// A synthesized measurement, packed and wrapped.
///
/// Equivalent to `synthesize_scene` at the PDM rate, then
/// `sigma_delta_modulate_with(.., order)`, then `pack_pdm`, but renders and
/// modulates one channel at a time.
pub fn synthesize_measurement_with(
    cfg: &PipelineConfig,
    scene: &Scene,
    order: SigmaDeltaOrder,
    sensor_serial: u32,
    timestamp_us: u64,
    seq: u64,
) -> Result<RawMeasurement> {
    let channels = cfg.channels();
    if channels > u16::MAX as usize {
        return Err(Error::arg("too many channels for a measurement"));
    }
    let frames = cfg.frames();
    let capture = CaptureSpec {
        sample_rate: cfg.pdm_rate,
        len: frames,
    };
    let plan = EchoPlan::new(&cfg.geometry, &cfg.chirp, scene, capture, cfg.speed_of_sound)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut signal = vec![0.0; frames];
    let mut bits = vec![0i8; frames];
    let mut packed = vec![0u8; channels * frames / 8];
    let mut clipped = 0;
    for ch in 0..channels {
        plan.render(ch, &mut rng, &mut signal);
        clipped += modulate_channel(&signal, order, &mut bits);
        for (f, &b) in bits.iter().enumerate() {
            if b > 0 {
                let bit = f * channels + ch;
                packed[bit / 8] |= 0x80 >> (bit % 8);
            }
        }
    }
    if clipped > 0 {
        log::warn!("sigma-delta input clipped at {clipped} samples");
    }
    Ok(RawMeasurement {
        sensor_serial,
        timestamp_us,
        seq,
        channels: channels as u16,
        frames: frames as u64,
        pdm_rate: cfg.pdm_rate,
        packed,
    })
}

/// [`synthesize_measurement_with`] using the default second-order modulator.
pub fn synthesize_measurement(cfg: &PipelineConfig, scene: &Scene, sensor_serial: u32, timestamp_us: u64) -> Result<RawMeasurement> {
    synthesize_measurement_with(cfg, scene, SigmaDeltaOrder::default(), sensor_serial, timestamp_us, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::unpack_pdm;
    use crate::geometry::{default_array, GridKind};

    fn origin_array() -> ArrayGeometry {
        let mut p = default_array(42).positions().to_vec();
        p[0] = [0.0, 0.0, 0.0];
        ArrayGeometry::new(p).unwrap()
    }

    #[test]
    fn boresight_onset_at_origin_mic() {
        let g = origin_array();
        let scene = Scene::new(vec![Reflector::new(1.0, 0.0, 0.0, 1.0)], 0.0, 0);
        let cap = CaptureSpec {
            sample_rate: 450e3,
            len: 8000,
        };
        let x = synthesize_scene(&g, &ChirpParams::default(), &scene, cap, 343.0).unwrap();
        let onset = (2.0f64 / 343.0 * 450_000.0).round() as usize;
        assert_eq!(onset, 2624);
        let ch0 = x.channel(0);
        assert!(ch0[..onset].iter().all(|&v| v == 0.0));
        // the chirp starts at phase 0, so the first nonzero sample follows the onset
        assert_eq!(ch0[onset], 0.0);
        assert!(ch0[onset + 1] != 0.0);
        let n = ChirpParams::default().len();
        assert!(ch0[onset + n..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn silent_scene_and_overflow() {
        let g = origin_array();
        let cap = CaptureSpec {
            sample_rate: 450e3,
            len: 4000,
        };
        let scene = Scene::new(vec![Reflector::new(1.0, 0.3, 0.0, 0.0)], 0.0, 1);
        let x = synthesize_scene(&g, &ChirpParams::default(), &scene, cap, 343.0).unwrap();
        assert!(x.as_flat().iter().all(|&v| v == 0.0));
        let far = Scene::new(vec![Reflector::new(2.0, 0.0, 0.0, 1.0)], 0.0, 1);
        assert!(matches!(
            synthesize_scene(&g, &ChirpParams::default(), &far, cap, 343.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn seed_changes_only_the_noise() {
        let g = origin_array();
        let cap = CaptureSpec {
            sample_rate: 450e3,
            len: 8000,
        };
        let refl = vec![Reflector::new(1.0, 0.2, -0.1, 0.5)];
        let a = synthesize_scene(&g, &ChirpParams::default(), &Scene::new(refl.clone(), 0.05, 1), cap, 343.0).unwrap();
        let b = synthesize_scene(&g, &ChirpParams::default(), &Scene::new(refl, 0.05, 2), cap, 343.0).unwrap();
        let diff: Vec<f64> = a.as_flat().iter().zip(b.as_flat()).map(|(x, y)| x - y).collect();
        assert!(diff.iter().any(|&d| d != 0.0));
        let n = diff.len() as f64;
        let mean = diff.iter().sum::<f64>() / n;
        let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        // difference of two independent N(0, s^2): sd = s * sqrt(2)
        assert!((sd - 0.05 * 2f64.sqrt()).abs() < 0.002, "sd {sd}");
        assert!(mean.abs() < 4.0 * sd / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn first_order_fixed_points() {
        let ones = SignalMatrix::single(vec![1.0; 64], 4.5e6).unwrap();
        assert!(sigma_delta_modulate(&ones).channel(0).iter().all(|&b| b == 1));
        let zeros = SignalMatrix::single(vec![0.0; 64], 4.5e6).unwrap();
        let bits = sigma_delta_modulate(&zeros);
        for (i, &b) in bits.channel(0).iter().enumerate() {
            assert_eq!(b, if i % 2 == 0 { 1 } else { -1 });
        }
        let twos = SignalMatrix::single(vec![2.0; 8], 4.5e6).unwrap();
        assert_eq!(sigma_delta_modulate_with(&twos, SigmaDeltaOrder::First).clipped, 8);
    }

    fn sliding_mean_error(order: SigmaDeltaOrder) -> f64 {
        let fs = 4.5e6;
        let n = 45_000;
        let x: Vec<f64> = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 10e3 * i as f64 / fs).sin())
            .collect();
        let bits = sigma_delta_modulate_with(&SignalMatrix::single(x.clone(), fs).unwrap(), order).bits;
        let w = 451;
        let b: Vec<f64> = bits.channel(0).iter().map(|&v| v as f64).collect();
        let mut sq = 0.0;
        let mut count = 0;
        for start in 0..n - w {
            let mb: f64 = b[start..start + w].iter().sum::<f64>() / w as f64;
            let mx: f64 = x[start..start + w].iter().sum::<f64>() / w as f64;
            sq += (mb - mx).powi(2);
            count += 1;
        }
        (sq / count as f64).sqrt()
    }

    #[test]
    fn windowed_bit_mean_tracks_sine() {
        // the window mean of the bits is compared with the window mean of the input
        assert!(sliding_mean_error(SigmaDeltaOrder::First) < 0.02);
        assert!(sliding_mean_error(SigmaDeltaOrder::Second) < 0.02);
    }

    #[test]
    fn long_window_mean_matches_signal_mean() {
        let fs = 4.5e6;
        let x: Vec<f64> = (0..100_000)
            .map(|i| 0.3 + 0.4 * (2.0 * std::f64::consts::PI * 3e3 * i as f64 / fs).sin())
            .collect();
        for order in [SigmaDeltaOrder::First, SigmaDeltaOrder::Second] {
            let bits = sigma_delta_modulate_with(&SignalMatrix::single(x.clone(), fs).unwrap(), order).bits;
            for start in (0..90_000).step_by(7_919) {
                let mb = bits.channel(0)[start..start + 10_000].iter().map(|&v| v as f64).sum::<f64>() / 1e4;
                let mx = x[start..start + 10_000].iter().sum::<f64>() / 1e4;
                assert!((mb - mx).abs() < 0.01, "{order:?} at {start}: {mb} vs {mx}");
            }
        }
    }

    #[test]
    fn pack_hand_encoded_byte() {
        let bits = PdmBitMatrix::new(vec![1, -1, 1, 1, -1, -1, -1, -1], 1, 8, 1.0).unwrap();
        assert_eq!(pack_pdm(&bits).unwrap(), vec![0b1011_0000]);
        let ones = PdmBitMatrix::new(vec![1; 32 * 16], 32, 16, 1.0).unwrap();
        assert!(pack_pdm(&ones).unwrap().iter().all(|&b| b == 0xFF));
    }

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::with_grid(GridKind::Horizontal90).unwrap();
        cfg.max_range = 1.5;
        cfg
    }

    #[test]
    fn fused_measurement_equals_composition() {
        let cfg = small_config();
        let scene = Scene::new(
            vec![Reflector::from_degrees(0.8, 20.0, 0.0, 0.1), Reflector::from_degrees(1.2, -10.0, 5.0, 0.2)],
            0.01,
            77,
        );
        let m = synthesize_measurement_with(&cfg, &scene, SigmaDeltaOrder::Second, 5, 99, 3).unwrap();
        let cap = CaptureSpec {
            sample_rate: cfg.pdm_rate,
            len: cfg.frames(),
        };
        let x = synthesize_scene(&cfg.geometry, &cfg.chirp, &scene, cap, cfg.speed_of_sound).unwrap();
        let bits = sigma_delta_modulate_with(&x, SigmaDeltaOrder::Second).bits;
        assert_eq!(m.packed, pack_pdm(&bits).unwrap());
        assert_eq!(m.packed.len(), cfg.channels() * cfg.frames() / 8);
        assert_eq!((m.sensor_serial, m.timestamp_us, m.seq), (5, 99, 3));
        assert_eq!(unpack_pdm(&m.packed, 32, cfg.frames(), cfg.pdm_rate).unwrap(), bits);
        let again = synthesize_measurement_with(&cfg, &scene, SigmaDeltaOrder::Second, 5, 99, 3).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn scene_file_format() {
        let text = r#"{"noise_rms": 0.01, "seed": 3, "reflectors": [
            {"range_m": 1.5, "azimuth_deg": -30, "elevation_deg": 10, "reflectivity": 0.2}]}"#;
        let s = Scene::from_json(text).unwrap();
        assert_eq!(s.seed, 3);
        assert!((s.reflectors[0].azimuth + 30f64.to_radians()).abs() < 1e-15);
        let back = Scene::from_json(&s.to_json()).unwrap();
        assert_eq!(back.reflectors.len(), 1);
        assert!((back.reflectors[0].elevation - s.reflectors[0].elevation).abs() < 1e-15);
        assert!(matches!(Scene::from_json(r#"{"noise_rms": -1}"#), Err(Error::Config(_))));
        assert!(Scene::from_json(r#"{"reflectors": [{"range_m": 1}]}"#).is_err());
    }
}
