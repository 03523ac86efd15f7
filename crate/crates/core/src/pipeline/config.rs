use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dsp::{ChirpParams, DemodConfig, EnvelopeConfig, DECIMATION_TAPS};
use crate::error::{Error, Result};
use crate::geometry::{default_array, direction_grid, ArrayGeometry, DirectionSet, GridKind};

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
/// Extra capture time after the last possible echo ends.
const GUARD_TIME: f64 = 1e-3;

/// Fully resolved processing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub geometry: ArrayGeometry,
    pub directions: Arc<DirectionSet>,
    /// Sweep parameters; `sample_rate` is ignored, each stage resamples.
    pub chirp: ChirpParams,
    pub pdm_rate: f64,
    pub demod: DemodConfig,
    pub pre_mf_decimation: usize,
    pub post_envelope_decimation: usize,
    pub decimation_taps: usize,
    pub envelope: EnvelopeConfig,
    pub speed_of_sound: f64,
    pub max_range: f64,
}

impl PipelineConfig {
    pub fn with_grid(kind: GridKind) -> Result<Self> {
        PipelineSettings {
            grid: kind,
            ..PipelineSettings::default()
        }
        .build()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_range > 0.0) || !(self.speed_of_sound > 0.0) || !(self.pdm_rate > 0.0) {
            return Err(Error::config("max_range, speed_of_sound and pdm_rate must be positive"));
        }
        if self.demod.decimation == 0 || self.pre_mf_decimation == 0 || self.post_envelope_decimation == 0 {
            return Err(Error::config("decimation factors must be >= 1"));
        }
        if self.directions.is_empty() {
            return Err(Error::config("direction set is empty"));
        }
        self.chirp.at_rate(self.matched_filter_rate()).validate()?;
        if self.range_bins() == 0 {
            return Err(Error::config("configuration yields zero range bins"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.geometry.len()
    }

    /// Demodulated (baseband) sample rate.
    pub fn baseband_rate(&self) -> f64 {
        self.pdm_rate / self.demod.decimation as f64
    }

    pub fn matched_filter_rate(&self) -> f64 {
        self.baseband_rate() / self.pre_mf_decimation as f64
    }

    /// Rate of the range axis of the final image.
    pub fn final_rate(&self) -> f64 {
        self.matched_filter_rate() / self.post_envelope_decimation as f64
    }

    fn total_decimation(&self) -> usize {
        self.demod.decimation * self.pre_mf_decimation * self.post_envelope_decimation
    }

    /// PDM frames per capture: the round trip to `max_range`, the sweep
    /// itself and a guard interval, rounded up so every stage divides evenly.
    pub fn frames(&self) -> usize {
        let block = lcm(8, self.total_decimation());
        let duration = 2.0 * self.max_range / self.speed_of_sound + self.chirp.duration + GUARD_TIME;
        let raw = (duration * self.pdm_rate).ceil() as usize;
        raw.div_ceil(block) * block
    }

    pub fn packed_len(&self) -> usize {
        self.channels() * self.frames() / 8
    }

    pub fn range_bins(&self) -> usize {
        (2.0 * self.max_range / self.speed_of_sound * self.final_rate()).floor() as usize
    }

    pub fn range_bin_size(&self) -> f64 {
        self.speed_of_sound / (2.0 * self.final_rate())
    }

    /// Range bin closest to a round trip at `range` meters.
    pub fn expected_bin(&self, range: f64) -> usize {
        (2.0 * range / self.speed_of_sound * self.final_rate()).round() as usize
    }

    pub fn to_settings(&self) -> PipelineSettings {
        PipelineSettings {
            array_seed: None,
            geometry: Some(self.geometry.positions().to_vec()),
            geometry_file: None,
            grid: self.directions.kind(),
            chirp: self.chirp,
            pdm_rate: self.pdm_rate,
            demod: self.demod,
            pre_mf_decimation: self.pre_mf_decimation,
            post_envelope_decimation: self.post_envelope_decimation,
            decimation_taps: self.decimation_taps,
            envelope: self.envelope,
            speed_of_sound: self.speed_of_sound,
            max_range: self.max_range,
        }
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// The on-disk (`pipeline.json`) form of [`PipelineConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Seed for the generated layout; used when no explicit geometry is given.
    pub array_seed: Option<u64>,
    /// Inline microphone positions.
    pub geometry: Option<Vec<[f64; 3]>>,
    /// Plain-text geometry file, relative to the settings file.
    pub geometry_file: Option<PathBuf>,
    pub grid: GridKind,
    pub chirp: ChirpParams,
    pub pdm_rate: f64,
    pub demod: DemodConfig,
    pub pre_mf_decimation: usize,
    pub post_envelope_decimation: usize,
    pub decimation_taps: usize,
    pub envelope: EnvelopeConfig,
    pub speed_of_sound: f64,
    pub max_range: f64,
}

pub const DEFAULT_ARRAY_SEED: u64 = 42;

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            array_seed: Some(DEFAULT_ARRAY_SEED),
            geometry: None,
            geometry_file: None,
            grid: GridKind::Horizontal90,
            chirp: ChirpParams::default(),
            pdm_rate: 4.5e6,
            demod: DemodConfig::default(),
            pre_mf_decimation: 2,
            post_envelope_decimation: 10,
            decimation_taps: DECIMATION_TAPS,
            envelope: EnvelopeConfig::default(),
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            max_range: 5.0,
        }
    }
}

impl PipelineSettings {
    pub fn build(&self) -> Result<PipelineConfig> {
        self.build_relative_to(Path::new("."))
    }

    fn build_relative_to(&self, base: &Path) -> Result<PipelineConfig> {
        let geometry = match (&self.geometry, &self.geometry_file) {
            (Some(p), _) => ArrayGeometry::new(p.clone())?,
            (None, Some(file)) => {
                let path = base.join(file);
                let f = fs::File::open(&path)
                    .map_err(|e| Error::config(format!("geometry file {}: {e}", path.display())))?;
                ArrayGeometry::read_text(BufReader::new(f))?
            }
            (None, None) => default_array(self.array_seed.unwrap_or(DEFAULT_ARRAY_SEED)),
        };
        let cfg = PipelineConfig {
            geometry,
            directions: Arc::new(direction_grid(self.grid)?),
            chirp: self.chirp,
            pdm_rate: self.pdm_rate,
            demod: self.demod,
            pre_mf_decimation: self.pre_mf_decimation,
            post_envelope_decimation: self.post_envelope_decimation,
            decimation_taps: self.decimation_taps,
            envelope: self.envelope,
            speed_of_sound: self.speed_of_sound,
            max_range: self.max_range,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("settings serialize")
    }

    /// Reads and resolves a settings file.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text)?.build_relative_to(base)
    }
}
