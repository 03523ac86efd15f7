//! Python bindings: pipeline configuration, scene synthesis, processing,
//! wire framing and the pipeline benchmark.

use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use sonarnet_core::bench;
use sonarnet_core::geometry::GridKind;
use sonarnet_core::pipeline;
use sonarnet_core::synth::{self, SigmaDeltaOrder};
use sonarnet_core::wire::{self, MsgType};
use sonarnet_core::Error;

create_exception!(sonarnet, SonarnetError, PyException);
create_exception!(sonarnet, ProtocolError, SonarnetError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Argument(_) => PyValueError::new_err(e.to_string()),
        Error::Decode(_) | Error::Encode(_) | Error::Framing(_) | Error::Integrity { .. } | Error::Protocol(_) => {
            ProtocolError::new_err(e.to_string())
        }
    }
}

fn grid_kind(name: &str) -> PyResult<GridKind> {
    GridKind::STANDARD
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown grid {name:?}")))
}

fn order(name: &str) -> PyResult<SigmaDeltaOrder> {
    match name {
        "first" => Ok(SigmaDeltaOrder::First),
        "second" => Ok(SigmaDeltaOrder::Second),
        other => Err(PyValueError::new_err(format!("unknown modulator {other:?}"))),
    }
}

#[pyclass(frozen)]
struct PipelineConfig {
    inner: Arc<pipeline::PipelineConfig>,
}

#[pymethods]
impl PipelineConfig {
    #[new]
    #[pyo3(signature = (grid="horizontal90", max_range=None, speed_of_sound=None, array_seed=None))]
    fn new(grid: &str, max_range: Option<f64>, speed_of_sound: Option<f64>, array_seed: Option<u64>) -> PyResult<Self> {
        let mut s = pipeline::PipelineSettings {
            grid: grid_kind(grid)?,
            ..Default::default()
        };
        if let Some(r) = max_range {
            s.max_range = r;
        }
        if let Some(c) = speed_of_sound {
            s.speed_of_sound = c;
        }
        if array_seed.is_some() {
            s.array_seed = array_seed;
        }
        Ok(Self {
            inner: Arc::new(s.build().map_err(to_py)?),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let s = pipeline::PipelineSettings::from_json(text).map_err(to_py)?;
        Ok(Self {
            inner: Arc::new(s.build().map_err(to_py)?),
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_settings().to_json()
    }

    #[getter]
    fn grid(&self) -> &'static str {
        self.inner.directions.kind().name()
    }

    #[getter]
    fn direction_count(&self) -> usize {
        self.inner.directions.len()
    }

    /// `(azimuth_rad, elevation_rad)` per direction.
    fn directions(&self) -> Vec<(f64, f64)> {
        self.inner.directions.directions().iter().map(|d| (d.azimuth, d.elevation)).collect()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn range_bins(&self) -> usize {
        self.inner.range_bins()
    }

    #[getter]
    fn range_bin_size(&self) -> f64 {
        self.inner.range_bin_size()
    }

    fn expected_bin(&self, range: f64) -> usize {
        self.inner.expected_bin(range)
    }

    fn __repr__(&self) -> String {
        format!(
            "PipelineConfig(grid={:?}, directions={}, range_bins={})",
            self.grid(),
            self.direction_count(),
            self.range_bins()
        )
    }
}

#[pyclass(frozen, get_all, from_py_object)]
#[derive(Clone)]
struct Reflector {
    range_m: f64,
    azimuth_deg: f64,
    elevation_deg: f64,
    reflectivity: f64,
}

#[pymethods]
impl Reflector {
    #[new]
    #[pyo3(signature = (range_m, azimuth_deg=0.0, elevation_deg=0.0, reflectivity=1.0))]
    fn new(range_m: f64, azimuth_deg: f64, elevation_deg: f64, reflectivity: f64) -> Self {
        Self {
            range_m,
            azimuth_deg,
            elevation_deg,
            reflectivity,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Reflector(range_m={}, azimuth_deg={}, elevation_deg={}, reflectivity={})",
            self.range_m, self.azimuth_deg, self.elevation_deg, self.reflectivity
        )
    }
}

#[pyclass(frozen)]
struct Scene {
    inner: synth::Scene,
}

#[pymethods]
impl Scene {
    #[new]
    #[pyo3(signature = (reflectors, noise_rms=0.0, seed=0))]
    fn new(reflectors: Vec<Reflector>, noise_rms: f64, seed: u64) -> PyResult<Self> {
        let inner = synth::Scene::new(
            reflectors
                .iter()
                .map(|r| synth::Reflector::from_degrees(r.range_m, r.azimuth_deg, r.elevation_deg, r.reflectivity))
                .collect(),
            noise_rms,
            seed,
        );
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: synth::Scene::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn noise_rms(&self) -> f64 {
        self.inner.noise_rms
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn reflectors(&self) -> Vec<Reflector> {
        self.inner
            .reflectors
            .iter()
            .map(|r| Reflector {
                range_m: r.range,
                azimuth_deg: r.azimuth.to_degrees(),
                elevation_deg: r.elevation.to_degrees(),
                reflectivity: r.reflectivity,
            })
            .collect()
    }
}

#[pyclass(frozen)]
struct RawMeasurement {
    inner: wire::RawMeasurement,
}

#[pymethods]
impl RawMeasurement {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: wire::decode_raw_measurement(data).map_err(to_py)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &wire::encode_raw_measurement(&self.inner))
    }

    #[getter]
    fn sensor_serial(&self) -> u32 {
        self.inner.sensor_serial
    }

    #[getter]
    fn timestamp_us(&self) -> u64 {
        self.inner.timestamp_us
    }

    #[getter]
    fn seq(&self) -> u64 {
        self.inner.seq
    }

    #[getter]
    fn channels(&self) -> u16 {
        self.inner.channels
    }

    #[getter]
    fn frames(&self) -> u64 {
        self.inner.frames
    }

    #[getter]
    fn pdm_rate(&self) -> f64 {
        self.inner.pdm_rate
    }

    #[getter]
    fn packed<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.packed)
    }
}

#[pyfunction]
#[pyo3(signature = (config, scene, serial=1, timestamp_us=0, seq=0, modulator="second"))]
fn synthesize_measurement(
    py: Python<'_>,
    config: &PipelineConfig,
    scene: &Scene,
    serial: u32,
    timestamp_us: u64,
    seq: u64,
    modulator: &str,
) -> PyResult<RawMeasurement> {
    let order = order(modulator)?;
    let (cfg, scene) = (config.inner.clone(), scene.inner.clone());
    let inner = py
        .detach(|| synth::synthesize_measurement_with(&cfg, &scene, order, serial, timestamp_us, seq))
        .map_err(to_py)?;
    Ok(RawMeasurement { inner })
}

#[pyclass(frozen)]
struct AcousticImage {
    inner: pipeline::AcousticImage,
}

#[pymethods]
impl AcousticImage {
    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::AcousticImage::decode(data).map_err(to_py)?,
        })
    }

    fn encode<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.encode())
    }

    #[getter]
    fn sensor_serial(&self) -> u32 {
        self.inner.sensor_serial
    }

    #[getter]
    fn timestamp_us(&self) -> u64 {
        self.inner.timestamp_us
    }

    #[getter]
    fn direction_count(&self) -> usize {
        self.inner.direction_count()
    }

    #[getter]
    fn range_bins(&self) -> usize {
        self.inner.range_bins()
    }

    #[getter]
    fn range_bin_size(&self) -> f64 {
        self.inner.range_bin_size
    }

    /// Row-major energies, `direction_count * range_bins` values.
    fn energies(&self) -> Vec<f32> {
        self.inner.energies().to_vec()
    }

    fn row(&self, direction: usize) -> PyResult<Vec<f32>> {
        if direction >= self.inner.direction_count() {
            return Err(PyValueError::new_err("direction out of range"));
        }
        Ok(self.inner.row(direction).to_vec())
    }

    /// `(direction, range_bin)` of the strongest cell.
    fn argmax(&self) -> (usize, usize) {
        self.inner.argmax()
    }

    fn peak(&self) -> f32 {
        self.inner.peak()
    }

    fn range_for_bin(&self, bin: usize) -> f64 {
        self.inner.range_for_bin(bin)
    }

    fn directions(&self) -> Vec<(f64, f64)> {
        self.inner.directions.directions().iter().map(|d| (d.azimuth, d.elevation)).collect()
    }
}

/// Preallocated processing state for one configuration.
#[pyclass]
struct Workspace {
    inner: pipeline::Workspace,
}

#[pymethods]
impl Workspace {
    #[new]
    fn new(config: &PipelineConfig) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::new_workspace(config.inner.clone()).map_err(to_py)?,
        })
    }

    fn process(&mut self, py: Python<'_>, measurement: &RawMeasurement) -> PyResult<AcousticImage> {
        let ws = &mut self.inner;
        let m = &measurement.inner;
        let inner = py.detach(|| ws.process(m)).map_err(to_py)?;
        Ok(AcousticImage { inner })
    }

    #[getter]
    fn reallocations(&self) -> usize {
        self.inner.reallocations()
    }
}

fn msg_type(name: &str) -> PyResult<MsgType> {
    Ok(match name {
        "raw_measurement" => MsgType::RawMeasurement,
        "processed_image" => MsgType::ProcessedImage,
        "subscribe" => MsgType::Subscribe,
        "ack" => MsgType::Ack,
        "error" => MsgType::Error,
        other => return Err(PyValueError::new_err(format!("unknown message type {other:?}"))),
    })
}

fn msg_name(t: MsgType) -> &'static str {
    match t {
        MsgType::RawMeasurement => "raw_measurement",
        MsgType::ProcessedImage => "processed_image",
        MsgType::Subscribe => "subscribe",
        MsgType::Ack => "ack",
        MsgType::Error => "error",
    }
}

#[pyclass(frozen)]
struct Packet {
    inner: wire::Packet,
}

#[pymethods]
impl Packet {
    #[new]
    #[pyo3(signature = (msg_type, sensor_serial=0, timestamp_us=0, seq=0, payload=b"".to_vec()))]
    fn new(msg_type: &str, sensor_serial: u32, timestamp_us: u64, seq: u64, payload: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: wire::Packet::new(self::msg_type(msg_type)?, sensor_serial, timestamp_us, seq, payload),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (serials=Vec::new()))]
    fn subscribe(serials: Vec<u32>) -> Self {
        Self {
            inner: wire::Packet::subscribe(&serials),
        }
    }

    #[staticmethod]
    fn raw(measurement: &RawMeasurement) -> Self {
        Self {
            inner: wire::Packet::raw(&measurement.inner),
        }
    }

    #[staticmethod]
    fn decode(frame: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: wire::decode_packet(frame).map_err(to_py)?,
        })
    }

    fn encode<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &wire::encode_packet(&self.inner).map_err(to_py)?))
    }

    #[getter]
    fn msg_type(&self) -> &'static str {
        msg_name(self.inner.msg_type)
    }

    #[getter]
    fn sensor_serial(&self) -> u32 {
        self.inner.sensor_serial
    }

    #[getter]
    fn timestamp_us(&self) -> u64 {
        self.inner.timestamp_us
    }

    #[getter]
    fn seq(&self) -> u64 {
        self.inner.seq
    }

    #[getter]
    fn payload<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.payload)
    }

    fn __repr__(&self) -> String {
        format!(
            "Packet({}, serial={}, seq={}, payload={} bytes)",
            self.msg_type(),
            self.inner.sensor_serial,
            self.inner.seq,
            self.inner.payload.len()
        )
    }
}

/// Streaming frame decoder; resynchronizes on corrupt input.
#[pyclass]
struct Decoder {
    inner: wire::Decoder,
    errors: usize,
}

#[pymethods]
impl Decoder {
    #[new]
    fn new() -> Self {
        Self {
            inner: wire::Decoder::new(),
            errors: 0,
        }
    }

    /// Appends bytes and returns every complete packet; bad frames are
    /// skipped and counted in `errors`.
    fn feed(&mut self, data: &[u8]) -> Vec<Packet> {
        self.inner.feed(data);
        let mut out = Vec::new();
        while let Some(r) = self.inner.next_packet() {
            match r {
                Ok(p) => out.push(Packet { inner: p }),
                Err(_) => self.errors += 1,
            }
        }
        out
    }

    #[getter]
    fn errors(&self) -> usize {
        self.errors
    }

    #[getter]
    fn buffered(&self) -> usize {
        self.inner.buffered()
    }
}

#[pyfunction]
fn direction_count(grid: &str) -> PyResult<usize> {
    Ok(sonarnet_core::geometry::direction_grid(grid_kind(grid)?).map_err(to_py)?.len())
}

/// Times `process()` per grid; returns `(table, csv)`.
#[pyfunction]
#[pyo3(signature = (grids=vec!["horizontal90".to_string(), "box1850".to_string(), "hemisphere3000".to_string()], n=100))]
fn run_benchmark(py: Python<'_>, grids: Vec<String>, n: usize) -> PyResult<(String, String)> {
    let kinds = grids.iter().map(|g| grid_kind(g)).collect::<PyResult<Vec<_>>>()?;
    let report = py
        .detach(|| bench::run_benchmark(&kinds, n, &bench::bench_scene()))
        .map_err(to_py)?;
    Ok((report.to_table(), report.to_csv()))
}

#[pymodule]
fn sonarnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SonarnetError", m.py().get_type::<SonarnetError>())?;
    m.add("ProtocolError", m.py().get_type::<ProtocolError>())?;
    m.add_class::<PipelineConfig>()?;
    m.add_class::<Reflector>()?;
    m.add_class::<Scene>()?;
    m.add_class::<RawMeasurement>()?;
    m.add_class::<AcousticImage>()?;
    m.add_class::<Workspace>()?;
    m.add_class::<Packet>()?;
    m.add_class::<Decoder>()?;
    m.add_function(wrap_pyfunction!(synthesize_measurement, m)?)?;
    m.add_function(wrap_pyfunction!(direction_count, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
