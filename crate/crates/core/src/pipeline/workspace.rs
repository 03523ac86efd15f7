use std::sync::Arc;

use super::{AcousticImage, PipelineConfig};
use crate::dsp::{
    design_lowpass, design_smoothing, generate_chirp, EnvelopeDetector, FftConvolver, MatchedFilter,
    PdmDecimator, SignalMatrix,
};
use crate::error::{Error, Result};
use crate::geometry::arrival_offsets;
use crate::wire::RawMeasurement;

/// Integer-delay steering table for every (direction, channel) pair.
///
/// `delays` are the non-negative steering delays (minimum 0 per direction);
/// `base` is the rounded smallest arrival offset of each direction, so that
/// `delay + base` approximates each channel's arrival offset relative to the
/// array origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    channels: usize,
    delays: Vec<usize>,
    base: Vec<isize>,
}

impl Beamformer {
    pub fn new(cfg: &PipelineConfig, sample_rate: f64) -> Self {
        let positions = cfg.geometry.positions();
        let channels = positions.len();
        let mut delays = Vec::with_capacity(cfg.directions.len() * channels);
        let mut base = Vec::with_capacity(cfg.directions.len());
        for dir in cfg.directions.directions() {
            let raw = arrival_offsets(positions, dir, cfg.speed_of_sound);
            let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
            delays.extend(raw.iter().map(|t| ((t - min) * sample_rate).round() as usize));
            base.push((min * sample_rate).round() as isize);
        }
        Self { channels, delays, base }
    }

    pub fn directions(&self) -> usize {
        self.base.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Steering delays of direction `d`, one per channel.
    pub fn delays(&self, d: usize) -> &[usize] {
        &self.delays[d * self.channels..(d + 1) * self.channels]
    }

    pub fn base(&self, d: usize) -> isize {
        self.base[d]
    }

    /// Smallest and largest read offset `delay + base` over the table.
    pub fn shift_range(&self) -> (isize, isize) {
        let mut lo = 0isize;
        let mut hi = 0isize;
        for (d, &b) in self.base.iter().enumerate() {
            for &delay in self.delays(d) {
                lo = lo.min(delay as isize + b);
                hi = hi.max(delay as isize + b);
            }
        }
        (lo, hi)
    }

    /// [`steer`](Self::steer) over rows of length `stride` that hold the
    /// signal at `pad` with zeros around it, wide enough for every shift.
    /// Sums eight channels per pass over `out`.
    fn steer_padded(&self, d: usize, x: &[f64], stride: usize, pad: usize, len: usize, out: &mut [f64]) {
        let out = &mut out[..len];
        let start = |c: usize, delay: usize| (c * stride + pad) as isize + delay as isize + self.base[d];
        let delays = self.delays(d);
        let mut first = true;
        let mut c = 0;
        while c < self.channels {
            let block = (self.channels - c).min(8);
            let r: [&[f64]; 8] = std::array::from_fn(|k| {
                let k = if k < block { c + k } else { c };
                let s = start(k, delays[k]) as usize;
                &x[s..s + len]
            });
            if block == 8 {
                for (i, o) in out.iter_mut().enumerate() {
                    let v = ((r[0][i] + r[1][i]) + (r[2][i] + r[3][i])) + ((r[4][i] + r[5][i]) + (r[6][i] + r[7][i]));
                    *o = if first { v } else { *o + v };
                }
            } else {
                for row in &r[..block] {
                    for (o, v) in out.iter_mut().zip(*row) {
                        *o = if first { *v } else { *o + v };
                    }
                    first = false;
                }
            }
            first = false;
            c += block;
        }
        let scale = 1.0 / self.channels as f64;
        out.iter_mut().for_each(|v| *v *= scale);
    }

    /// Delay-and-sum towards direction `d`: each channel is read at its
    /// arrival offset, samples outside the record count as zero, and the sum
    /// is divided by the channel count.
    pub fn steer(&self, d: usize, x: &[f64], len: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.channels * len);
        out[..len].fill(0.0);
        for (c, &delay) in self.delays(d).iter().enumerate() {
            let shift = delay as isize + self.base[d];
            let row = &x[c * len..(c + 1) * len];
            let lo = (-shift).max(0) as usize;
            let hi = (len as isize - shift).clamp(0, len as isize) as usize;
            if lo >= hi {
                continue;
            }
            let src = &row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
            for (o, s) in out[lo..hi].iter_mut().zip(src) {
                *o += s;
            }
        }
        let scale = 1.0 / self.channels as f64;
        out[..len].iter_mut().for_each(|v| *v *= scale);
    }
}

/// Preallocated per-worker processing state: every buffer, FFT plan, the
/// chirp reference and the steering table are built once from a config and
/// reused for each measurement.
#[derive(Debug)]
pub struct Workspace {
    cfg: Arc<PipelineConfig>,
    channels: usize,
    frames: usize,
    baseband_len: usize,
    mf_len: usize,
    bins: usize,
    demod: PdmDecimator,
    baseband: Vec<f64>,
    pre_filter: Option<(FftConvolver, usize)>,
    decimated: Vec<f64>,
    matched: MatchedFilter,
    /// Matched-filter rows of `stride` samples, signal at `pad`, zeros around.
    filtered: Vec<f64>,
    stride: usize,
    pad: usize,
    beamformer: Beamformer,
    beam: Vec<f64>,
    envelope: EnvelopeDetector,
    smoothed: Vec<f64>,
    post_reversed: Vec<f64>,
    buffer_marks: Vec<(usize, usize)>,
    reallocations: usize,
}

impl Workspace {
    pub fn new(cfg: Arc<PipelineConfig>) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.channels();
        let frames = cfg.frames();
        let baseband_len = frames / cfg.demod.decimation;
        let mf_len = baseband_len / cfg.pre_mf_decimation;
        let bins = cfg.range_bins();
        if mf_len == 0 || bins == 0 {
            return Err(Error::config("derived buffer sizes are zero"));
        }
        let demod = PdmDecimator::new(channels, frames, cfg.pdm_rate, &cfg.demod)?;
        let bb_rate = cfg.baseband_rate();
        let pre_filter = if cfg.pre_mf_decimation > 1 {
            let d = cfg.pre_mf_decimation;
            let k = design_lowpass(0.45 * bb_rate / d as f64, bb_rate, cfg.decimation_taps)?;
            Some((FftConvolver::new(&k, baseband_len)?, k.delay()))
        } else {
            None
        };
        let mf_rate = cfg.matched_filter_rate();
        let reference = generate_chirp(&cfg.chirp.at_rate(mf_rate))?;
        let matched = MatchedFilter::new(reference.channel(0), mf_len)?;
        let smoothing = design_smoothing(cfg.envelope.smoothing_taps, mf_rate)?;
        let envelope = EnvelopeDetector::new(mf_len, smoothing)?;
        let post = cfg.post_envelope_decimation;
        let post_kernel = if post > 1 {
            design_lowpass(0.45 * mf_rate / post as f64, mf_rate, cfg.decimation_taps)?
        } else {
            design_lowpass(0.25 * mf_rate, mf_rate, 1)?
        };
        if post_kernel.len() > mf_len {
            return Err(Error::config("post-envelope filter longer than the record"));
        }
        let beamformer = Beamformer::new(&cfg, mf_rate);
        let (lo, hi) = beamformer.shift_range();
        let pad = (-lo).max(0) as usize;
        let stride = pad + mf_len + hi.max(0) as usize;
        let mut ws = Self {
            channels,
            frames,
            baseband_len,
            mf_len,
            bins,
            demod,
            baseband: vec![0.0; channels * baseband_len],
            pre_filter,
            decimated: vec![0.0; channels * mf_len],
            matched,
            filtered: vec![0.0; channels * stride],
            stride,
            pad,
            beamformer,
            beam: vec![0.0; mf_len],
            envelope,
            smoothed: vec![0.0; mf_len],
            post_reversed: post_kernel.iter().rev().copied().collect(),
            buffer_marks: Vec::new(),
            reallocations: 0,
            cfg,
        };
        ws.buffer_marks = ws.marks();
        Ok(ws)
    }

    pub fn config(&self) -> &Arc<PipelineConfig> {
        &self.cfg
    }

    pub fn beamformer(&self) -> &Beamformer {
        &self.beamformer
    }

    /// Samples per channel entering the matched filter.
    pub fn matched_filter_len(&self) -> usize {
        self.mf_len
    }

    pub fn baseband_len(&self) -> usize {
        self.baseband_len
    }

    /// Times a hot buffer moved or changed capacity since construction.
    pub fn reallocations(&self) -> usize {
        self.reallocations
    }

    fn marks(&self) -> Vec<(usize, usize)> {
        [
            &self.baseband,
            &self.decimated,
            &self.filtered,
            &self.beam,
            &self.smoothed,
        ]
        .iter()
        .map(|b| (b.as_ptr() as usize, b.capacity()))
        .collect()
    }

    fn check_marks(&mut self) {
        let now = self.marks();
        if now != self.buffer_marks {
            self.reallocations += 1;
            self.buffer_marks = now;
        }
    }

    /// Full measurement: unpack and demodulate, decimate, matched filter,
    /// beamform, envelope per direction, decimate to range bins.
    pub fn process(&mut self, m: &RawMeasurement) -> Result<AcousticImage> {
        if m.channels as usize != self.channels || m.frames as usize != self.frames {
            return Err(Error::arg(format!(
                "measurement shape {}x{} does not match the pipeline's {}x{}",
                m.channels, m.frames, self.channels, self.frames
            )));
        }
        if (m.pdm_rate - self.cfg.pdm_rate).abs() > 1e-6 * self.cfg.pdm_rate {
            return Err(Error::arg(format!(
                "measurement PDM rate {} Hz, pipeline expects {} Hz",
                m.pdm_rate, self.cfg.pdm_rate
            )));
        }
        self.demod.process(&m.packed, &mut self.baseband)?;
        self.finish(m.sensor_serial, m.timestamp_us)
    }

    /// Same as [`process`](Self::process) but starting from demodulated
    /// baseband signals.
    pub fn process_baseband(&mut self, baseband: &SignalMatrix, serial: u32, timestamp_us: u64) -> Result<AcousticImage> {
        if baseband.channels() != self.channels || baseband.len() != self.baseband_len {
            return Err(Error::arg(format!(
                "baseband shape {}x{} does not match {}x{}",
                baseband.channels(),
                baseband.len(),
                self.channels,
                self.baseband_len
            )));
        }
        self.baseband.copy_from_slice(baseband.as_flat());
        self.finish(serial, timestamp_us)
    }

    /// Pre-decimation and matched filter on the baseband buffer.
    fn filter_channels(&mut self) {
        let (bl, ml, st, pad) = (self.baseband_len, self.mf_len, self.stride, self.pad);
        for c in 0..self.channels {
            let src = &self.baseband[c * bl..(c + 1) * bl];
            let dec = &mut self.decimated[c * ml..(c + 1) * ml];
            match &mut self.pre_filter {
                Some((conv, delay)) => conv.apply(src, *delay, self.cfg.pre_mf_decimation, dec),
                None => dec.copy_from_slice(src),
            }
            self.matched.apply(dec, &mut self.filtered[c * st + pad..c * st + pad + ml]);
        }
    }

    fn finish(&mut self, serial: u32, timestamp_us: u64) -> Result<AcousticImage> {
        self.filter_channels();
        let n_dirs = self.beamformer.directions();
        let mut energies = vec![0f32; n_dirs * self.bins];
        for d in 0..n_dirs {
            self.beamformer
                .steer_padded(d, &self.filtered, self.stride, self.pad, self.mf_len, &mut self.beam);
            self.envelope.process(&self.beam, &mut self.smoothed);
            decimate_at(
                &self.smoothed,
                &self.post_reversed,
                self.cfg.post_envelope_decimation,
                &mut energies[d * self.bins..(d + 1) * self.bins],
            );
        }
        self.check_marks();
        AcousticImage::new(
            serial,
            timestamp_us,
            self.cfg.directions.clone(),
            self.cfg.range_bin_size(),
            self.bins,
            energies,
        )
    }

    /// Matched-filter output of the last processed measurement (channels x len).
    pub fn filtered(&self) -> SignalMatrix {
        let rows = self
            .filtered
            .chunks_exact(self.stride)
            .flat_map(|r| &r[self.pad..self.pad + self.mf_len])
            .copied()
            .collect();
        SignalMatrix::from_flat(rows, self.channels, self.mf_len, self.cfg.matched_filter_rate())
            .expect("workspace buffers are consistent")
    }

    /// Delay-and-sum of an externally supplied matched-filter output, one
    /// row per direction.
    pub fn beamform(&self, filtered: &SignalMatrix) -> Result<SignalMatrix> {
        if filtered.channels() != self.channels || filtered.len() != self.mf_len {
            return Err(Error::arg(format!(
                "beamformer expects {}x{}, got {}x{}",
                self.channels,
                self.mf_len,
                filtered.channels(),
                filtered.len()
            )));
        }
        let n = self.beamformer.directions();
        let mut out = vec![0.0; n * self.mf_len];
        for d in 0..n {
            self.beamformer
                .steer(d, filtered.as_flat(), self.mf_len, &mut out[d * self.mf_len..(d + 1) * self.mf_len]);
        }
        SignalMatrix::from_flat(out, n, self.mf_len, filtered.sample_rate())
    }
}

/// Delay-compensated FIR evaluated at every `step`-th sample, clamped at 0.
/// `reversed` holds the taps in reverse order.
fn decimate_at(x: &[f64], reversed: &[f64], step: usize, out: &mut [f32]) {
    let k = reversed.len();
    let a = (k - 1) / 2;
    let n = x.len();
    for (m, o) in out.iter_mut().enumerate() {
        let center = m * step;
        // y = sum_j h[j] x[center + a - j] over in-range samples
        let end = (center + a + 1).min(n);
        let begin = (center + a + 1).saturating_sub(k);
        let skip = begin + k - (center + a + 1);
        let acc = dot(&reversed[skip..skip + (end - begin)], &x[begin..end]);
        *o = acc.max(0.0) as f32;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (p, q) in (&mut ca).zip(&mut cb) {
        acc[0] += p[0] * q[0];
        acc[1] += p[1] * q[1];
        acc[2] += p[2] * q[2];
        acc[3] += p[3] * q[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(p, q)| p * q).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Builds a workspace; see [`Workspace::new`].
pub fn new_workspace(cfg: Arc<PipelineConfig>) -> Result<Workspace> {
    Workspace::new(cfg)
}
