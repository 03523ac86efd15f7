//! Linear-phase FIR design and FFT-domain convolution.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::SignalMatrix;
use crate::error::{Error, Result};

/// Taps used by [`decimate`]'s anti-alias filter.
pub const DECIMATION_TAPS: usize = 127;

/// Symmetric (linear-phase) FIR with unit DC gain.
#[derive(Debug, Clone, PartialEq)]
pub struct FirKernel {
    taps: Vec<f64>,
    cutoff: f64,
}

impl FirKernel {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Design cutoff in Hz; for window kernels, the -6 dB point estimate.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Group delay in samples.
    pub fn delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Magnitude of the frequency response at `freq` (Hz).
    pub fn response(&self, freq: f64, sample_rate: f64) -> f64 {
        let w = 2.0 * PI * freq / sample_rate;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (k, h)| {
                let (s, c) = (w * k as f64).sin_cos();
                (re + h * c, im - h * s)
            });
        (re * re + im * im).sqrt()
    }
}

impl Deref for FirKernel {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.taps
    }
}

fn hamming(k: usize, n: usize) -> f64 {
    if n == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos()
}

fn check_odd(taps: usize) -> Result<()> {
    if taps == 0 || taps % 2 == 0 {
        return Err(Error::config(format!("tap count must be odd, got {taps}")));
    }
    Ok(())
}

/// Hamming-windowed sinc low-pass normalized to unit DC gain.
pub fn design_lowpass(cutoff: f64, sample_rate: f64, taps: usize) -> Result<FirKernel> {
    check_odd(taps)?;
    if !(cutoff > 0.0 && cutoff < sample_rate / 2.0) {
        return Err(Error::config(format!(
            "cutoff {cutoff} Hz outside (0, {}) Hz",
            sample_rate / 2.0
        )));
    }
    let fc = cutoff / sample_rate;
    let mid = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|k| {
            let t = k as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            sinc * hamming(k, taps)
        })
        .collect();
    normalize(&mut h);
    Ok(FirKernel { taps: h, cutoff })
}

/// Normalized Hamming window: a low-pass whose taps are all positive, so it
/// never drives a nonnegative input below zero.
pub fn design_smoothing(taps: usize, sample_rate: f64) -> Result<FirKernel> {
    check_odd(taps)?;
    let mut h: Vec<f64> = (0..taps).map(|k| hamming(k, taps)).collect();
    normalize(&mut h);
    // -6 dB point of a Hamming window is roughly 1.81 bins
    let cutoff = (1.81 * sample_rate / taps as f64).min(sample_rate / 2.0);
    Ok(FirKernel { taps: h, cutoff })
}

fn normalize(h: &mut [f64]) {
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    // force exact symmetry after rounding
    let n = h.len();
    for k in 0..n / 2 {
        let avg = 0.5 * (h[k] + h[n - 1 - k]);
        h[k] = avg;
        h[n - 1 - k] = avg;
    }
}

/// Convolution of fixed-length signals with one kernel, with plans,
/// kernel spectrum and scratch allocated once.
pub struct FftConvolver {
    signal_len: usize,
    kernel_len: usize,
    fft_len: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    kernel_spectrum: Vec<Complex<f64>>,
    time: Vec<f64>,
    spectrum: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl fmt::Debug for FftConvolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftConvolver")
            .field("signal_len", &self.signal_len)
            .field("kernel_len", &self.kernel_len)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl FftConvolver {
    pub fn new(kernel: &[f64], signal_len: usize) -> Result<Self> {
        if kernel.is_empty() || signal_len == 0 {
            return Err(Error::arg("empty signal or kernel"));
        }
        if kernel.len() > signal_len {
            return Err(Error::arg(format!(
                "kernel length {} exceeds signal length {signal_len}",
                kernel.len()
            )));
        }
        let full = signal_len + kernel.len() - 1;
        let fft_len = full.next_power_of_two();
        let mut planner = RealFftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let scratch_len = forward.get_scratch_len().max(inverse.get_scratch_len());
        let mut time = vec![0.0; fft_len];
        let mut kernel_spectrum = forward.make_output_vec();
        time[..kernel.len()].copy_from_slice(kernel);
        let mut scratch = vec![Complex::new(0.0, 0.0); scratch_len];
        forward
            .process_with_scratch(&mut time, &mut kernel_spectrum, &mut scratch)
            .map_err(|e| Error::arg(e.to_string()))?;
        let scale = 1.0 / fft_len as f64;
        kernel_spectrum.iter_mut().for_each(|c| *c *= scale);
        Ok(Self {
            signal_len,
            kernel_len: kernel.len(),
            fft_len,
            spectrum: forward.make_output_vec(),
            forward,
            inverse,
            kernel_spectrum,
            time,
            scratch,
        })
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    /// Length of the full linear convolution.
    pub fn full_len(&self) -> usize {
        self.signal_len + self.kernel_len - 1
    }

    /// Writes `out[m] = (x * h)[offset + m * step]`, zero past the end of
    /// the linear convolution.
    pub fn apply(&mut self, x: &[f64], offset: usize, step: usize, out: &mut [f64]) {
        assert_eq!(x.len(), self.signal_len, "signal length changed");
        assert!(step >= 1);
        self.time[..x.len()].copy_from_slice(x);
        self.time[x.len()..].fill(0.0);
        // lengths are fixed at construction, so these cannot fail
        self.forward
            .process_with_scratch(&mut self.time, &mut self.spectrum, &mut self.scratch)
            .expect("forward fft");
        for (s, k) in self.spectrum.iter_mut().zip(&self.kernel_spectrum) {
            *s *= k;
        }
        self.inverse
            .process_with_scratch(&mut self.spectrum, &mut self.time, &mut self.scratch)
            .expect("inverse fft");
        let full = self.full_len();
        for (m, o) in out.iter_mut().enumerate() {
            let idx = offset + m * step;
            *o = if idx < full { self.time[idx] } else { 0.0 };
        }
    }
}

/// Per-channel linear convolution in the frequency domain.
///
/// With `compensate_delay` the output is advanced by `(K-1)/2` samples and
/// truncated to the input length; otherwise the full `L+K-1` result is
/// returned.
pub fn fft_convolve(signals: &SignalMatrix, kernel: &[f64], compensate_delay: bool) -> Result<SignalMatrix> {
    let (offset, len) = if compensate_delay {
        ((kernel.len().max(1) - 1) / 2, signals.len())
    } else {
        (0, (signals.len() + kernel.len()).saturating_sub(1))
    };
    convolve_strided(signals, kernel, offset, 1, len, signals.sample_rate())
}

pub(crate) fn convolve_strided(
    signals: &SignalMatrix,
    kernel: &[f64],
    offset: usize,
    step: usize,
    out_len: usize,
    out_rate: f64,
) -> Result<SignalMatrix> {
    if signals.is_empty() || kernel.is_empty() {
        return Err(Error::arg("empty signal or kernel"));
    }
    if kernel.len() > signals.len() {
        return Err(Error::arg(format!(
            "kernel length {} exceeds signal length {}",
            kernel.len(),
            signals.len()
        )));
    }
    let mut out = vec![0.0; signals.channels() * out_len];
    if kernel.len() == 1 {
        let g = kernel[0];
        for (c, row) in signals.rows().enumerate() {
            for (m, o) in out[c * out_len..(c + 1) * out_len].iter_mut().enumerate() {
                let idx = offset + m * step;
                *o = if idx < row.len() { g * row[idx] } else { 0.0 };
            }
        }
    } else {
        let mut conv = FftConvolver::new(kernel, signals.len())?;
        for (c, row) in signals.rows().enumerate() {
            conv.apply(row, offset, step, &mut out[c * out_len..(c + 1) * out_len]);
        }
    }
    SignalMatrix::from_flat(out, signals.channels(), out_len, out_rate)
}

/// Anti-alias low-pass (cutoff 0.45·fs/D) then keep every D-th sample.
pub fn decimate(signals: &SignalMatrix, factor: usize) -> Result<SignalMatrix> {
    decimate_with(signals, factor, DECIMATION_TAPS)
}

pub fn decimate_with(signals: &SignalMatrix, factor: usize, taps: usize) -> Result<SignalMatrix> {
    if factor == 0 {
        return Err(Error::arg("decimation factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(signals.clone());
    }
    let fs = signals.sample_rate();
    let kernel = design_lowpass(0.45 * fs / factor as f64, fs, taps)?;
    let out_len = signals.len().div_ceil(factor);
    convolve_strided(signals, &kernel, kernel.delay(), factor, out_len, fs / factor as f64)
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Brute-force linear convolution, full length.
    pub fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len() + h.len() - 1];
        for (i, xv) in x.iter().enumerate() {
            for (j, hv) in h.iter().enumerate() {
                y[i + j] += xv * hv;
            }
        }
        y
    }

    pub fn rel_rms(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}
