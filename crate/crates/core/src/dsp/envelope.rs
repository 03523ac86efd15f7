use std::fmt;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::fir::{design_smoothing, FirKernel};
use super::SignalMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    /// Length of the smoothing window (odd).
    pub smoothing_taps: usize,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self { smoothing_taps: 15 }
    }
}

/// Analytic-signal magnitude followed by a smoothing low-pass, for
/// fixed-length inputs.
pub struct EnvelopeDetector {
    len: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    smoothing: FirKernel,
    time: Vec<f64>,
    half: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    magnitude: Vec<f64>,
}

impl fmt::Debug for EnvelopeDetector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnvelopeDetector")
            .field("len", &self.len)
            .field("fft_len", &self.time.len())
            .finish()
    }
}

impl EnvelopeDetector {
    pub fn new(len: usize, smoothing: FirKernel) -> Result<Self> {
        if len < 2 {
            return Err(Error::arg("envelope needs at least 2 samples"));
        }
        let n = len.next_power_of_two();
        let mut planner = RealFftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward.get_scratch_len().max(inverse.get_scratch_len());
        Ok(Self {
            len,
            scratch: vec![Complex::new(0.0, 0.0); scratch_len],
            half: forward.make_output_vec(),
            forward,
            inverse,
            smoothing,
            time: vec![0.0; n],
            magnitude: vec![0.0; len],
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// |analytic signal| of `x` into `out`, before smoothing.
    ///
    /// The analytic signal is `x + i·H{x}`; the Hilbert transform comes from
    /// one real inverse FFT of `-i·X[k]` with DC and Nyquist removed.
    pub fn magnitude_into(&mut self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.len);
        let n = self.time.len();
        self.time[..self.len].copy_from_slice(x);
        self.time[self.len..].fill(0.0);
        self.forward
            .process_with_scratch(&mut self.time, &mut self.half, &mut self.scratch)
            .expect("forward fft");
        let last = self.half.len() - 1;
        self.half[0] = Complex::new(0.0, 0.0);
        self.half[last] = Complex::new(0.0, 0.0);
        for z in &mut self.half[1..last] {
            *z = Complex::new(z.im, -z.re);
        }
        self.inverse
            .process_with_scratch(&mut self.half, &mut self.time, &mut self.scratch)
            .expect("inverse fft");
        let scale = 1.0 / n as f64;
        for ((o, &re), &h) in out.iter_mut().zip(x).zip(&self.time) {
            let im = h * scale;
            *o = (re * re + im * im).sqrt();
        }
    }

    /// Smoothed envelope of `x` into `out`.
    pub fn process(&mut self, x: &[f64], out: &mut [f64]) {
        let mut mag = std::mem::take(&mut self.magnitude);
        self.magnitude_into(x, &mut mag);
        smooth(&mag, self.smoothing.taps(), out);
        self.magnitude = mag;
    }
}

/// Delay-compensated direct-form convolution truncated to the input length.
fn smooth(x: &[f64], h: &[f64], out: &mut [f64]) {
    let a = (h.len() - 1) / 2;
    let n = x.len();
    out.fill(0.0);
    // y[i] = sum_j h[j] x[i + a - j], accumulated one tap at a time
    for (j, &hj) in h.iter().enumerate() {
        let lo = j.saturating_sub(a);
        let hi = (n + j).saturating_sub(a).min(n);
        if lo >= hi {
            continue;
        }
        let src = &x[lo + a - j..hi + a - j];
        for (o, v) in out[lo..hi].iter_mut().zip(src) {
            *o += hj * v;
        }
    }
}

pub fn envelope(signals: &SignalMatrix, cfg: &EnvelopeConfig) -> Result<SignalMatrix> {
    let smoothing = design_smoothing(cfg.smoothing_taps, signals.sample_rate())?;
    let mut det = EnvelopeDetector::new(signals.len(), smoothing)?;
    let len = signals.len();
    let mut out = vec![0.0; signals.channels() * len];
    for (c, row) in signals.rows().enumerate() {
        det.process(row, &mut out[c * len..(c + 1) * len]);
    }
    SignalMatrix::from_flat(out, signals.channels(), len, signals.sample_rate())
}
