use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::SignalMatrix;
use crate::error::{Error, Result};

/// Linear FM sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpParams {
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
    pub sample_rate: f64,
}

impl Default for ChirpParams {
    /// 90 kHz to 25 kHz down-sweep over 3 ms, at the 450 kHz baseband rate.
    fn default() -> Self {
        Self {
            f_start: 90e3,
            f_end: 25e3,
            duration: 3e-3,
            sample_rate: 450e3,
        }
    }
}

impl ChirpParams {
    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate / 2.0;
        let ok = self.f_start > 0.0
            && self.f_end > 0.0
            && self.f_start < nyq
            && self.f_end < nyq
            && self.duration > 0.0
            && self.sample_rate.is_finite();
        if !ok {
            return Err(Error::config(format!(
                "chirp {}..{} Hz over {} s does not fit below Nyquist {nyq} Hz",
                self.f_start, self.f_end, self.duration
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same sweep sampled at another rate.
    pub fn at_rate(&self, sample_rate: f64) -> Self {
        Self { sample_rate, ..*self }
    }

    /// Phase in cycles at time `t`.
    pub fn phase(&self, t: f64) -> f64 {
        self.f_start * t + (self.f_end - self.f_start) / (2.0 * self.duration) * t * t
    }

    pub fn samples(&self) -> Vec<f64> {
        (0..self.len())
            .map(|n| (2.0 * PI * self.phase(n as f64 / self.sample_rate)).sin())
            .collect()
    }
}

pub fn generate_chirp(p: &ChirpParams) -> Result<SignalMatrix> {
    p.validate()?;
    SignalMatrix::single(p.samples(), p.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_length_and_bounds() {
        let c = generate_chirp(&ChirpParams::default()).unwrap();
        assert_eq!(c.len(), 1350);
        assert!(c.channel(0).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    /// Local frequency from the three-term recurrence s[n+1] + s[n-1] = 2 cos(w) s[n],
    /// least-squares over `span` samples centred on `center`.
    fn local_frequency(s: &[f64], center: usize, span: usize, fs: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for n in center - span / 2..=center + span / 2 {
            num += s[n] * (s[n + 1] + s[n - 1]);
            den += 2.0 * s[n] * s[n];
        }
        (num / den).acos() * fs / (2.0 * PI)
    }

    #[test]
    fn instantaneous_frequency_at_ends() {
        let p = ChirpParams::default();
        let s = p.samples();
        let f0 = local_frequency(&s, 3, 4, p.sample_rate);
        let f1 = local_frequency(&s, s.len() - 4, 4, p.sample_rate);
        assert!((f0 / p.f_start - 1.0).abs() < 0.01, "{f0}");
        assert!((f1 / p.f_end - 1.0).abs() < 0.01, "{f1}");
    }

    #[test]
    fn rejects_above_nyquist() {
        let p = ChirpParams {
            f_start: 300e3,
            ..ChirpParams::default()
        };
        assert!(generate_chirp(&p).is_err());
    }
}
