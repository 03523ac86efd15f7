use std::io::{Read, Write};

use crate::error::{Error, Result};

const SGMX_MAGIC: u32 = 0x5347_4D58;

/// Rectangular block of real samples, one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    data: Vec<f64>,
    channels: usize,
    len: usize,
    sample_rate: f64,
}

impl SignalMatrix {
    pub fn zeros(channels: usize, len: usize, sample_rate: f64) -> Self {
        Self {
            data: vec![0.0; channels * len],
            channels,
            len,
            sample_rate,
        }
    }

    pub fn from_channels(rows: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::arg("signal matrix needs at least one channel"));
        }
        let len = rows[0].len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::arg("channels have unequal lengths"));
        }
        if len == 0 {
            return Err(Error::arg("channels must not be empty"));
        }
        let channels = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_flat(data, channels, len, sample_rate)
    }

    /// Row-major samples, `channels * len` of them.
    pub fn from_flat(data: Vec<f64>, channels: usize, len: usize, sample_rate: f64) -> Result<Self> {
        if data.len() != channels * len {
            return Err(Error::arg(format!(
                "expected {} samples for {channels}x{len}, got {}",
                channels * len,
                data.len()
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::arg("sample rate must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("signal contains non-finite samples"));
        }
        Ok(Self {
            data,
            channels,
            len,
            sample_rate,
        })
    }

    pub fn single(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        let len = samples.len();
        Self::from_flat(samples, 1, len, sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.channels).map(move |c| self.channel(c))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }

    pub fn write_sgmx<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&SGMX_MAGIC.to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.len as u64).to_le_bytes())?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_sgmx<R: Read>(mut r: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let magic = u32::from_le_bytes(b4);
        if magic != SGMX_MAGIC {
            return Err(Error::decode(format!("bad SGMX magic {magic:#010x}")));
        }
        r.read_exact(&mut b4)?;
        let channels = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let fs = f64::from_le_bytes(b8);
        let mut raw = vec![0u8; channels * len * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_flat(data, channels, len, fs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_and_nonfinite() {
        assert!(SignalMatrix::from_channels(vec![vec![0.0; 3], vec![0.0; 2]], 1.0).is_err());
        assert!(SignalMatrix::from_channels(vec![vec![f64::NAN]], 1.0).is_err());
        assert!(SignalMatrix::from_channels(vec![], 1.0).is_err());
    }

    #[test]
    fn sgmx_round_trip_at_f32_precision() {
        let m = SignalMatrix::from_channels(vec![vec![0.5, -1.25, 3.0], vec![1e-3, 2.0, -7.5]], 450e3).unwrap();
        let mut buf = Vec::new();
        m.write_sgmx(&mut buf).unwrap();
        assert_eq!(&buf[..4], &[0x58, 0x4D, 0x47, 0x53]);
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 6 * 4);
        let back = SignalMatrix::read_sgmx(&buf[..]).unwrap();
        assert_eq!(back.channels(), 2);
        assert_eq!(back.sample_rate(), 450e3);
        for (a, b) in m.as_flat().iter().zip(back.as_flat()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
