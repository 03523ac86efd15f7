//! 1-bit PDM streams: packing, unpacking and demodulation.
//!
//! Packed layout is frame-major: for each frame, one bit per channel in
//! channel order, MSB first within each byte. Bit 1 is +1, bit 0 is -1.

use serde::{Deserialize, Serialize};

use super::fir::{convolve_strided, design_lowpass, FirKernel};
use super::SignalMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PdmBitMatrix {
    values: Vec<i8>,
    channels: usize,
    frames: usize,
    pdm_rate: f64,
}

impl PdmBitMatrix {
    /// `values` is channel-major, each entry -1 or +1.
    pub fn new(values: Vec<i8>, channels: usize, frames: usize, pdm_rate: f64) -> Result<Self> {
        if values.len() != channels * frames {
            return Err(Error::arg(format!(
                "expected {} bits, got {}",
                channels * frames,
                values.len()
            )));
        }
        if values.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::arg("PDM samples must be -1 or +1"));
        }
        Ok(Self {
            values,
            channels,
            frames,
            pdm_rate,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pdm_rate(&self) -> f64 {
        self.pdm_rate
    }

    pub fn channel(&self, c: usize) -> &[i8] {
        &self.values[c * self.frames..(c + 1) * self.frames]
    }

    pub fn to_signal(&self) -> SignalMatrix {
        let data = self.values.iter().map(|&v| v as f64).collect();
        SignalMatrix::from_flat(data, self.channels, self.frames, self.pdm_rate)
            .expect("bit matrix is rectangular")
    }
}

fn check_layout(len: usize, channels: usize, frames: usize) -> Result<()> {
    if frames % 8 != 0 {
        return Err(Error::decode(format!("frame count {frames} is not a multiple of 8")));
    }
    let expected = channels * frames / 8;
    if len != expected {
        return Err(Error::decode(format!(
            "packed PDM size mismatch: expected {expected} bytes, got {len}"
        )));
    }
    Ok(())
}

pub fn unpack_pdm(packed: &[u8], channels: usize, frames: usize, pdm_rate: f64) -> Result<PdmBitMatrix> {
    check_layout(packed.len(), channels, frames)?;
    let mut values = vec![0i8; channels * frames];
    for f in 0..frames {
        for c in 0..channels {
            let bit = f * channels + c;
            let set = packed[bit / 8] >> (7 - bit % 8) & 1 == 1;
            values[c * frames + f] = if set { 1 } else { -1 };
        }
    }
    Ok(PdmBitMatrix {
        values,
        channels,
        frames,
        pdm_rate,
    })
}

pub fn pack_pdm(bits: &PdmBitMatrix) -> Result<Vec<u8>> {
    let (channels, frames) = (bits.channels, bits.frames);
    if frames % 8 != 0 {
        return Err(Error::arg(format!("frame count {frames} is not a multiple of 8")));
    }
    let mut out = vec![0u8; channels * frames / 8];
    for c in 0..channels {
        for (f, &v) in bits.channel(c).iter().enumerate() {
            if v > 0 {
                let bit = f * channels + c;
                out[bit / 8] |= 0x80 >> (bit % 8);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemodConfig {
    /// Low-pass cutoff, Hz.
    pub cutoff: f64,
    pub taps: usize,
    pub decimation: usize,
}

impl Default for DemodConfig {
    fn default() -> Self {
        Self {
            cutoff: 120e3,
            taps: 255,
            decimation: 10,
        }
    }
}

/// Low-pass via FFT convolution, then keep every D-th sample.
pub fn pdm_demodulate(bits: &PdmBitMatrix, cfg: &DemodConfig) -> Result<SignalMatrix> {
    let d = cfg.decimation;
    if d == 0 || bits.frames % d != 0 {
        return Err(Error::config(format!(
            "decimation {d} must be >= 1 and divide the frame count {}",
            bits.frames
        )));
    }
    let kernel = design_lowpass(cfg.cutoff, bits.pdm_rate, cfg.taps)?;
    convolve_strided(
        &bits.to_signal(),
        &kernel,
        kernel.delay(),
        d,
        bits.frames / d,
        bits.pdm_rate / d as f64,
    )
}

/// Demodulator working straight on packed bits.
///
/// Splits the frame-major stream into per-channel bit planes, then
/// evaluates the delay-compensated low-pass only at kept output positions,
/// summing one lookup-table entry per 8 taps. Produces the same values as
/// [`pdm_demodulate`] up to rounding.
#[derive(Debug)]
pub struct PdmDecimator {
    channels: usize,
    frames: usize,
    decimation: usize,
    kernel: FirKernel,
    /// `groups` tables of 256 partial sums each.
    table: Vec<f64>,
    groups: usize,
    planes: Vec<u8>,
    plane_len: usize,
    /// Bit planes pre-shifted by each start offset the outputs need, so
    /// every table index is a single byte.
    shifted: Vec<u8>,
    shifts: Vec<usize>,
}

impl PdmDecimator {
    pub fn new(channels: usize, frames: usize, pdm_rate: f64, cfg: &DemodConfig) -> Result<Self> {
        if frames % 8 != 0 || cfg.decimation == 0 || frames % cfg.decimation != 0 {
            return Err(Error::config(format!(
                "frames {frames} must be a multiple of 8 and of decimation {}",
                cfg.decimation
            )));
        }
        let kernel = design_lowpass(cfg.cutoff, pdm_rate, cfg.taps)?;
        if kernel.len() > frames {
            return Err(Error::config("demodulation filter longer than the capture"));
        }
        // correlation form: y[m] = sum_i g[i] x[m*D - a + i], g = reversed taps
        let groups = kernel.len().div_ceil(8);
        let mut g: Vec<f64> = kernel.iter().rev().copied().collect();
        g.resize(groups * 8, 0.0);
        let mut table = vec![0f64; groups * 256];
        for q in 0..groups {
            for v in 0..256usize {
                let sum: f64 = (0..8)
                    .map(|t| {
                        let bit = (v >> (7 - t)) & 1;
                        if bit == 1 {
                            g[q * 8 + t]
                        } else {
                            -g[q * 8 + t]
                        }
                    })
                    .sum();
                table[q * 256 + v] = sum;
            }
        }
        // one spare byte so unaligned 16-bit reads never run off the end
        let plane_len = frames / 8 + 1;
        let a = (kernel.len() - 1) / 2;
        let mut shifts: Vec<usize> = (0..8)
            .map(|m| (m * cfg.decimation + 8 * kernel.len() - a) % 8)
            .collect();
        shifts.sort_unstable();
        shifts.dedup();
        Ok(Self {
            channels,
            frames,
            decimation: cfg.decimation,
            kernel,
            table,
            groups,
            planes: vec![0; channels * plane_len],
            plane_len,
            shifted: vec![0; 8 * channels * plane_len],
            shifts,
        })
    }

    pub fn output_len(&self) -> usize {
        self.frames / self.decimation
    }

    pub fn kernel(&self) -> &FirKernel {
        &self.kernel
    }

    /// Demodulates `packed` into `out` (channel-major, `output_len` per channel).
    pub fn process(&mut self, packed: &[u8], out: &mut [f64]) -> Result<()> {
        check_layout(packed.len(), self.channels, self.frames)?;
        let n_out = self.output_len();
        if out.len() != self.channels * n_out {
            return Err(Error::arg("demodulator output buffer has the wrong size"));
        }
        self.split_planes(packed);
        self.shift_planes();
        let taps = self.kernel.len();
        let a = (taps - 1) / 2;
        let span = self.groups * 8;
        let pl = self.plane_len;
        for c in 0..self.channels {
            let plane = &self.planes[c * pl..(c + 1) * pl];
            let row = &mut out[c * n_out..(c + 1) * n_out];
            for (m, y) in row.iter_mut().enumerate() {
                let center = m * self.decimation;
                if center >= a && center - a + span <= self.frames {
                    let start = center - a;
                    let base = ((start % 8) * self.channels + c) * pl + start / 8;
                    let bytes = &self.shifted[base..base + self.groups];
                    // independent partial sums keep the adds from serializing
                    let mut acc = [0f64; 4];
                    let mut tq = self.table.chunks_exact(2048);
                    let mut bq = bytes.chunks_exact(8);
                    for (t, b) in (&mut tq).zip(&mut bq) {
                        let w = u64::from_le_bytes(b.try_into().expect("8 bytes"));
                        acc[0] += t[(w & 0xFF) as usize];
                        acc[1] += t[256 + (w >> 8 & 0xFF) as usize];
                        acc[2] += t[512 + (w >> 16 & 0xFF) as usize];
                        acc[3] += t[768 + (w >> 24 & 0xFF) as usize];
                        acc[0] += t[1024 + (w >> 32 & 0xFF) as usize];
                        acc[1] += t[1280 + (w >> 40 & 0xFF) as usize];
                        acc[2] += t[1536 + (w >> 48 & 0xFF) as usize];
                        acc[3] += t[1792 + (w >> 56) as usize];
                    }
                    for (i, (t, &b)) in tq.remainder().chunks_exact(256).zip(bq.remainder()).enumerate() {
                        acc[i % 4] += t[b as usize];
                    }
                    *y = (acc[0] + acc[1]) + (acc[2] + acc[3]);
                } else {
                    *y = self.edge_output(plane, center);
                }
            }
        }
        Ok(())
    }

    fn shift_planes(&mut self) {
        let pl = self.plane_len;
        for &s in &self.shifts {
            for c in 0..self.channels {
                let src = &self.planes[c * pl..(c + 1) * pl];
                let dst = &mut self.shifted[(s * self.channels + c) * pl..(s * self.channels + c + 1) * pl];
                if s == 0 {
                    dst.copy_from_slice(src);
                    continue;
                }
                for (d, w) in dst.iter_mut().zip(src.windows(2)) {
                    *d = w[0] << s | w[1] >> (8 - s);
                }
                dst[pl - 1] = src[pl - 1] << s;
            }
        }
    }

    fn edge_output(&self, plane: &[u8], center: usize) -> f64 {
        let h = self.kernel.taps();
        let a = (h.len() - 1) as isize / 2;
        let mut acc = 0.0;
        for (j, hv) in h.iter().enumerate() {
            let idx = center as isize + a - j as isize;
            if idx >= 0 && (idx as usize) < self.frames {
                let i = idx as usize;
                let bit = plane[i / 8] >> (7 - i % 8) & 1;
                acc += if bit == 1 { *hv } else { -*hv };
            }
        }
        acc
    }

    fn split_planes(&mut self, packed: &[u8]) {
        let (channels, frames, plane_len) = (self.channels, self.frames, self.plane_len);
        if channels % 8 == 0 {
            let stride = channels / 8;
            for block in 0..frames / 8 {
                for group in 0..stride {
                    let mut word = 0u64;
                    for k in 0..8 {
                        word = word << 8 | packed[(block * 8 + k) * stride + group] as u64;
                    }
                    let t = transpose8(word);
                    for j in 0..8 {
                        let ch = group * 8 + j;
                        self.planes[ch * plane_len + block] = (t >> (56 - 8 * j)) as u8;
                    }
                }
            }
        } else {
            self.planes.fill(0);
            for f in 0..frames {
                for c in 0..channels {
                    let bit = f * channels + c;
                    if packed[bit / 8] >> (7 - bit % 8) & 1 == 1 {
                        self.planes[c * plane_len + f / 8] |= 0x80 >> (f % 8);
                    }
                }
            }
        }
    }
}

/// Transposes an 8x8 bit matrix held row-major in a u64 (row 0 in the most
/// significant byte, column 0 in each byte's MSB).
fn transpose8(mut x: u64) -> u64 {
    let mut t = (x ^ (x >> 7)) & 0x00AA_00AA_00AA_00AA;
    x = x ^ t ^ (t << 7);
    t = (x ^ (x >> 14)) & 0x0000_CCCC_0000_CCCC;
    x = x ^ t ^ (t << 14);
    t = (x ^ (x >> 28)) & 0x0000_0000_F0F0_F0F0;
    x ^ t ^ (t << 28)
}
