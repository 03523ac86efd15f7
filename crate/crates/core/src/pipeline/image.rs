use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Direction, DirectionSet};

pub const AIMG_MAGIC: u32 = 0x4149_4D47;
pub const AIMG_VERSION: u16 = 1;
const AIMG_HEADER_LEN: usize = 4 + 2 + 4 + 8 + 4 + 4 + 8;

/// Directions x range-bins energy map of one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticImage {
    pub sensor_serial: u32,
    pub timestamp_us: u64,
    pub directions: Arc<DirectionSet>,
    pub range_bin_size: f64,
    range_bins: usize,
    energies: Vec<f32>,
}

impl AcousticImage {
    pub fn new(
        sensor_serial: u32,
        timestamp_us: u64,
        directions: Arc<DirectionSet>,
        range_bin_size: f64,
        range_bins: usize,
        energies: Vec<f32>,
    ) -> Result<Self> {
        if energies.len() != directions.len() * range_bins {
            return Err(Error::arg(format!(
                "energy matrix has {} cells, expected {}x{range_bins}",
                energies.len(),
                directions.len()
            )));
        }
        if energies.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::arg("image energies must be finite and nonnegative"));
        }
        Ok(Self {
            sensor_serial,
            timestamp_us,
            directions,
            range_bin_size,
            range_bins,
            energies,
        })
    }

    pub fn range_bins(&self) -> usize {
        self.range_bins
    }

    pub fn direction_count(&self) -> usize {
        self.directions.len()
    }

    pub fn energies(&self) -> &[f32] {
        &self.energies
    }

    pub fn row(&self, direction: usize) -> &[f32] {
        &self.energies[direction * self.range_bins..(direction + 1) * self.range_bins]
    }

    pub fn at(&self, direction: usize, bin: usize) -> f32 {
        self.energies[direction * self.range_bins + bin]
    }

    pub fn range_for_bin(&self, bin: usize) -> f64 {
        bin as f64 * self.range_bin_size
    }

    /// (direction, range bin) of the strongest cell.
    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self
            .energies
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &e)| if e > best.1 { (i, e) } else { best });
        (i / self.range_bins, i % self.range_bins)
    }

    pub fn peak(&self) -> f32 {
        self.energies.iter().copied().fold(0.0, f32::max)
    }

    pub fn encoded_len(&self) -> usize {
        AIMG_HEADER_LEN + self.directions.len() * 8 + self.energies.len() * 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&AIMG_MAGIC.to_le_bytes());
        out.extend_from_slice(&AIMG_VERSION.to_le_bytes());
        out.extend_from_slice(&self.sensor_serial.to_le_bytes());
        out.extend_from_slice(&self.timestamp_us.to_le_bytes());
        out.extend_from_slice(&(self.directions.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.range_bins as u32).to_le_bytes());
        out.extend_from_slice(&self.range_bin_size.to_le_bytes());
        for d in self.directions.directions() {
            out.extend_from_slice(&(d.azimuth as f32).to_le_bytes());
            out.extend_from_slice(&(d.elevation as f32).to_le_bytes());
        }
        for e in &self.energies {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out
    }

    /// Decodes an AIMG buffer. Directions come back as a custom set at f32
    /// precision.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.u32()?;
        if magic != AIMG_MAGIC {
            return Err(Error::decode(format!("bad AIMG magic {magic:#010x}")));
        }
        let version = r.u16()?;
        if version != AIMG_VERSION {
            return Err(Error::decode(format!("unsupported AIMG version {version}")));
        }
        let serial = r.u32()?;
        let timestamp = r.u64()?;
        let n_dirs = r.u32()? as usize;
        let bins = r.u32()? as usize;
        let bin_size = r.f64()?;
        let body = n_dirs
            .checked_mul(8)
            .and_then(|d| n_dirs.checked_mul(bins)?.checked_mul(4)?.checked_add(d))
            .ok_or_else(|| Error::decode("AIMG shape overflows"))?;
        r.need(body)?;
        let mut dirs = Vec::with_capacity(n_dirs);
        for _ in 0..n_dirs {
            let az = r.f32()? as f64;
            let el = r.f32()? as f64;
            dirs.push(Direction::new(az, el));
        }
        let energies = (0..n_dirs * bins).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(Error::decode(format!("{} trailing bytes after AIMG body", r.remaining())));
        }
        Self::new(
            serial,
            timestamp,
            Arc::new(DirectionSet::custom(dirs)),
            bin_size,
            bins,
            energies,
        )
        .map_err(|e| Error::decode(e.to_string()))
    }

    /// `direction_index,azimuth_rad,elevation_rad,range_m,energy` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "direction_index,azimuth_rad,elevation_rad,range_m,energy")?;
        for (d, dir) in self.directions.directions().iter().enumerate() {
            for (k, e) in self.row(d).iter().enumerate() {
                writeln!(w, "{d},{},{},{},{e}", dir.azimuth, dir.elevation, self.range_for_bin(k))?;
            }
        }
        Ok(())
    }
}

/// Little-endian cursor that reports how many bytes are missing.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn need(&self, n: usize) -> Result<()> {
        if self.remaining() < n {
            return Err(Error::decode(format!(
                "truncated payload: {} more bytes needed",
                n - self.remaining()
            )));
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n)?;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
