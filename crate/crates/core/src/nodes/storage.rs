use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::wire::{encode_raw_measurement, RawMeasurement};

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// `{serial:08x}_{seq:012}_{timestamp_us}.pdm`
pub fn measurement_file_name(serial: u32, seq: u64, timestamp_us: u64) -> String {
    format!("{serial:08x}_{seq:012}_{timestamp_us}.pdm")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub serial: u32,
    pub seq: u64,
    pub timestamp_us: u64,
    pub bytes: u64,
}

/// Directory of measurement files plus an append-only manifest.
#[derive(Debug)]
pub struct Storage {
    dir: PathBuf,
    manifest: Mutex<File>,
}

impl Storage {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_NAME);
        let fresh = !path.exists();
        let mut manifest = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(manifest, "file\tserial\tseq\ttimestamp_us\tbytes")?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Mutex::new(manifest),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes the measurement file (via a temporary name), then appends its
    /// manifest line.
    pub fn store(&self, m: &RawMeasurement) -> Result<PathBuf> {
        let name = measurement_file_name(m.sensor_serial, m.seq, m.timestamp_us);
        let bytes = encode_raw_measurement(m);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let path = self.dir.join(&name);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, &path)?;
        let mut manifest = self.manifest.lock().expect("manifest lock");
        writeln!(
            manifest,
            "{name}\t{}\t{}\t{}\t{}",
            m.sensor_serial,
            m.seq,
            m.timestamp_us,
            bytes.len()
        )?;
        manifest.flush()?;
        Ok(path)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let f = File::open(dir.join(MANIFEST_NAME))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::decode(format!("manifest line {}: {line:?}", i + 1));
        if cols.len() != 5 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            file: cols[0].to_string(),
            serial: cols[1].parse().map_err(|_| bad())?,
            seq: cols[2].parse().map_err(|_| bad())?,
            timestamp_us: cols[3].parse().map_err(|_| bad())?,
            bytes: cols[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
