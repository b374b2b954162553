//! Labeled datasets and the `TMDS` binary format.
//!
//! Layout (little-endian):
//!
//! ```text
//! header:  b"TMDS" | version u32 = 1 | record count u64 | base seed u64
//! record:  M u32 | L u32 | K u32 | snr_db f64 | K x f64 angles (rad, ascending)
//!          | record seed u64 | M*L x (re f32, im f32), snapshot-major
//! ```
//!
//! A JSON manifest holding the generation config is written next to the
//! data file as `<path>.json`. Snapshots are stored unquantized; the
//! quantization arm is chosen when the data is consumed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{generate_snapshots, sample_angles, ArrayGeometry, Scenario, SnapshotMatrix};
use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::rng::{derive_seed, rng_from_seed};

pub const MAGIC: &[u8; 4] = b"TMDS";
pub const VERSION: u32 = 1;

/// How a dataset is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: u64,
    #[serde(default = "default_m")]
    pub antennas: usize,
    #[serde(default = "default_l")]
    pub snapshots: usize,
    #[serde(default = "default_snrs")]
    pub snr_db: Vec<f64>,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Minimum wrapped separation between DOAs in radians; `null` disables.
    #[serde(default = "default_sep")]
    pub min_separation: Option<f64>,
}

fn default_m() -> usize {
    8
}
fn default_l() -> usize {
    200
}
fn default_snrs() -> Vec<f64> {
    vec![0.0, 5.0, 10.0]
}
fn default_k_min() -> usize {
    2
}
fn default_k_max() -> usize {
    5
}
fn default_sep() -> Option<f64> {
    Some(0.1)
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 0,
            antennas: default_m(),
            snapshots: default_l(),
            snr_db: default_snrs(),
            k_min: default_k_min(),
            k_max: default_k_max(),
            base_seed: 0,
            min_separation: default_sep(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas < 2 {
            return Err(Error::Config("antennas must be >= 2".into()));
        }
        if self.snapshots == 0 {
            return Err(Error::Config("snapshots must be >= 1".into()));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "invalid source-count range [{}, {}]",
                self.k_min, self.k_max
            )));
        }
        if self.k_max >= self.antennas {
            return Err(Error::Capability(format!(
                "K up to {} exceeds M - 1 = {}",
                self.k_max,
                self.antennas - 1
            )));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNR set must be non-empty and finite".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::ula(self.antennas)
    }

    /// Regenerates record `index` from the config alone.
    pub fn record(&self, index: u64) -> Result<DatasetRecord> {
        let geometry = self.geometry()?;
        self.record_with(&geometry, index)
    }

    fn record_with(&self, geometry: &ArrayGeometry, index: u64) -> Result<DatasetRecord> {
        let seed = derive_seed(self.base_seed, index);
        let mut rng = rng_from_seed(derive_seed(seed, 0));
        let k = rng.random_range(self.k_min..=self.k_max);
        let thetas = sample_angles(k, self.min_separation, &mut rng)?;
        let snr = self.snr_db[rng.random_range(0..self.snr_db.len())];
        let scenario = Scenario::new(thetas, snr, self.snapshots)?;
        let snapshots = generate_snapshots(&scenario, geometry, seed)?;
        Ok(DatasetRecord {
            scenario,
            snapshots,
            seed,
        }
        .rounded_to_storage())
    }
}

/// One labeled acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub scenario: Scenario,
    pub snapshots: SnapshotMatrix,
    pub seed: u64,
}

impl DatasetRecord {
    /// Rounds samples to the f32 precision used on disk.
    pub fn rounded_to_storage(mut self) -> Self {
        let mut m = self.snapshots.matrix().clone();
        for z in m.as_mut_slice() {
            *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
        }
        self.snapshots = SnapshotMatrix::unquantized(m);
        self
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub base_seed: u64,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads a `TMDS` file.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{} is not a TMDS file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported TMDS version {version}")));
        }
        let count = read_u64(&mut r)?;
        let base_seed = read_u64(&mut r)?;
        let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            records.push(read_record(&mut r)?);
        }
        Ok(Self { base_seed, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, self.records.len() as u64, self.base_seed)?;
        for rec in &self.records {
            write_record(&mut w, rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Manifest<'a> {
    format: &'a str,
    version: u32,
    config: DatasetConfig,
}

/// Samples `config.count` records and writes them plus the manifest.
///
/// Records are generated in parallel chunks and written in index order, so
/// the file is byte-identical for a given config.
pub fn generate_dataset(config: &DatasetConfig, out_path: &Path) -> Result<()> {
    config.validate()?;
    let geometry = config.geometry()?;
    let mut w = BufWriter::new(File::create(out_path)?);
    write_header(&mut w, config.count, config.base_seed)?;
    const CHUNK: u64 = 512;
    let mut start = 0;
    while start < config.count {
        let end = (start + CHUNK).min(config.count);
        let chunk = (start..end)
            .into_par_iter()
            .map(|d| config.record_with(&geometry, d))
            .collect::<Result<Vec<_>>>()?;
        for rec in &chunk {
            write_record(&mut w, rec)?;
        }
        start = end;
    }
    w.flush()?;
    let manifest = Manifest {
        format: "TMDS",
        version: VERSION,
        config: config.clone(),
    };
    std::fs::write(manifest_path(out_path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads the generation config stored next to a dataset file.
pub fn read_manifest(path: &Path) -> Result<DatasetConfig> {
    #[derive(Deserialize)]
    struct Owned {
        config: DatasetConfig,
    }
    let text = std::fs::read_to_string(manifest_path(path))?;
    Ok(serde_json::from_str::<Owned>(&text)?.config)
}

fn write_header(w: &mut impl Write, count: u64, base_seed: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&base_seed.to_le_bytes())?;
    Ok(())
}

fn write_record(w: &mut impl Write, rec: &DatasetRecord) -> Result<()> {
    let y = &rec.snapshots;
    let (m, l) = (y.antennas(), y.snapshots());
    let sc = &rec.scenario;
    w.write_all(&(m as u32).to_le_bytes())?;
    w.write_all(&(l as u32).to_le_bytes())?;
    w.write_all(&(sc.sources() as u32).to_le_bytes())?;
    w.write_all(&sc.snr_db().to_le_bytes())?;
    for t in sc.thetas() {
        w.write_all(&t.to_le_bytes())?;
    }
    w.write_all(&rec.seed.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m * l * 8);
    for t in 0..l {
        for i in 0..m {
            let z = y.at(i, t);
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_record(r: &mut impl Read) -> Result<DatasetRecord> {
    let m = read_u32(r)? as usize;
    let l = read_u32(r)? as usize;
    let k = read_u32(r)? as usize;
    if m < 2 || k == 0 || k >= m {
        return Err(Error::Format(format!("record header M={m} K={k} is invalid")));
    }
    let snr_db = read_f64(r)?;
    let thetas = (0..k).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    let seed = read_u64(r)?;
    let mut buf = vec![0u8; m * l * 8];
    r.read_exact(&mut buf)?;
    let mut data = ComplexMatrix::zeros(m, l);
    for (n, pair) in buf.chunks_exact(8).enumerate() {
        let re = f32::from_le_bytes(pair[..4].try_into().unwrap()) as f64;
        let im = f32::from_le_bytes(pair[4..].try_into().unwrap()) as f64;
        data[(n % m, n / m)] = Complex64::new(re, im);
    }
    Ok(DatasetRecord {
        scenario: Scenario::new(thetas, snr_db, l)?,
        snapshots: SnapshotMatrix::unquantized(data),
        seed,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}
