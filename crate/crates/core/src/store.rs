//! Bit-exact persistence: binary dataset files, prior lookup tables, and
//! structured-text checkpoints.
//!
//! Dataset format ("FNDS", little-endian): magic, version u16, N u64,
//! D u32, C u32, then N records of (sample_id u64, label u32, lat f32,
//! lon f32, day f32, hour f32, embedding D x f64).
//!
//! Prior table format ("FPRT", little-endian): magic, version u16, N u64,
//! C u32, then N x (sample_id u64, row C x f32).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::CategoricalDistribution;
use crate::error::{Error, Result};
use crate::features::SpatioTemporalContext;
use crate::training::StageCheckpoint;

pub const DATASET_MAGIC: [u8; 4] = *b"FNDS";
pub const PRIOR_MAGIC: [u8; 4] = *b"FPRT";
pub const FORMAT_VERSION: u16 = 1;

/// Row sums of a prior table may deviate from 1 by at most this much
/// (8-bit-quantized upstream data cannot sum exactly to 1).
pub const PRIOR_ROW_SUM_TOL: f64 = 1e-4;

/// One labeled sample: id, class label, spatiotemporal context, embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub label: u32,
    pub context: SpatioTemporalContext,
    pub embedding: Vec<f64>,
}

/// An in-memory dataset: records plus the class count the labels index into.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, n_classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("dataset must be nonempty".into()));
        }
        if n_classes < 2 {
            return Err(Error::InvalidInput("need at least 2 classes".into()));
        }
        let d = records[0].embedding.len();
        if d == 0 {
            return Err(Error::InvalidInput("embedding dim must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.embedding.len() != d {
                return Err(Error::Dimension(format!(
                    "sample {} has embedding dim {}, expected {d}",
                    r.sample_id,
                    r.embedding.len()
                )));
            }
            if r.label as usize >= n_classes {
                return Err(Error::InvalidInput(format!(
                    "sample {} has label {} >= {n_classes}",
                    r.sample_id, r.label
                )));
            }
            if !seen.insert(r.sample_id) {
                return Err(Error::DuplicateSampleId(r.sample_id));
            }
        }
        Ok(Self { records, n_classes })
    }

    pub fn embed_dim(&self) -> usize {
        self.records[0].embedding.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

// -- little-endian read helpers with explicit truncation mapping --

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}

macro_rules! reader_fn {
    ($name:ident, $ty:ty, $n:expr) => {
        fn $name<R: Read>(r: &mut R) -> Result<$ty> {
            let mut buf = [0u8; $n];
            read_exact_or_truncated(r, &mut buf)?;
            Ok(<$ty>::from_le_bytes(buf))
        }
    };
}

reader_fn!(read_u16, u16, 2);
reader_fn!(read_u32, u32, 4);
reader_fn!(read_u64, u64, 8);
reader_fn!(read_f32, f32, 4);
reader_fn!(read_f64, f64, 8);

fn read_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact_or_truncated(r, &mut found)?;
    if found != expected {
        return Err(Error::MagicMismatch { expected, found });
    }
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&(dataset.embed_dim() as u32).to_le_bytes())?;
    w.write_all(&(dataset.n_classes as u32).to_le_bytes())?;
    for r in &dataset.records {
        w.write_all(&r.sample_id.to_le_bytes())?;
        w.write_all(&r.label.to_le_bytes())?;
        w.write_all(&r.context.lat.to_le_bytes())?;
        w.write_all(&r.context.lon.to_le_bytes())?;
        w.write_all(&r.context.day.to_le_bytes())?;
        w.write_all(&r.context.hour.to_le_bytes())?;
        for &e in &r.embedding {
            w.write_all(&e.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, DATASET_MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = read_u64(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let sample_id = read_u64(&mut r)?;
        let label = read_u32(&mut r)?;
        let lat = read_f32(&mut r)?;
        let lon = read_f32(&mut r)?;
        let day = read_f32(&mut r)?;
        let hour = read_f32(&mut r)?;
        let context = SpatioTemporalContext::new(lat, lon, day, hour)
            .map_err(|e| Error::Malformed(format!("sample {sample_id}: {e}")))?;
        let mut embedding = Vec::with_capacity(d);
        for _ in 0..d {
            embedding.push(read_f64(&mut r)?);
        }
        records.push(SampleRecord {
            sample_id,
            label,
            context,
            embedding,
        });
    }
    // trailing garbage would make round-trips silently lossy
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Malformed("trailing bytes after dataset payload".into()));
    }
    Dataset::new(records, c)
}

/// Precomputed context priors: an N x C matrix of f32 rows indexed by
/// sample id with constant-time lookup. Raw rows are preserved for
/// bit-exact round-trips; lookups return a renormalized distribution.
#[derive(Debug, Clone)]
pub struct PriorTable {
    ids: Vec<u64>,
    rows: Vec<Vec<f32>>,
    n_classes: usize,
    index: HashMap<u64, usize>,
}

impl PriorTable {
    pub fn new(ids: Vec<u64>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != rows.len() || ids.is_empty() {
            return Err(Error::InvalidInput(
                "prior table needs matching, nonempty ids and rows".into(),
            ));
        }
        let c = rows[0].len();
        if c < 2 {
            return Err(Error::InvalidInput("need at least 2 classes".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, (&id, row)) in ids.iter().zip(&rows).enumerate() {
            if row.len() != c {
                return Err(Error::Dimension(format!(
                    "row for sample {id} has {} classes, expected {c}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > PRIOR_ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "prior row for sample {id} sums to {sum}"
                )));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "prior row for sample {id} has an invalid entry"
                )));
            }
            if index.insert(id, i).is_some() {
                return Err(Error::DuplicateSampleId(id));
            }
        }
        Ok(Self {
            ids,
            rows,
            n_classes: c,
            index,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn contains(&self, sample_id: u64) -> bool {
        self.index.contains_key(&sample_id)
    }

    /// Renormalized prior row for the sample, or a not-found error. Callers
    /// that want a uniform fallback substitute it explicitly.
    pub fn lookup(&self, sample_id: u64) -> Result<CategoricalDistribution> {
        let row = *self
            .index
            .get(&sample_id)
            .ok_or(Error::SampleNotFound(sample_id))?;
        let raw = &self.rows[row];
        let sum: f64 = raw.iter().map(|&v| v as f64).sum();
        CategoricalDistribution::new(raw.iter().map(|&v| v as f64 / sum).collect())
    }
}

pub fn write_prior_table(table: &PriorTable, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&PRIOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(table.len() as u64).to_le_bytes())?;
    w.write_all(&(table.n_classes as u32).to_le_bytes())?;
    for (id, row) in table.ids.iter().zip(&table.rows) {
        w.write_all(&id.to_le_bytes())?;
        for &v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_prior_table(path: &Path) -> Result<PriorTable> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, PRIOR_MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = read_u64(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let mut ids = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(read_u64(&mut r)?);
        let mut row = Vec::with_capacity(c);
        for _ in 0..c {
            row.push(read_f32(&mut r)?);
        }
        rows.push(row);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Malformed("trailing bytes after prior table payload".into()));
    }
    PriorTable::new(ids, rows)
}

/// Checkpoints are written as pretty-printed JSON with fixed field order;
/// the shortest-round-trip float encoding makes write/read/write
/// byte-identical and parse-exact.
pub fn write_checkpoint(ckpt: &StageCheckpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, ckpt)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<StageCheckpoint> {
    let f = File::open(path)?;
    let ckpt: StageCheckpoint = serde_json::from_reader(BufReader::new(f))?;
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

    fn sample_dataset(n: usize, d: usize, c: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| SampleRecord {
                sample_id: i as u64,
                label: rng.gen_range(0..c) as u32,
                context: SpatioTemporalContext::new(
                    rng.gen_range(-60.0f32..60.0),
                    rng.gen_range(-150.0f32..150.0),
                    rng.gen_range(0.0f32..365.0),
                    rng.gen_range(0.0f32..24.0),
                )
                .unwrap(),
                embedding: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            })
            .collect();
        Dataset::new(records, c).unwrap()
    }

    fn sample_table(n: usize, c: usize, seed: u64) -> PriorTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u64> = (0..n as u64).collect();
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|&v| (v / sum) as f32).collect()
            })
            .collect();
        PriorTable::new(ids, rows).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let ds = sample_dataset(50, 7, 4, 9);
        write_dataset(&ds, &p1).unwrap();
        let back = read_dataset(&p1).unwrap();
        assert_eq!(ds, back);
        write_dataset(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn dataset_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = sample_dataset(20, 3, 3, 1);
        write_dataset(&ds, &path).unwrap();

        // truncation
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Truncated)));

        // magic mismatch
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::MagicMismatch { .. })));

        // duplicate id rejected at construction (write time)
        let mut records = ds.records.clone();
        records[1].sample_id = records[0].sample_id;
        assert!(matches!(
            Dataset::new(records, 3),
            Err(Error::DuplicateSampleId(_))
        ));
    }

    #[test]
    fn prior_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.fprt");
        let p2 = dir.path().join("b.fprt");
        let t = sample_table(100, 6, 2);
        write_prior_table(&t, &p1).unwrap();
        let back = read_prior_table(&p1).unwrap();
        write_prior_table(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let d = back.lookup(42).unwrap();
        let sum: f64 = d.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(matches!(back.lookup(10_000), Err(Error::SampleNotFound(10_000))));
    }

    #[test]
    fn quantized_one_hot_row_renormalizes() {
        // 255 raw on one class, 0 elsewhere, rescaled to [0,1]
        let row: Vec<f32> = vec![255.0 / 255.0, 0.0, 0.0];
        let t = PriorTable::new(vec![7], vec![row]).unwrap();
        let d = t.lookup(7).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn prior_rejects_bad_rows() {
        assert!(PriorTable::new(vec![0], vec![vec![0.6, 0.2]]).is_err());
        assert!(PriorTable::new(vec![0, 0], vec![vec![0.5, 0.5], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn lookup_throughput() {
        let t = sample_table(100_000, 16, 3);
        let start = Instant::now();
        let mut acc = 0.0f64;
        for i in 0..1_000_000u64 {
            let d = t.lookup(i % 100_000).unwrap();
            acc += d.probs()[0];
        }
        let elapsed = start.elapsed();
        assert!(acc > 0.0);
        assert!(
            elapsed.as_secs_f64() < 1.0,
            "1e6 lookups took {elapsed:?}, budget 1 s"
        );
    }
}
