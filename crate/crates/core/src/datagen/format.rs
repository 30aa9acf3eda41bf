//! `SDS1` dataset files and single-sample CSV export.
//!
//! Layout (little-endian): magic `SDS1`, `u32` version, `u32 M`, `u64`
//! count, `u64` master seed, `f64` SNR in dB; then per record three `f32`
//! blending factors, the `u64` sample seed, and five `f32` arrays of length
//! `M` in the order `f, c, s, o, n`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use super::{Blend, DatasetPlan, DecomposedSample};
use crate::error::{Result, TsdError};

pub const MAGIC: &[u8; 4] = b"SDS1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub m: usize,
    pub count: u64,
    pub master_seed: u64,
    pub snr_db: f64,
}

fn bad(reason: impl Into<String>) -> TsdError {
    TsdError::Format {
        format: "SDS1",
        reason: reason.into(),
    }
}

pub fn write_header<W: Write>(w: &mut W, header: &DatasetHeader) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let m = u32::try_from(header.m).map_err(|_| bad("signal length exceeds u32"))?;
    w.write_all(&m.to_le_bytes())?;
    w.write_all(&header.count.to_le_bytes())?;
    w.write_all(&header.master_seed.to_le_bytes())?;
    w.write_all(&header.snr_db.to_le_bytes())?;
    Ok(())
}

pub fn write_record<W: Write>(w: &mut W, sample: &DecomposedSample) -> Result<()> {
    for b in sample.blend.as_array() {
        w.write_all(&b.to_le_bytes())?;
    }
    w.write_all(&sample.seed.to_le_bytes())?;
    for series in [&sample.f, &sample.c, &sample.s, &sample.o, &sample.n] {
        for v in series.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes a whole dataset given in memory.
pub fn write_samples<W: Write>(w: &mut W, header: &DatasetHeader, samples: &[DecomposedSample]) -> Result<()> {
    if samples.len() as u64 != header.count {
        return Err(bad(format!(
            "header announces {} records but {} were given",
            header.count,
            samples.len()
        )));
    }
    write_header(w, header)?;
    for s in samples {
        if s.len() != header.m {
            return Err(bad("record length differs from header M"));
        }
        write_record(w, s)?;
    }
    Ok(())
}

/// Generates `plan` in parallel batches and writes records in index order.
/// Returns the realised SNR of every record.
pub fn write_plan<W: Write>(w: &mut W, plan: &DatasetPlan) -> Result<Vec<f64>> {
    write_plan_range(w, plan, 0..plan.count)
}

/// Like [`write_plan`] for the records `range` only; the header count is the
/// range length and every record keeps its plan-wide seed.
pub fn write_plan_range<W: Write>(w: &mut W, plan: &DatasetPlan, range: Range<usize>) -> Result<Vec<f64>> {
    plan.validate()?;
    if range.end > plan.count {
        return Err(TsdError::config(format!(
            "records {range:?} exceed the plan's {} samples",
            plan.count
        )));
    }
    let header = DatasetHeader {
        m: plan.m,
        count: range.len() as u64,
        master_seed: plan.master_seed,
        snr_db: plan.snr_db,
    };
    write_header(w, &header)?;
    const BATCH: usize = 512;
    let mut snrs = Vec::with_capacity(range.len());
    let mut start = range.start;
    while start < range.end {
        let end = (start + BATCH).min(range.end);
        for s in plan.generate_range(start..end)? {
            snrs.push(s.realized_snr());
            write_record(w, &s)?;
        }
        start = end;
    }
    Ok(snrs)
}

pub fn save(path: &Path, header: &DatasetHeader, samples: &[DecomposedSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_samples(&mut w, header, samples)?;
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => bad(format!("truncated {what}")),
        _ => TsdError::Io(e),
    })
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<DatasetHeader> {
    let mut buf = [0u8; HEADER_LEN];
    read_exact(r, &mut buf, "header")?;
    if &buf[..4] != MAGIC {
        return Err(bad("missing SDS1 magic"));
    }
    let version = u32_at(&buf, 4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let m = u32_at(&buf, 8) as usize;
    if m == 0 {
        return Err(bad("zero signal length"));
    }
    Ok(DatasetHeader {
        m,
        count: u64_at(&buf, 12),
        master_seed: u64_at(&buf, 20),
        snr_db: f64::from_le_bytes(buf[28..36].try_into().unwrap()),
    })
}

pub fn read_record<R: Read>(r: &mut R, header: &DatasetHeader) -> Result<DecomposedSample> {
    let m = header.m;
    let mut buf = vec![0u8; 12 + 8 + 5 * 4 * m];
    read_exact(r, &mut buf, "record")?;
    let f32_at = |at: usize| f32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
    let blend = Blend::new(f32_at(0), f32_at(4), f32_at(8));
    let seed = u64_at(&buf, 12);
    let series = |idx: usize| -> Vec<f32> {
        let base = 20 + idx * 4 * m;
        (0..m).map(|i| f32_at(base + 4 * i)).collect()
    };
    Ok(DecomposedSample {
        f: series(0),
        c: series(1),
        s: series(2),
        o: series(3),
        n: series(4),
        blend,
        snr_db: header.snr_db,
        seed,
    })
}

/// An `SDS1` file loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<DecomposedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let header = read_header(r)?;
        let samples = (0..header.count)
            .map(|_| read_record(r, &header))
            .collect::<Result<_>>()?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(bad("trailing bytes after the last record"));
        }
        Ok(Dataset { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            TsdError::Io(io::Error::new(
                e.kind(),
                format!("cannot open dataset {}: {e}", path.display()),
            ))
        })?;
        Self::read(&mut BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save(path, &self.header, &self.samples)
    }
}

/// True when the file starts with the `SDS1` magic.
pub fn is_dataset_file(path: &Path) -> Result<bool> {
    let mut buf = [0u8; 4];
    let mut f = File::open(path)?;
    Ok(f.read(&mut buf)? == 4 && &buf == MAGIC)
}

/// One CSV row per sample index with columns `f,c,s,o,n`.
pub fn write_sample_csv<W: Write>(w: &mut W, sample: &DecomposedSample) -> Result<()> {
    writeln!(w, "f,c,s,o,n")?;
    for i in 0..sample.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            sample.f[i], sample.c[i], sample.s[i], sample.o[i], sample.n[i]
        )?;
    }
    Ok(())
}
