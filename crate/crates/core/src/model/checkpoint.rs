//! `TSDC` checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TSDC" u32 version
//! config: u32 M, u32 D, u32 layers, u32 heads, u32 chunk, u8 adapter,
//!         f64 dropout, u8 zero_init_head, u32 output_kernel, u8 scale_dk
//! u64 parameter count
//! [u8; 4] component order, always "cson"
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 data
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{param_count, Adapter, ModelConfig, ModelParams, TsdModel};
use crate::error::{Result, TsdError};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TSDC";
pub const VERSION: u32 = 1;
pub const COMPONENT_ORDER: &[u8; 4] = b"cson";

fn bad(reason: impl Into<String>) -> TsdError {
    TsdError::Format {
        format: "TSDC",
        reason: reason.into(),
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| bad(format!("{what} {v} exceeds u32")))
}

pub fn write_config<W: Write>(w: &mut W, cfg: &ModelConfig) -> Result<()> {
    for v in [cfg.m, cfg.d, cfg.layers, cfg.heads, cfg.chunk] {
        w.write_all(&u32_of(v, "dimension")?.to_le_bytes())?;
    }
    w.write_all(&[cfg.adapter.code()])?;
    w.write_all(&cfg.dropout.to_le_bytes())?;
    w.write_all(&[cfg.zero_init_head as u8])?;
    w.write_all(&u32_of(cfg.output_kernel, "kernel")?.to_le_bytes())?;
    w.write_all(&[cfg.scale_dk as u8])?;
    Ok(())
}

struct Bytes<'a, R> {
    inner: &'a mut R,
}

impl<R: Read> Bytes<'_, R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => bad("truncated checkpoint"),
            _ => TsdError::Io(e),
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(bad(format!("flag byte {v}"))),
        }
    }
}

pub fn read_config<R: Read>(r: &mut R) -> Result<ModelConfig> {
    let mut b = Bytes { inner: r };
    let m = b.u32()? as usize;
    let d = b.u32()? as usize;
    let layers = b.u32()? as usize;
    let heads = b.u32()? as usize;
    let chunk = b.u32()? as usize;
    let code = b.u8()?;
    let adapter = Adapter::from_code(code).ok_or_else(|| bad(format!("adapter code {code}")))?;
    let dropout = f64::from_le_bytes(b.take()?);
    let zero_init_head = b.flag()?;
    let output_kernel = b.u32()? as usize;
    let scale_dk = b.flag()?;
    let cfg = ModelConfig {
        m,
        d,
        layers,
        heads,
        chunk,
        adapter,
        dropout,
        zero_init_head,
        output_kernel,
        scale_dk,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write<W: Write, T: Real>(w: &mut W, model: &TsdModel<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_config(w, &model.config)?;
    w.write_all(&(param_count(&model.config) as u64).to_le_bytes())?;
    w.write_all(COMPONENT_ORDER)?;
    w.write_all(&u32_of(model.params.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::try_from(t.rank()).map_err(|_| bad("rank exceeds u8"))?])?;
        for &dim in t.shape() {
            w.write_all(&u32_of(dim, "dimension")?.to_le_bytes())?;
        }
        for v in t.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read, T: Real>(r: &mut R) -> Result<TsdModel<T>> {
    let mut b = Bytes { inner: r };
    if &b.take::<4>()? != MAGIC {
        return Err(bad("missing TSDC magic"));
    }
    let version = b.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config = read_config(b.inner)?;
    let recorded = b.u64()?;
    let derived = param_count(&config) as u64;
    if recorded != derived {
        return Err(bad(format!(
            "header records {recorded} parameters but the configuration implies {derived}"
        )));
    }
    if &b.take::<4>()? != COMPONENT_ORDER {
        return Err(bad("unexpected component order"));
    }
    let count = b.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = b.u32()? as usize;
        if len > 4096 {
            return Err(bad(format!("tensor name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        b.inner.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = b.u8()? as usize;
        let shape = (0..rank)
            .map(|_| b.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel as u64 > derived {
            return Err(bad(format!("tensor {name} larger than the whole model")));
        }
        let mut raw = vec![0u8; numel * 4];
        b.inner.read_exact(&mut raw).map_err(|_| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    let mut extra = [0u8; 1];
    if b.inner.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let params = ModelParams::from_named(&config, named)?;
    Ok(TsdModel { config, params })
}

pub fn save<T: Real>(path: &Path, model: &TsdModel<T>) -> Result<()> {
    // write-then-rename so an interrupted save never clobbers the previous file
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w, model)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<TsdModel<T>> {
    let file = File::open(path).map_err(|e| {
        TsdError::Io(io::Error::new(
            e.kind(),
            format!("cannot open checkpoint {}: {e}", path.display()),
        ))
    })?;
    read(&mut BufReader::new(file))
}
