//! Binary container for named tensors.
//!
//! Layout, all little-endian: magic `FQUF`, version u32, record count u32,
//! then per record: name length u32, name bytes, four u64 shape dims, and the
//! f64 payload. A dataset cache is the same container followed by a labels
//! section: label count u32, then per label the same header with a u16
//! payload. Round-trips are bit-exact (payloads move as raw IEEE-754 bits).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LabelMap, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FQUF";
pub const VERSION: u32 = 1;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("reading {what} at byte {}: {e}", self.offset),
            ))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

fn write_header<W: Write>(w: &mut W, name: &str, shape: [u64; 4]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    for d in shape {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut CountingReader<R>) -> Result<(String, [u64; 4])> {
    let name_len = r.read_u32("record name length")? as usize;
    if name_len > 1 << 20 {
        return Err(Error::data(format!("unreasonable record name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes, "record name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::data("record name is not valid UTF-8"))?;
    let mut shape = [0u64; 4];
    for d in &mut shape {
        *d = r.read_u64("record shape")?;
    }
    Ok((name, shape))
}

fn shape_from_dims(name: &str, dims: [u64; 4]) -> Result<Shape> {
    let numel: u128 = dims.iter().map(|&d| d as u128).product();
    if numel > (1 << 32) {
        return Err(Error::data(format!("record `{name}` claims {numel} elements")));
    }
    Ok(Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize))
}

/// Writes the tensor section. Record order is preserved on read.
pub fn write_tensors<W: Write>(w: &mut W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        let s = t.shape();
        write_header(w, name, [s.b() as u64, s.c() as u64, s.h() as u64, s.w() as u64])?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors_inner<R: Read>(r: &mut CountingReader<R>) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::data(format!(
            "bad magic {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported container version {version}")));
    }
    let count = r.read_u32("record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, dims) = read_header(r)?;
        let shape = shape_from_dims(&name, dims)?;
        let mut data = vec![0.0f64; shape.numel()];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf, "f64 payload")?;
            *v = f64::from_le_bytes(buf);
        }
        records.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(records)
}

/// Reads a tensor-only container (checkpoint).
pub fn read_tensors<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    read_tensors_inner(&mut CountingReader::new(r))
}

pub fn write_checkpoint_file(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Dataset cache: tensor section plus a labels section.
pub fn write_dataset<W: Write>(
    w: &mut W,
    images: &[(String, Tensor)],
    labels: &[(String, LabelMap)],
) -> Result<()> {
    write_tensors(w, images)?;
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    for (name, l) in labels {
        write_header(w, name, [l.b as u64, 1, l.h as u64, l.w as u64])?;
        for v in &l.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<(Vec<(String, Tensor)>, Vec<(String, LabelMap)>)> {
    let mut cr = CountingReader::new(r);
    let images = read_tensors_inner(&mut cr)?;
    let count = cr.read_u32("label count")? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, dims) = read_header(&mut cr)?;
        let shape = shape_from_dims(&name, dims)?;
        if shape.c() != 1 {
            return Err(Error::data(format!(
                "label record `{name}` must have a single channel, got {}",
                shape.c()
            )));
        }
        let mut data = vec![0u16; shape.b() * shape.h() * shape.w()];
        let mut buf = [0u8; 2];
        for v in &mut data {
            cr.read_exact(&mut buf, "u16 payload")?;
            *v = u16::from_le_bytes(buf);
        }
        labels.push((name, LabelMap::new(shape.b(), shape.h(), shape.w(), data)?));
    }
    Ok((images, labels))
}

pub fn write_dataset_file(
    path: &Path,
    images: &[(String, Tensor)],
    labels: &[(String, LabelMap)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, images, labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset_file(path: &Path) -> Result<(Vec<(String, Tensor)>, Vec<(String, LabelMap)>)> {
    read_dataset(BufReader::new(File::open(path)?))
}
