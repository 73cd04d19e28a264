//! Versioned little-endian tensor container shared by datasets, networks and
//! model bundles.
//!
//! Layout: 8-byte magic `MLVLTNSR`, `u32` version, kind string, `u32` entry
//! count, then per entry: name string, `u8` dtype (0 = f64, 1 = i64,
//! 2 = UTF-8 text), `u32` rank, `u64` dims, payload. Strings are a `u32`
//! byte length followed by UTF-8 bytes; text payloads use a `u64` length.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"MLVLTNSR";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

fn format_err(msg: impl Into<String>) -> ContainerError {
    ContainerError::Format(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
    Text(String),
}

impl Tensor {
    fn dtype(&self) -> u8 {
        match self {
            Tensor::F64 { .. } => 0,
            Tensor::I64 { .. } => 1,
            Tensor::Text(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container {
            kind: kind.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Adds an entry; panics when the element count does not match the shape.
    pub fn put(&mut self, name: impl Into<String>, tensor: Tensor) {
        match &tensor {
            Tensor::F64 { shape, data } => assert_eq!(shape.iter().product::<usize>(), data.len()),
            Tensor::I64 { shape, data } => assert_eq!(shape.iter().product::<usize>(), data.len()),
            Tensor::Text(_) => {}
        }
        self.entries.push((name.into(), tensor));
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.put(name, Tensor::F64 { shape: shape.to_vec(), data });
    }

    pub fn put_i64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<i64>) {
        self.put(name, Tensor::I64 { shape: shape.to_vec(), data });
    }

    pub fn put_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.put(name, Tensor::Text(text.into()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| format_err(format!("missing entry `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Tensor::F64 { shape, data } => Ok((shape, data)),
            _ => Err(format_err(format!("entry `{name}` is not f64"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.get(name)? {
            Tensor::I64 { shape, data } => Ok((shape, data)),
            _ => Err(format_err(format!("entry `{name}` is not i64"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Tensor::Text(s) => Ok(s),
            _ => Err(format_err(format!("entry `{name}` is not text"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, &self.kind)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            write_str(&mut w, name)?;
            w.write_all(&[tensor.dtype()])?;
            match tensor {
                Tensor::F64 { shape, data } => {
                    write_shape(&mut w, shape)?;
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Tensor::I64 { shape, data } => {
                    write_shape(&mut w, shape)?;
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Tensor::Text(s) => {
                    write_shape(&mut w, &[])?;
                    w.write_all(&(s.len() as u64).to_le_bytes())?;
                    w.write_all(s.as_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(format_err("bad magic bytes"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version} (this reader supports {VERSION})")));
        }
        let kind = read_str(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut out = Container::new(kind);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = read_u64(&mut r)?;
                shape.push(usize::try_from(d).map_err(|_| format_err("dimension overflows usize"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err("element count overflows"))?;
            let tensor = match dtype[0] {
                0 => Tensor::F64 {
                    data: read_words(&mut r, len)?.into_iter().map(f64::from_le_bytes).collect(),
                    shape,
                },
                1 => Tensor::I64 {
                    data: read_words(&mut r, len)?.into_iter().map(i64::from_le_bytes).collect(),
                    shape,
                },
                2 => {
                    let n = read_u64(&mut r)?;
                    let bytes = read_bytes(&mut r, n)?;
                    Tensor::Text(String::from_utf8(bytes).map_err(|_| format_err("text entry is not UTF-8"))?)
                }
                other => return Err(format_err(format!("unknown dtype {other}"))),
            };
            out.entries.push((name, tensor));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    /// Loads a container and checks its kind.
    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let c = Container::read_from(BufReader::new(File::open(path)?))?;
        if c.kind != kind {
            return Err(format_err(format!("expected a `{kind}` container, found `{}`", c.kind)));
        }
        Ok(c)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_shape<W: Write>(w: &mut W, shape: &[usize]) -> io::Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads exactly `n` bytes without trusting `n` for the allocation size.
fn read_bytes<R: Read>(r: &mut R, n: u64) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n).read_to_end(&mut buf)?;
    if (buf.len() as u64) < n {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "container is truncated"));
    }
    Ok(buf)
}

fn read_words<R: Read>(r: &mut R, count: usize) -> Result<Vec<[u8; 8]>> {
    let bytes = (count as u64)
        .checked_mul(8)
        .ok_or_else(|| format_err("payload size overflows"))?;
    let buf = read_bytes(r, bytes)?;
    Ok(buf.chunks_exact(8).map(|c| c.try_into().expect("8-byte chunk")).collect())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)?;
    String::from_utf8(read_bytes(r, n as u64)?).map_err(|_| format_err("string is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.put_f64("a", &[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]);
        c.put_i64("b", &[3], vec![-1, 0, i64::MAX]);
        c.put_text("c", "hello\nworld");
        c.put_f64("empty", &[0], vec![]);
        c
    }

    fn bytes(c: &Container) -> Vec<u8> {
        let mut v = Vec::new();
        c.write_to(&mut v).unwrap();
        v
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Container::read_from(bytes(&c).as_slice()).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let b = bytes(&sample());
        assert_eq!(&b[..8], b"MLVLTNSR");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut b = bytes(&sample());
        b[0] = b'X';
        assert!(matches!(Container::read_from(b.as_slice()), Err(ContainerError::Format(_))));
    }

    #[test]
    fn newer_version_is_format_error() {
        let mut b = bytes(&sample());
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Container::read_from(b.as_slice()).unwrap_err();
        assert!(matches!(&err, ContainerError::Format(m) if m.contains("version 2")));
    }

    #[test]
    fn every_truncation_is_io_error() {
        let b = bytes(&sample());
        for cut in 0..b.len() {
            match Container::read_from(&b[..cut]) {
                Err(ContainerError::Io(e)) => assert_eq!(e.kind(), io::ErrorKind::UnexpectedEof),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn typed_accessors() {
        let c = sample();
        assert_eq!(c.i64s("b").unwrap().1, &[-1, 0, i64::MAX]);
        assert!(c.f64s("b").is_err());
        assert!(matches!(c.text("missing"), Err(ContainerError::Format(_))));
    }
}
