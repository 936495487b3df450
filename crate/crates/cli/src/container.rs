//! Binary tensor container shared by checkpoints and datasets.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MOEC"  u32 version
//! u64 meta_len, meta bytes (UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len, name bytes, u32 rank, rank × u64 dims, prod(dims) × f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a load returns exactly what
//! was saved.

use std::fmt;
use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 4] = b"MOEC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    /// Bitwise equality, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: String,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug)]
pub enum FormatError {
    Io(io::Error),
    BadMagic([u8; 4]),
    BadVersion(u32),
    Malformed(String),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "i/o error: {e}"),
            FormatError::BadMagic(m) => write!(f, "not a MOEC file (magic {m:?})"),
            FormatError::BadVersion(v) => write!(f, "unsupported MOEC version {v} (expected {VERSION})"),
            FormatError::Malformed(s) => write!(f, "malformed MOEC file: {s}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        FormatError::Io(e)
    }
}

fn len_u32(n: usize, what: &str) -> io::Result<u32> {
    u32::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} too long")))
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&len_u32(self.tensors.len(), "tensor list")?.to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&len_u32(t.name.len(), "tensor name")?.to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&len_u32(t.dims.len(), "tensor rank")?.to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let meta_len = read_u64(r)? as usize;
        let meta = String::from_utf8(read_bytes(r, meta_len)?)
            .map_err(|_| FormatError::Malformed("meta is not UTF-8".into()))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(read_u64(r)? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8).map(|_| n))
                .ok_or_else(|| FormatError::Malformed(format!("tensor {name} size overflows")))?;
            let bytes = read_bytes(r, n * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(FormatError::Malformed("trailing bytes after last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, FormatError> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FormatError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
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

/// Reads exactly `n` bytes without trusting `n` for the initial allocation.
fn read_bytes<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut out = Vec::new();
    let got = r.take(n as u64).read_to_end(&mut out)?;
    if got != n {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated MOEC file"));
    }
    Ok(out)
}
