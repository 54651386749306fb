//! The `.rvol` volume container.
//!
//! Layout (little-endian): the magic `RVOL`, a `u32` format version, `u32`
//! extents X, Y, Z, three `f32` voxel spacings, a `u8` dtype tag (0 = `f32`
//! intensities, 1 = `u8` mask) and the raw voxel buffer, x fastest. Nothing
//! may follow the buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{voxel_count, BinaryMask, Volume};
use crate::error::{Error, Result};

pub const RVOL_MAGIC: [u8; 4] = *b"RVOL";
pub const RVOL_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_MASK: u8 = 1;

/// Contents of an `.rvol` file.
#[derive(Clone, Debug, PartialEq)]
pub enum Rvol {
    Intensity(Volume),
    Mask(BinaryMask),
}

impl Rvol {
    pub fn extents(&self) -> [usize; 3] {
        match self {
            Rvol::Intensity(v) => v.extents(),
            Rvol::Mask(m) => m.extents(),
        }
    }

    pub fn into_volume(self) -> Result<Volume> {
        match self {
            Rvol::Intensity(v) => Ok(v),
            Rvol::Mask(_) => Err(Error::Data("expected an intensity volume, found a mask".into())),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask> {
        match self {
            Rvol::Mask(m) => Ok(m),
            Rvol::Intensity(_) => Err(Error::Data("expected a mask, found an intensity volume".into())),
        }
    }

    /// Serializes to the container format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (extents, spacing) = match self {
            Rvol::Intensity(v) => (v.extents(), v.spacing()),
            Rvol::Mask(m) => (m.extents(), m.spacing()),
        };
        let mut out = Vec::with_capacity(33 + voxel_count(extents) * 4);
        out.extend_from_slice(&RVOL_MAGIC);
        out.extend_from_slice(&RVOL_VERSION.to_le_bytes());
        for e in extents {
            let e = u32::try_from(e).map_err(|_| Error::Data(format!("extent {e} does not fit the format")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for s in spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match self {
            Rvol::Intensity(v) => {
                out.push(DTYPE_F32);
                for x in v.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Rvol::Mask(m) => {
                out.push(DTYPE_MASK);
                out.extend_from_slice(m.data());
            }
        }
        Ok(out)
    }

    /// Parses the container format, rejecting truncated or trailing data.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Data(format!("truncated .rvol: missing {what}")));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4, "magic")? != RVOL_MAGIC {
            return Err(Error::Data("not an .rvol file (bad magic)".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4, "version")?);
        if version != RVOL_VERSION {
            return Err(Error::Data(format!("unsupported .rvol version {version}")));
        }
        let mut extents = [0usize; 3];
        for e in &mut extents {
            *e = u32_at(take(4, "extents")?) as usize;
        }
        let mut spacing = [0f32; 3];
        for s in &mut spacing {
            *s = f32::from_le_bytes(take(4, "spacing")?.try_into().unwrap());
        }
        let dtype = take(1, "dtype")?[0];
        let n = voxel_count(extents);
        let out = match dtype {
            DTYPE_F32 => {
                let raw = take(n * 4, "voxel data")?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Rvol::Intensity(Volume::new(extents, spacing, data)?)
            }
            DTYPE_MASK => Rvol::Mask(BinaryMask::new(extents, spacing, take(n, "mask data")?.to_vec())?),
            other => return Err(Error::Data(format!("unknown .rvol dtype tag {other}"))),
        };
        if !r.is_empty() {
            return Err(Error::Data(format!("{} trailing bytes after .rvol data", r.len())));
        }
        Ok(out)
    }
}

pub fn write_rvol(path: impl AsRef<Path>, contents: &Rvol) -> Result<()> {
    let path = path.as_ref();
    let bytes = contents.to_bytes()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_rvol(path: impl AsRef<Path>) -> Result<Rvol> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Rvol::from_bytes(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl Volume {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rvol(path, &Rvol::Intensity(self.clone()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_rvol(path)?.into_volume()
    }
}

impl BinaryMask {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rvol(path, &Rvol::Mask(self.clone()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_rvol(path)?.into_mask()
    }
}
