//! `.glft` multi-level feature files.
//!
//! Layout (little-endian): magic `GLFT`, `u32` version, `u16` level count,
//! then per level `u32 H`, `u32 W`, `u32 C` followed by `H*W*C` `f32`
//! values in `(h, w, c)` row-major order. Level ids are not stored; readers
//! name them `l0`, `l1`, ... in file order.

use std::path::Path;

use glass_core::featpipe::{Grid, Level, LevelFeatures};

use crate::error::{Error, FormatError, Result};
use crate::files;

pub const MAGIC: [u8; 4] = *b"GLFT";
pub const VERSION: u32 = 1;

/// Raw `f32` levels exactly as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct GlftLevel {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

pub fn encode(levels: &[GlftLevel]) -> std::result::Result<Vec<u8>, FormatError> {
    let count = u16::try_from(levels.len()).map_err(|_| FormatError::Overflow(format!("{} levels", levels.len())))?;
    let mut out = Vec::with_capacity(10 + levels.iter().map(|l| 12 + 4 * l.data.len()).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for l in levels {
        let n = level_len(l.height, l.width, l.channels)?;
        if n != l.data.len() {
            return Err(FormatError::Invalid(format!("{}x{}x{} level holds {} values", l.height, l.width, l.channels, l.data.len())));
        }
        for d in [l.height, l.width, l.channels] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &l.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

fn level_len(h: u32, w: u32, c: u32) -> std::result::Result<usize, FormatError> {
    (h as usize)
        .checked_mul(w as usize)
        .and_then(|n| n.checked_mul(c as usize))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| FormatError::Overflow(format!("{h}x{w}x{c}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<GlftLevel>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u16()?;
    let mut levels = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (height, width, channels) = (r.u32()?, r.u32()?, r.u32()?);
        let n = level_len(height, width, channels)?;
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap()))).collect();
        levels.push(GlftLevel { height, width, channels, data });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - r.pos));
    }
    Ok(levels)
}

/// Widen stored levels into validated core features.
pub fn to_features(levels: &[GlftLevel]) -> glass_core::Result<LevelFeatures> {
    let levels = levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let data = l.data.iter().map(|&v| v as f64).collect();
            Ok(Level { id: format!("l{i}"), grid: Grid::new(l.height as usize, l.width as usize, l.channels as usize, data)? })
        })
        .collect::<glass_core::Result<Vec<_>>>()?;
    LevelFeatures::new(levels)
}

/// Narrow core features to `f32` for storage.
pub fn from_features(features: &LevelFeatures) -> std::result::Result<Vec<GlftLevel>, FormatError> {
    features
        .levels
        .iter()
        .map(|l| {
            let g = &l.grid;
            let dim = |d: usize| u32::try_from(d).map_err(|_| FormatError::Overflow(format!("dimension {d}")));
            Ok(GlftLevel {
                height: dim(g.height)?,
                width: dim(g.width)?,
                channels: dim(g.channels)?,
                data: g.data.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect()
}

pub fn read(path: &Path) -> Result<Vec<GlftLevel>> {
    decode(&files::read(path)?).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}

pub fn read_features(path: &Path) -> Result<LevelFeatures> {
    to_features(&read(path)?).map_err(|source| Error::Core { context: path.display().to_string(), source })
}

pub fn write(path: &Path, levels: &[GlftLevel]) -> Result<()> {
    let bytes = encode(levels).map_err(|source| Error::Format { path: path.to_path_buf(), source })?;
    files::write_atomic(path, &bytes)
}
