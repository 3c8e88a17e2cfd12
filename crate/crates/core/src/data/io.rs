//! Binary dataset container.
//!
//! ```text
//! "PADS"  u32 version = 1  u32 sample_count
//! per sample:
//!   u32 height  u32 width  u32 num_classes
//!   f32[3*H*W] image   f32[H*W] depth   u8[H*W] labels
//! ```
//!
//! All integers and floats are little endian, all maps row-major. Derived
//! targets are not stored; they are recomputed on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const DATASET_MAGIC: &[u8; 4] = b"PADS";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset<W: Write>(mut out: W, samples: &[Sample]) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&u32::try_from(samples.len()).map_err(|_| Error::Usage("too many samples".into()))?.to_le_bytes())?;
    for s in samples {
        for v in [s.height(), s.width(), s.num_classes] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * (s.image.len() + s.depth.len()) + s.labels.data.len());
        for &v in s.image.data().iter().chain(s.depth.data()) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&s.labels.data);
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_dataset_file(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, samples)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Little-endian reader that reports the offset of whatever it fails on.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Load {
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "truncated: {what} needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.fail("size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Load {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected \"PADS\""),
        });
    }
    let at = cur.offset();
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Load {
            offset: at,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = cur.offset();
        let h = cur.u32("height")? as usize;
        let w = cur.u32("width")? as usize;
        let classes = cur.u32("num_classes")? as usize;
        let image = cur.f32s(3 * h * w, "image")?;
        let depth = cur.f32s(h * w, "depth")?;
        let labels = cur.take(h * w, "labels")?.to_vec();
        let sample = Sample::from_parts(
            Tensor4::from_vec(Shape4::new(1, 3, h, w), image)?,
            Tensor4::from_vec(Shape4::new(1, 1, h, w), depth)?,
            LabelMap::from_vec(1, h, w, labels)?,
            classes,
        )
        .map_err(|e| Error::Load {
            offset: start,
            reason: format!("sample {i}: {e}"),
        })?;
        samples.push(sample);
    }
    if !cur.is_at_end() {
        return Err(cur.fail("trailing bytes after the last sample"));
    }
    Ok(samples)
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    read_dataset(&fs::read(path)?)
}
