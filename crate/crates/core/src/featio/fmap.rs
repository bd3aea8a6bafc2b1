//! FMAP binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FGFM"  u16 version=1  u16 num_scales  u32 num_samples
//! num_scales x (u32 C, u32 H, u32 W)
//! num_samples x (u32 label, then every scale as f32 in (C, H, W) order)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{check_homogeneous, validate_dims, FeatureMap, FeatureSample, ScaleDims};
use crate::error::{Error, Result};

pub const FMAP_MAGIC: [u8; 4] = *b"FGFM";
pub const FMAP_VERSION: u16 = 1;

/// Decoded FMAP contents. `dims` is meaningful even when `samples` is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct FmapFile {
    pub dims: Vec<ScaleDims>,
    pub samples: Vec<FeatureSample>,
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<Vec<FeatureSample>> {
    read_fmap_file(path).map(|f| f.samples)
}

pub fn read_fmap_file(path: impl AsRef<Path>) -> Result<FmapFile> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &buf)
}

fn decode(path: &Path, buf: &[u8]) -> Result<FmapFile> {
    let mut r = Reader { path, buf, pos: 0 };
    let magic = r.take(4, "magic")?.to_vec();
    if magic != FMAP_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {magic:02x?}")));
    }
    let version = r.u16("version")?;
    if version != FMAP_VERSION {
        r.pos -= 2;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let num_scales = r.u16("scale count")? as usize;
    let num_samples = r.u32("sample count")? as usize;
    let mut dims = Vec::with_capacity(num_scales);
    for _ in 0..num_scales {
        let c = r.u32("scale dims")? as usize;
        let h = r.u32("scale dims")? as usize;
        let w = r.u32("scale dims")? as usize;
        dims.push(ScaleDims::new(c, h, w));
    }
    if let Err(e) = validate_dims(&dims) {
        return Err(r.fail(format!("invalid scale dims: {e}")));
    }
    let record_len = 4 + dims.iter().map(|d| 4 * d.len()).sum::<usize>();
    let remaining = buf.len() - r.pos;
    if remaining / record_len < num_samples {
        let whole = remaining / record_len;
        r.pos += whole * record_len;
        return Err(r.fail(format!(
            "truncated data: header declares {num_samples} samples, file holds {whole} complete records"
        )));
    }

    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let label = r.u32("label")?;
        let mut scales = Vec::with_capacity(dims.len());
        for &d in &dims {
            let raw = r.take(4 * d.len(), "scale data")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            scales.push(FeatureMap::new(d, data)?);
        }
        samples.push(FeatureSample { scales, label });
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes after last record", buf.len() - r.pos)));
    }
    Ok(FmapFile { dims, samples })
}

/// Writes `samples`, taking the declared dims from the first sample.
pub fn write_fmap(path: impl AsRef<Path>, samples: &[FeatureSample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::contract(
            "write_fmap: no samples to infer dims from; use write_fmap_with_dims",
        ));
    };
    write_fmap_with_dims(path, &first.dims(), samples)
}

pub fn write_fmap_with_dims(path: impl AsRef<Path>, dims: &[ScaleDims], samples: &[FeatureSample]) -> Result<()> {
    let path = path.as_ref();
    validate_dims(dims)?;
    check_homogeneous(dims, samples)?;
    let too_big = |v: usize| u32::try_from(v).is_err();
    if dims.len() > u16::MAX as usize
        || too_big(samples.len())
        || dims
            .iter()
            .any(|d| too_big(d.channels) || too_big(d.height) || too_big(d.width))
    {
        return Err(Error::contract(
            "write_fmap: dimension exceeds the on-disk integer width",
        ));
    }
    if let Some(s) = samples.iter().find(|s| s.label == u32::MAX) {
        return Err(Error::Contract(format!("write_fmap: reserved label {}", s.label)));
    }

    let record_len = 4 + dims.iter().map(|d| 4 * d.len()).sum::<usize>();
    let mut out = Vec::with_capacity(12 + 12 * dims.len() + samples.len() * record_len);
    out.extend_from_slice(&FMAP_MAGIC);
    out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for d in dims {
        for v in [d.channels, d.height, d.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for s in samples {
        out.extend_from_slice(&s.label.to_le_bytes());
        for map in &s.scales {
            for &v in map.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(PathBuf::from(path), e))
}

/// Size in bytes of an FMAP file with the given dims and sample count.
pub fn encoded_len(dims: &[ScaleDims], num_samples: usize) -> usize {
    12 + 12 * dims.len() + num_samples * (4 + dims.iter().map(|d| 4 * d.len()).sum::<usize>())
}
