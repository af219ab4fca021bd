//! Binary tensor containers and PGM previews.
//!
//! A DAT1 file is the 4-byte magic `DAM1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the payload as little-endian `f32` in
//! row-major order (channel-major for rank 3).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DepthMap, FeatureMap, LabelMap, WeightTensor};

pub const MAGIC: &[u8; 4] = b"DAM1";

/// A tensor as stored on disk: extents plus `f32` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::Format(format!(
                "expected rank {rank}, found rank {} ({:?})",
                self.dims.len(),
                self.dims
            )));
        }
        Ok(())
    }

    pub fn encode(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            let d =
                u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn decode(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("payload shorter than {count} values")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(BufReader::new(File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

impl From<&FeatureMap> for RawTensor {
    fn from(map: &FeatureMap) -> Self {
        let (c, h, w) = map.dims();
        Self::from_f64(vec![c, h, w], map.values()).expect("feature map dims are consistent")
    }
}

impl TryFrom<RawTensor> for FeatureMap {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        raw.expect_rank(3)?;
        FeatureMap::from_vec(raw.dims[0], raw.dims[1], raw.dims[2], raw.to_f64())
    }
}

impl From<&WeightTensor> for RawTensor {
    fn from(w: &WeightTensor) -> Self {
        Self::from_f64(
            vec![
                w.out_channels(),
                w.in_channels(),
                w.kernel_h(),
                w.kernel_w(),
            ],
            w.values(),
        )
        .expect("weight dims are consistent")
    }
}

impl TryFrom<RawTensor> for WeightTensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        raw.expect_rank(4)?;
        WeightTensor::from_vec(
            raw.dims[0],
            raw.dims[1],
            raw.dims[2],
            raw.dims[3],
            raw.to_f64(),
        )
    }
}

impl From<&DepthMap> for RawTensor {
    fn from(d: &DepthMap) -> Self {
        Self::from_f64(vec![d.height(), d.width()], d.depths()).expect("depth dims are consistent")
    }
}

impl TryFrom<RawTensor> for DepthMap {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        raw.expect_rank(2)?;
        DepthMap::from_vec(raw.dims[0], raw.dims[1], raw.to_f64())
    }
}

impl From<&LabelMap> for RawTensor {
    fn from(l: &LabelMap) -> Self {
        Self::new(
            vec![l.height(), l.width()],
            l.labels().iter().map(|&v| v as f32).collect(),
        )
        .expect("label dims are consistent")
    }
}

/// Decodes a rank-2 label tensor; values must be non-negative integers.
pub fn labels_from_raw(raw: RawTensor, ignore_label: Option<usize>) -> Result<LabelMap> {
    raw.expect_rank(2)?;
    let labels = raw
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!(
                    "label value {v} is not a class index"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(raw.dims[0], raw.dims[1], labels, ignore_label)
}

/// Writes an 8-bit binary PGM (P5).
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::Shape(format!(
            "{} pixels for a {height}x{width} image",
            pixels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

/// Linearly rescales `values` so the minimum maps to 0 and the maximum to 255.
pub fn rescale_to_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn depth_to_pgm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    write_pgm(
        path,
        depth.height(),
        depth.width(),
        &rescale_to_u8(depth.depths()),
    )
}

/// Spreads class indices evenly over the gray range; ignored pixels are black.
pub fn labels_to_pgm(path: impl AsRef<Path>, labels: &LabelMap, classes: usize) -> Result<()> {
    let step = 255 / classes.saturating_sub(1).max(1);
    let pixels: Vec<u8> = labels
        .labels()
        .iter()
        .map(|&l| {
            if labels.is_ignored(l) {
                0
            } else {
                (l * step).min(255) as u8
            }
        })
        .collect();
    write_pgm(path, labels.height(), labels.width(), &pixels)
}
