//! Little-endian binary codecs for volumes, depth maps and flow fields.
//!
//! | file     | layout                                                              |
//! |----------|---------------------------------------------------------------------|
//! | volume   | `OCTV` u32 w, u32 h, u32 d, f32 pitch, f32 voxels (x fastest)       |
//! | depth    | `ZMAP` u32 w, u32 h, f32 values, mask bits (MSB first, rows padded) |
//! | flow     | `SF25` u32 w, u32 h, u32 channels, f32 channel-planar payload       |

use std::path::Path;

use super::{DepthMap, FlowField, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const VOLUME_MAGIC: &[u8; 4] = b"OCTV";
pub const DEPTH_MAGIC: &[u8; 4] = b"ZMAP";
pub const FLOW_MAGIC: &[u8; 4] = b"SF25";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Volume,
    DepthMap,
    Flow,
}

/// Identifies a payload by its magic bytes.
pub fn sniff_magic(bytes: &[u8]) -> Option<FileKind> {
    match bytes.get(..4)? {
        m if m == VOLUME_MAGIC => Some(FileKind::Volume),
        m if m == DEPTH_MAGIC => Some(FileKind::DepthMap),
        m if m == FLOW_MAGIC => Some(FileKind::Flow),
        _ => None,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format("truncated header"));
        }
        if &bytes[..4] != magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { bytes, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("truncated payload"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Checks that exactly `expected` bytes remain.
    fn expect_remaining(&self, expected: usize) -> Result<()> {
        let remaining = self.bytes.len() - self.pos;
        match remaining.cmp(&expected) {
            std::cmp::Ordering::Less => Err(Error::format(format!(
                "truncated payload: {remaining} bytes, header declares {expected}"
            ))),
            std::cmp::Ordering::Greater => Err(Error::format(format!(
                "trailing data: {remaining} bytes, header declares {expected}"
            ))),
            std::cmp::Ordering::Equal => Ok(()),
        }
    }

    fn f32_vec<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    }
}

fn dims_nonzero(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::domain(format!("zero dimension in header {dims:?}")));
    }
    Ok(())
}

fn payload_len(dims: &[usize], elem: usize) -> Result<usize> {
    dims.iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("declared size overflows"))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s<T: Scalar>(out: &mut Vec<u8>, vals: &[T]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
}

pub fn encode_volume<T: Scalar>(v: &Volume<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + v.voxels().len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    put_u32(&mut out, v.width());
    put_u32(&mut out, v.height());
    put_u32(&mut out, v.depth());
    out.extend_from_slice(&v.voxel_pitch_um().to_f32_lossy().to_le_bytes());
    put_f32s(&mut out, v.voxels());
    out
}

pub fn decode_volume<T: Scalar>(bytes: &[u8]) -> Result<Volume<T>> {
    let mut r = Reader::new(bytes, VOLUME_MAGIC)?;
    let (w, h, d) = (r.u32()?, r.u32()?, r.u32()?);
    let pitch = r.f32()?;
    dims_nonzero(&[w, h, d])?;
    r.expect_remaining(payload_len(&[w, h, d], 4)?)?;
    let voxels = r.f32_vec(w * h * d)?;
    Volume::new(w, h, d, voxels, T::of(pitch))
}

fn mask_stride(width: usize) -> usize {
    width.div_ceil(8)
}

pub fn encode_depth_map<T: Scalar>(z: &DepthMap<T>) -> Vec<u8> {
    let (w, h) = (z.width(), z.height());
    let stride = mask_stride(w);
    let mut out = Vec::with_capacity(12 + w * h * 4 + stride * h);
    out.extend_from_slice(DEPTH_MAGIC);
    put_u32(&mut out, w);
    put_u32(&mut out, h);
    put_f32s(&mut out, z.values());
    for row in z.valid().chunks(w) {
        let mut bytes = vec![0u8; stride];
        for (x, _) in row.iter().enumerate().filter(|(_, &ok)| ok) {
            bytes[x / 8] |= 0x80 >> (x % 8);
        }
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn decode_depth_map<T: Scalar>(bytes: &[u8]) -> Result<DepthMap<T>> {
    let mut r = Reader::new(bytes, DEPTH_MAGIC)?;
    let (w, h) = (r.u32()?, r.u32()?);
    dims_nonzero(&[w, h])?;
    let stride = mask_stride(w);
    let expected = payload_len(&[w, h], 4)?
        .checked_add(payload_len(&[stride, h], 1)?)
        .ok_or_else(|| Error::format("declared size overflows"))?;
    r.expect_remaining(expected)?;
    let values = r.f32_vec(w * h)?;
    let mut valid = Vec::with_capacity(w * h);
    for _ in 0..h {
        let row = r.take(stride)?;
        valid.extend((0..w).map(|x| row[x / 8] & (0x80 >> (x % 8)) != 0));
    }
    DepthMap::new(w, h, values, valid).map_err(|e| Error::format(e.to_string()))
}

pub fn encode_flow<T: Scalar>(f: &FlowField<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + f.data().len() * 4);
    out.extend_from_slice(FLOW_MAGIC);
    put_u32(&mut out, f.width());
    put_u32(&mut out, f.height());
    put_u32(&mut out, f.channels());
    put_f32s(&mut out, f.data());
    out
}

pub fn decode_flow<T: Scalar>(bytes: &[u8]) -> Result<FlowField<T>> {
    let mut r = Reader::new(bytes, FLOW_MAGIC)?;
    let (w, h, c) = (r.u32()?, r.u32()?, r.u32()?);
    dims_nonzero(&[w, h])?;
    if c != 2 && c != 3 {
        return Err(Error::format(format!("flow channel count {c} not in {{2, 3}}")));
    }
    r.expect_remaining(payload_len(&[w, h, c], 4)?)?;
    let data = r.f32_vec(w * h * c)?;
    FlowField::new(w, h, c, data).map_err(|e| Error::format(e.to_string()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    decode_volume(&read_bytes(path.as_ref())?)
}

pub fn write_volume<T: Scalar>(path: impl AsRef<Path>, v: &Volume<T>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v))
}

pub fn read_depth_map<T: Scalar>(path: impl AsRef<Path>) -> Result<DepthMap<T>> {
    decode_depth_map(&read_bytes(path.as_ref())?)
}

pub fn write_depth_map<T: Scalar>(path: impl AsRef<Path>, z: &DepthMap<T>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_depth_map(z))
}

pub fn read_flow<T: Scalar>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    decode_flow(&read_bytes(path.as_ref())?)
}

pub fn write_flow<T: Scalar>(path: impl AsRef<Path>, f: &FlowField<T>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flow(f))
}
