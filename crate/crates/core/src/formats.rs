//! Bit-exact binary formats shared by every module.
//!
//! DYC1 checkpoints: magic "DYC1", u32 LE version, u32 tensor count,
//! then per tensor a u16 name length, UTF-8 name, u8 rank, rank u32 LE
//! dims, row-major f32 LE data; the file ends with a u32
//! length-prefixed UTF-8 config echo. TEN1 tensor files: magic "TEN1",
//! u8 rank, rank u32 LE dims, f32 LE data. Images as binary PPM (P6,
//! maxval 255).

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const DYC1_VERSION: u32 = 1;

/// A parsed DYC1 checkpoint: named f32 tensors in file order plus the
/// trailing config echo.
pub struct Checkpoint {
    pub tensors: ParamStore<f32>,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn new(tensors: ParamStore<f32>, config_echo: String) -> Self {
        Checkpoint {
            tensors,
            config_echo,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"DYC1");
        out.extend_from_slice(&DYC1_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let echo = self.config_echo.as_bytes();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != b"DYC1" {
            return Err(Error::Format("DYC1: bad magic".into()));
        }
        let version = r.u32()?;
        if version != DYC1_VERSION {
            return Err(Error::Format(format!("DYC1: unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Format(format!("DYC1: bad name: {e}")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.contains(&name) {
                return Err(Error::Format(format!("DYC1: duplicate tensor {name}")));
            }
            tensors.insert(&name, Tensor::new(shape, data)?);
        }
        let echo_len = r.u32()? as usize;
        let config_echo = String::from_utf8(r.take(echo_len)?.to_vec())
            .map_err(|e| Error::Format(format!("DYC1: bad config echo: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("DYC1: trailing bytes".into()));
        }
        Ok(Checkpoint {
            tensors,
            config_echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_ten1(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(5 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(b"TEN1");
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_ten1(path: &Path) -> Result<Tensor<f32>> {
    let buf = std::fs::read(path)?;
    let mut r = Cursor { buf: &buf, pos: 0 };
    if r.take(4)? != b"TEN1" {
        return Err(Error::Format("TEN1: bad magic".into()));
    }
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = r.take(4 * n)?;
    if r.pos != buf.len() {
        return Err(Error::Format("TEN1: trailing bytes".into()));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Write one (3,H,W) frame in [0,1] as binary PPM.
pub fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("write_ppm: expected (3,H,W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = frame.data()[c * h * w + i * w + j].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Lay F frames of a (F,3,H,W) video side by side and write one PPM strip.
pub fn write_ppm_strip(path: &Path, video: &Tensor<f32>) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!(
            "write_ppm_strip: expected (F,3,H,W), got {s:?}"
        )));
    }
    let (f, h, w) = (s[0], s[2], s[3]);
    let mut strip = Tensor::zeros(vec![3, h, f * w]);
    for fr in 0..f {
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    strip.data_mut()[c * h * f * w + i * f * w + fr * w + j] =
                        video.data()[fr * 3 * h * w + c * h * w + i * w + j];
                }
            }
        }
    }
    write_ppm(path, &strip)
}

/// Render a nonnegative matrix as a grayscale PPM heatmap, scaled so
/// the max value maps to white.
pub fn write_ppm_heatmap(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("heatmap: expected 2D, got {s:?}")));
    }
    let max = map.data().iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let frame = Tensor::from_fn(vec![3, s[0], s[1]], |i| map.data()[i % (s[0] * s[1])] / max);
    write_ppm(path, &frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dyc1_roundtrip_byte_identical() {
        let mut store = ParamStore::new();
        store.insert("ae.enc.w", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5));
        store.insert("dit.head.b", Tensor::from_fn(vec![4], |i| -(i as f32)));
        let ckpt = Checkpoint::new(store, "{\"seed\":7}".into());
        let bytes = ckpt.to_bytes();
        let parsed = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(parsed.to_bytes(), bytes);
        assert_eq!(parsed.config_echo, "{\"seed\":7}");
        assert_eq!(parsed.tensors.get("ae.enc.w").unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn dyc1_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(vec![1]));
        let mut bytes = Checkpoint::new(store, String::new()).to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn ten1_size_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ten1");
        let t = Tensor::from_fn(vec![2, 3, 4], |i| i as f32);
        write_ten1(&p, &t).unwrap();
        let size = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(size, 5 + 4 * 3 + 4 * 24);
        let back = read_ten1(&p).unwrap();
        assert_eq!(&back, &t);
    }

    #[test]
    fn ppm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ppm");
        let frame = Tensor::from_fn(vec![3, 2, 2], |i| if i == 0 { 1.0 } else { 0.0 });
        write_ppm(&p, &frame).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P6\n2 2\n255\n".len() + 12);
        assert_eq!(bytes[b"P6\n2 2\n255\n".len()], 255); // R of pixel (0,0)
    }
}
