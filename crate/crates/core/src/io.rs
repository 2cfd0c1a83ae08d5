//! On-disk formats: `UQDM` float maps, 8-bit PNG images and content hashes.
//!
//! A float map is the 4-byte magic `UQDM`, then width and height as
//! little-endian `u32`, then `width * height` little-endian `f32` values in
//! row-major order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ImageFrame, Intrinsics};
use crate::uncertainty::UncertaintyMap;

pub const MAP_MAGIC: &[u8; 4] = b"UQDM";
const HEADER_LEN: usize = 12;

/// Raw contents of a float map file.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!("{} values for a {width}x{height} map", values.len())));
        }
        Ok(Self { width, height, values })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::BadMapFile {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAP_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("dimensions overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(bad(format!(
                "size mismatch: {width}x{height} needs {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { width, height, values })
    }
}

impl From<&DepthMap> for FloatMap {
    fn from(d: &DepthMap) -> Self {
        Self {
            width: d.width(),
            height: d.height(),
            values: d.values().to_vec(),
        }
    }
}

impl From<&UncertaintyMap> for FloatMap {
    fn from(u: &UncertaintyMap) -> Self {
        Self {
            width: u.width(),
            height: u.height(),
            values: u.values().to_vec(),
        }
    }
}

pub fn write_map(path: &Path, map: &FloatMap) -> Result<()> {
    write_bytes(path, &map.encode())
}

pub fn read_map(path: &Path) -> Result<FloatMap> {
    FloatMap::decode(&read_bytes(path)?, path)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_map(path, &depth.into())
}

/// Reads a depth map; its valid range is the tightest one covering the values.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let m = read_map(path)?;
    DepthMap::from_values(m.width, m.height, m.values).map_err(|e| Error::BadMapFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_uncertainty(path: &Path, u: &UncertaintyMap) -> Result<()> {
    write_map(path, &u.into())
}

pub fn read_uncertainty(path: &Path) -> Result<UncertaintyMap> {
    let m = read_map(path)?;
    UncertaintyMap::new(m.width, m.height, m.values).map_err(|e| Error::BadMapFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Quantizes to 8-bit RGB and writes a PNG.
pub fn write_image(path: &Path, frame: &ImageFrame) -> Result<()> {
    let (w, h) = (frame.width(), frame.height());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| quantize(frame.get(c, y, x)));
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_bytes(path, &bytes)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_image(path: &Path, intrinsics: Intrinsics) -> Result<ImageFrame> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = vec![0.0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * h + y as usize) * w + x as usize] = f32::from(p.0[c]) / 255.0;
        }
    }
    ImageFrame::new(w, h, pixels, intrinsics)
}

/// Writes a single-channel 8-bit PNG, normalizing `values` to their range.
pub fn write_heatmap(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = values.iter().map(|&v| quantize((v - lo) / span)).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::shape("heatmap size"))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_bytes(path, &bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, toml::to_string(value)?.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))?;
    Ok(toml::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_encoding() {
        let m = FloatMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = m.encode();
        // 4 magic + 8 dims + 16 payload
        assert_eq!(b.len(), 28);
        assert_eq!(&b[..4], b"UQDM");
        assert_eq!(&b[4..12], &[2, 0, 0, 0, 2, 0, 0, 0]);
        // IEEE-754 single: 1.0 = 0x3f800000, 2.0 = 0x40000000, 3.0 = 0x40400000, 4.0 = 0x40800000
        assert_eq!(
            &b[12..],
            &[0, 0, 0x80, 0x3f, 0, 0, 0, 0x40, 0, 0, 0x40, 0x40, 0, 0, 0x80, 0x40]
        );
    }

    #[test]
    fn decode_rejects_corruption() {
        let p = Path::new("x.uqdm");
        let b = FloatMap::new(2, 2, vec![1.0; 4]).unwrap().encode();
        assert!(matches!(FloatMap::decode(&b[..19], p), Err(Error::BadMapFile { .. })));
        assert!(FloatMap::decode(&b[..5], p).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(FloatMap::decode(&bad, p).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(FloatMap::decode(&extra, p).is_err());
    }

    #[test]
    fn file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vals = vec![0.1f32, f32::MIN_POSITIVE, 1e30, 7.25, 3.0, 0.333];
        let m = FloatMap::new(3, 2, vals).unwrap();
        let p = dir.path().join("sub/m.uqdm");
        write_map(&p, &m).unwrap();
        let back = read_map(&p).unwrap();
        assert_eq!(
            back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(matches!(read_map(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let k = Intrinsics::new(4.0, 4.0, 1.5, 0.5, 4, 2).unwrap();
        let pixels: Vec<f32> = (0..24).map(|i| quantize(i as f32 / 23.0) as f32 / 255.0).collect();
        let f = ImageFrame::new(4, 2, pixels, k).unwrap();
        let p = dir.path().join("a.png");
        write_image(&p, &f).unwrap();
        assert_eq!(read_image(&p, k).unwrap(), f);
    }
}
